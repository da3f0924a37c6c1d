"""Batch command-line front end: estimate, simulate, falsify.

Commands read CSV input (``y,d,x,z`` header), write machine-readable output
(JSON documents for nested results, CSV for study tables), and embed a run
manifest in everything they produce. Exit codes: 0 success, 2 malformed
input, 3 estimation failure, 4 too many study replications failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, core, dte, falsify, nmf, sim
from .core import InsufficientSupportError
from .dte import RankDeficiencyError
from .qp import QpInfeasibleError

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_TOO_MANY_FAILURES = 4


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command: str, config: dict, inputs: list[str], seed: int,
              started: float) -> dict:
    return {
        "command": command,
        "config": config,
        "input_digests": {p: _sha256(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }


def _parse_grid(text: str) -> list[float]:
    try:
        a, b, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"grid must be 'start:stop:step', got {text!r}") from None
    if step <= 0 or b < a:
        raise ValueError(f"grid must have stop >= start and step > 0, got {text!r}")
    return [float(v) for v in np.arange(a, b + 1e-9, step)]


def _load_dataset(args) -> core.DiscreteDataset:
    y, d, x, z = core.load_csv(args.input)
    m_y = args.my or args.k
    m_x = args.mx or args.k
    m_z = args.mz or args.k
    return core.discretize(
        y, d, x, z,
        core.build_partition(y, m_y),
        core.build_partition(x, m_x),
        core.build_partition(z, m_z),
    )


def _fit_dataset(ds: core.DiscreteDataset, args) -> nmf.MixtureFit:
    cfg = nmf.NmfConfig(k=args.k, restarts=args.restarts, seed=args.seed)
    h0 = core.build_h(ds, 0)
    h1 = core.build_h(ds, 1)
    return nmf.align(nmf.fit(h0, h1, cfg, m_x=ds.m_x))


def _matrix_doc(fit: nmf.MixtureFit) -> dict:
    return {
        "gamma_x": fit.gamma_x.values.tolist(),
        "gamma_y0": fit.gamma_y0.values.tolist(),
        "gamma_y1": fit.gamma_y1.values.tolist(),
        "lambda0": fit.lambda0.values.tolist(),
        "lambda1": fit.lambda1.values.tolist(),
        "objective": fit.objective,
        "converged": fit.converged,
    }


def _partition_doc(ds: core.DiscreteDataset) -> dict:
    return {name: list(part.cuts) for name, part in ds.partitions.items()
            if isinstance(part, core.Partition)}


def cmd_estimate(args) -> int:
    started = time.time()
    ds = _load_dataset(args)
    fit = _fit_dataset(ds, args)
    deltas = (_parse_grid(args.delta_grid) if args.delta_grid
              else [float(v) for v in range(-(ds.m_y - 1), ds.m_y)])
    targets = [dte.MarginalTarget(d) for d in deltas]
    ests = dte.estimate_many(ds, fit, targets)

    bounds = {}
    if args.bounds:
        cells = dte.CellTable.from_dataset(ds)
        nuis = dte.build_nuisances(fit, cells)
        f0, f1 = dte.marginal_cdfs(cells, nuis)
        for d in deltas:
            bounds[d] = dte.makarov_bounds(f1, f0, d)

    def row(delta, est):
        rec = {
            "delta": delta,
            "theta": est.theta_clamped if args.clamp else est.theta,
            "theta_raw": est.theta,
            "theta_clamped": est.theta_clamped,
            "se": est.se,
            "ci_lo": est.ci_lo,
            "ci_hi": est.ci_hi,
        }
        if bounds:
            rec["lower"] = bounds[delta].lower
            rec["upper"] = bounds[delta].upper
        return rec

    doc = {
        "schema": "dtemix-estimate-v1",
        "partitions": _partition_doc(ds),
        "n": ds.n,
        "k": args.k,
        "fit": _matrix_doc(fit),
        "marginal": [row(d, e) for d, e in zip(deltas, ests)],
    }
    if args.joint_grid:
        joint_targets = [dte.JointTarget(a, b)
                         for a in range(ds.m_y) for b in range(ds.m_y)]
        joint_ests = dte.estimate_many(ds, fit, joint_targets)
        doc["joint"] = [
            {"y0_cell": t.y0_cell, "y1_cell": t.y1_cell, "theta": e.theta,
             "theta_clamped": e.theta_clamped, "se": e.se,
             "ci_lo": e.ci_lo, "ci_hi": e.ci_hi}
            for t, e in zip(joint_targets, joint_ests)
        ]
    doc["manifest"] = _manifest("estimate", _config_dict(args), [args.input],
                                args.seed, started)
    _write_json(doc, args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    try:
        dgp = sim.load_dgp(args.dgp)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load DGP {args.dgp!r}: {exc}\n"
              f"see docs/dgp_schema.json for the expected document shape",
              file=sys.stderr)
        return EXIT_BAD_INPUT
    report = sim.run_study(dgp, b=args.reps, n=args.n, seed=args.seed,
                           n_jobs=args.workers)
    csv_text = report.to_csv()
    meta = report.metadata()
    meta["manifest"] = _manifest(
        "simulate", _config_dict(args),
        [args.dgp] if os.path.exists(str(args.dgp)) else [], args.seed, started)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        with open(str(args.output) + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)
    else:
        sys.stdout.write(csv_text)
    failed_share = report.n_failed / args.reps
    if failed_share > 0.10:
        print(f"error: {report.n_failed}/{args.reps} replications failed",
              file=sys.stderr)
        return EXIT_TOO_MANY_FAILURES
    if report.n_failed:
        print(f"note: {report.n_failed}/{args.reps} replications failed and were "
              f"excluded", file=sys.stderr)
    return EXIT_OK


def cmd_falsify(args) -> int:
    started = time.time()
    ds = _load_dataset(args)
    cfg = nmf.NmfConfig(k=args.k, restarts=args.restarts, seed=args.seed)
    result = falsify.run_test(ds, args.k, cfg)
    print(f"T={result.t_stat:.6g} df={result.df} p={result.p_value:.6g}")
    if args.output:
        doc = {
            "schema": "dtemix-falsify-v1",
            "t_stat": result.t_stat,
            "df": result.df,
            "p_value": result.p_value,
            "permutation": list(result.permutation),
            "rank_deficient": result.rank_deficient,
            "w": result.w.tolist(),
            "partitions": _partition_doc(ds),
            "manifest": _manifest("falsify", _config_dict(args), [args.input],
                                  args.seed, started),
        }
        _write_json(doc, args.output)
    return EXIT_OK


def _config_dict(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_json(doc: dict, path) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
    else:
        json.dump(doc, sys.stdout, indent=1)
        sys.stdout.write("\n")


def _default_workers() -> int:
    env = os.environ.get("DTEMIX_WORKERS")
    if env:
        return int(env)
    return max(1, os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtemix",
        description="Distributional treatment effect estimation with two proxy variables",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit the mixture and estimate effect CDFs")
    est.add_argument("--input", required=True, help="CSV with header y,d,x,z")
    est.add_argument("--k", type=int, required=True, help="latent support size")
    est.add_argument("--delta-grid", help="threshold grid start:stop:step (cell units)")
    est.add_argument("--joint-grid", action="store_true",
                     help="also estimate the joint CDF on the full cell grid")
    est.add_argument("--restarts", type=int, default=20)
    est.add_argument("--bounds", action="store_true",
                     help="add marginals-only bounds columns")
    est.add_argument("--clamp", action="store_true",
                     help="report estimates clamped to [0, 1]")
    est.add_argument("--my", type=int, help="outcome cells (default: k)")
    est.add_argument("--mx", type=int, help="X cells (default: k)")
    est.add_argument("--mz", type=int, help="Z cells (default: k)")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--workers", type=int, default=_default_workers())
    est.add_argument("--output", help="output JSON path (default: stdout)")
    est.set_defaults(func=cmd_estimate)

    simp = sub.add_parser("simulate", help="run a Monte Carlo study")
    simp.add_argument("--dgp", required=True,
                      help="DGP JSON file or built-in tag (701, 501, 310)")
    simp.add_argument("--reps", type=int, default=200)
    simp.add_argument("--n", type=int, default=2000)
    simp.add_argument("--seed", type=int, default=0)
    simp.add_argument("--workers", type=int, default=_default_workers())
    simp.add_argument("--output", help="output CSV path (default: stdout)")
    simp.set_defaults(func=cmd_simulate)

    fal = sub.add_parser("falsify", help="split-sample falsification test")
    fal.add_argument("--input", required=True, help="CSV with header y,d,x,z")
    fal.add_argument("--k", type=int, required=True)
    fal.add_argument("--restarts", type=int, default=20)
    fal.add_argument("--my", type=int, help="outcome cells (default: k)")
    fal.add_argument("--mx", type=int, help="X cells (default: k)")
    fal.add_argument("--mz", type=int, help="Z cells (default: k)")
    fal.add_argument("--seed", type=int, default=0)
    fal.add_argument("--output", help="optional JSON result path")
    fal.set_defaults(func=cmd_falsify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InsufficientSupportError, RankDeficiencyError, QpInfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
