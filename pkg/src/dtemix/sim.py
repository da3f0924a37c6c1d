"""Data-generating processes, exact probabilities, sampling, and the study harness.

A DGP is a finite mixture: latent class probabilities, component blocks for
X and both potential outcomes, a shared conditional weight matrix P{U|Z}, an
independent treatment toss, and the instrument marginal (solved from the
weight matrix when not given). Three built-in designs differ only in how
informative the weight matrix is, indexed by its smallest singular value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np
from numpy.typing import NDArray

from . import core, nmf
from .core import DiscreteDataset, Partition


# transcribed tables carry 3-decimal rounding; renormalize within this slack
_ROUNDING_TOL = 0.02


def _stochastic(a, name: str, tol: float = _ROUNDING_TOL) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=float)
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} columns must sum to 1 (off by {np.abs(sums - 1).max():.2e})")
    return arr / sums


@dataclass(frozen=True)
class DgpSpec:
    """Finite-mixture data-generating process.

    ``p_z=None`` requests derivation: solve ``lam @ p_z = p_u``, renormalize,
    and use the implied latent marginal as the truth (transcribed tables with
    rounded entries are made internally consistent this way).
    """

    p_u: NDArray[np.float64]
    gamma_x: NDArray[np.float64]
    gamma_y0: NDArray[np.float64]
    gamma_y1: NDArray[np.float64]
    lam: NDArray[np.float64]
    p_d1: float = 0.5
    p_z: NDArray[np.float64] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_u", _stochastic(np.asarray(self.p_u)[:, None], "p_u")[:, 0])
        for attr in ("gamma_x", "gamma_y0", "gamma_y1", "lam"):
            object.__setattr__(self, attr, _stochastic(getattr(self, attr), attr))
        k = self.p_u.size
        if self.lam.shape != (k, k):
            raise ValueError(f"lam must be {k}x{k}")
        for attr in ("gamma_x", "gamma_y0", "gamma_y1"):
            if getattr(self, attr).shape[1] != k:
                raise ValueError(f"{attr} must have {k} columns")
        if not 0 < self.p_d1 < 1:
            raise ValueError("p_d1 must lie in (0, 1)")
        if self.p_z is not None:
            object.__setattr__(self, "p_z",
                               _stochastic(np.asarray(self.p_z)[:, None], "p_z")[:, 0])

    @property
    def k(self) -> int:
        return self.p_u.size

    @property
    def m_y(self) -> int:
        return self.gamma_y0.shape[0]

    @property
    def m_x(self) -> int:
        return self.gamma_x.shape[0]


def resolve(dgp: DgpSpec) -> DgpSpec:
    """Fill in the instrument marginal and the implied latent marginal.

    Idempotent: a spec with ``p_z`` already set is returned unchanged.

    Raises
    ------
    ValueError
        If the solved instrument marginal has a meaningfully negative entry.
    """
    if dgp.p_z is not None:
        return dgp
    p_z = np.linalg.solve(dgp.lam, dgp.p_u)
    if p_z.min() < -1e-9:
        raise ValueError(f"derived p_z is not a probability vector: {p_z}")
    p_z = np.clip(p_z, 0.0, None)
    p_z = p_z / p_z.sum()
    implied_p_u = dgp.lam @ p_z
    return replace(dgp, p_z=p_z, p_u=implied_p_u)


def exact_cells(dgp: DgpSpec, x_partition: Partition | None = None) -> NDArray[np.float64]:
    """Exact joint cell probabilities pi[y, d, x, z] implied by the DGP."""
    dgp = resolve(dgp)
    p_d = np.array([1.0 - dgp.p_d1, dgp.p_d1])
    gy = np.stack([dgp.gamma_y0, dgp.gamma_y1])     # [d, y, k]
    pi = np.einsum("j,d,kj,xk,dyk->ydxj", dgp.p_z, p_d, dgp.lam, dgp.gamma_x, gy)
    if x_partition is not None:
        groups = x_partition.cell_index(np.arange(dgp.m_x, dtype=float))
        out = np.zeros((dgp.m_y, 2, x_partition.n_cells, dgp.k))
        for x_old, x_new in enumerate(groups):
            out[:, :, x_new, :] += pi[:, :, x_old, :]
        pi = out
    return pi


def exact_h(dgp: DgpSpec, d: int, x_partition: Partition | None = None) -> NDArray[np.float64]:
    """Population H matrix for arm d: the exact factor product, optionally X-collapsed."""
    dgp = resolve(dgp)
    gx = dgp.gamma_x
    if x_partition is not None:
        groups = x_partition.cell_index(np.arange(dgp.m_x, dtype=float))
        gx_c = np.zeros((x_partition.n_cells, dgp.k))
        for x_old, x_new in enumerate(groups):
            gx_c[x_new] += gx[x_old]
        gx = gx_c
    gy = dgp.gamma_y1 if d == 1 else dgp.gamma_y0
    gamma = (gx[:, None, :] * gy[None, :, :]).reshape(-1, dgp.k)
    return gamma @ dgp.lam


def true_dte(dgp: DgpSpec, delta: float) -> float:
    """Exact treatment-effect CDF at ``delta`` (cell scores are the 0-based indices)."""
    dgp = resolve(dgp)
    y0 = np.arange(dgp.m_y)[:, None]
    y1 = np.arange(dgp.m_y)[None, :]
    event = (y1 - y0 <= delta).astype(float)
    return float(np.einsum("k,ak,bk,ab->", dgp.p_u, dgp.gamma_y0, dgp.gamma_y1, event))


def true_joint(dgp: DgpSpec, y0_cell: int, y1_cell: int) -> float:
    """Exact joint CDF P{Y(0) in cells <= y0_cell, Y(1) in cells <= y1_cell}."""
    dgp = resolve(dgp)
    c0 = dgp.gamma_y0[: y0_cell + 1].sum(axis=0)
    c1 = dgp.gamma_y1[: y1_cell + 1].sum(axis=0)
    return float(dgp.p_u @ (c0 * c1))


def true_marginal_cdfs(dgp: DgpSpec) -> tuple[NDArray, NDArray]:
    dgp = resolve(dgp)
    return (np.cumsum(dgp.gamma_y0 @ dgp.p_u), np.cumsum(dgp.gamma_y1 @ dgp.p_u))


def _categorical(rng: np.random.Generator, probs: NDArray) -> NDArray[np.int64]:
    """Row-wise categorical draws: probs[i] is the distribution of draw i."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return (u[:, None] > cum).sum(axis=1).astype(np.int64)


def sample(dgp: DgpSpec, n: int, seed) -> DiscreteDataset:
    """Draw an i.i.d. sample; deterministic given the seed (int or tuple)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dgp = resolve(dgp)
    rng = np.random.default_rng(seed)
    z = _categorical(rng, np.tile(dgp.p_z, (n, 1)))
    d = (rng.random(n) < dgp.p_d1).astype(np.int64)
    u = _categorical(rng, dgp.lam[:, z].T)
    x = _categorical(rng, dgp.gamma_x[:, u].T)
    y0 = _categorical(rng, dgp.gamma_y0[:, u].T)
    y1 = _categorical(rng, dgp.gamma_y1[:, u].T)
    y = np.where(d == 1, y1, y0)
    return core.from_cells(y, d, x, z, dgp.m_y, dgp.m_x, dgp.k)


# ---------------------------------------------------------------------------
# built-in benchmark designs: shared component blocks, three weight matrices
# of decreasing smallest singular value
# ---------------------------------------------------------------------------

_P_U = (0.286, 0.286, 0.438)

_GAMMA_X = (
    (0.778, 0.028, 0.022),
    (0.067, 0.050, 0.033),
    (0.056, 0.422, 0.044),
    (0.044, 0.422, 0.056),
    (0.033, 0.050, 0.067),
    (0.022, 0.028, 0.778),
)

_GAMMA_Y1 = (
    (0.656, 0.022, 0.000),
    (0.117, 0.706, 0.117),
    (0.228, 0.272, 0.883),
)

_GAMMA_Y0 = (
    (0.756, 0.122, 0.078),
    (0.167, 0.756, 0.167),
    (0.078, 0.122, 0.756),
)

_LAMBDAS = {
    "701": (
        (0.840, 0.091, 0.040),
        (0.077, 0.772, 0.056),
        (0.083, 0.137, 0.905),
    ),
    "501": (
        (0.722, 0.134, 0.078),
        (0.124, 0.665, 0.095),
        (0.154, 0.201, 0.827),
    ),
    "310": (
        (0.611, 0.175, 0.120),
        (0.168, 0.563, 0.137),
        (0.221, 0.262, 0.744),
    ),
}

BUILTIN_DESIGNS = tuple(_LAMBDAS)

# collapse the six X cells into adjacent pairs {0,1},{2,3},{4,5}
X_COLLAPSE = Partition(cuts=(1.5, 3.5))


def builtin_dgp(design: str) -> DgpSpec:
    """One of the benchmark designs, keyed by smallest-singular-value tag.

    Accepted keys: '701', '501', '310' (also '0.701' etc.). Transcribed
    columns are renormalized and the instrument marginal derived.
    """
    key = design.replace("0.", "").strip()
    if key not in _LAMBDAS:
        raise KeyError(f"unknown design {design!r}; choose from {sorted(_LAMBDAS)}")
    return resolve(DgpSpec(
        p_u=np.array(_P_U),
        gamma_x=np.array(_GAMMA_X),
        gamma_y0=np.array(_GAMMA_Y0),
        gamma_y1=np.array(_GAMMA_Y1),
        lam=np.array(_LAMBDAS[key]),
        p_d1=0.5,
        name=f"sigma_min_0.{key}",
    ))


def dgp_to_dict(dgp: DgpSpec) -> dict:
    out = {
        "schema": "dtemix-dgp-v1",
        "name": dgp.name,
        "p_u": dgp.p_u.tolist(),
        "gamma_x": dgp.gamma_x.tolist(),
        "gamma_y0": dgp.gamma_y0.tolist(),
        "gamma_y1": dgp.gamma_y1.tolist(),
        "lam": dgp.lam.tolist(),
        "p_d1": dgp.p_d1,
        "p_z": "derive" if dgp.p_z is None else dgp.p_z.tolist(),
    }
    return out


def dgp_from_dict(doc: dict) -> DgpSpec:
    if doc.get("schema") != "dtemix-dgp-v1":
        raise ValueError(f"not a dtemix DGP document (schema={doc.get('schema')!r})")
    p_z = doc.get("p_z", "derive")
    return DgpSpec(
        p_u=np.array(doc["p_u"]),
        gamma_x=np.array(doc["gamma_x"]),
        gamma_y0=np.array(doc["gamma_y0"]),
        gamma_y1=np.array(doc["gamma_y1"]),
        lam=np.array(doc["lam"]),
        p_d1=float(doc.get("p_d1", 0.5)),
        p_z=None if p_z == "derive" else np.array(p_z),
        name=doc.get("name", ""),
    )


def load_dgp(path_or_name) -> DgpSpec:
    """Load a DGP from a JSON file, a packaged file name, or a design tag."""
    name = str(path_or_name)
    key = name.replace("dgp_", "").replace(".json", "").replace("0.", "")
    if key in _LAMBDAS:
        return builtin_dgp(key)
    with open(path_or_name, encoding="utf-8") as fh:
        return dgp_from_dict(json.load(fh))


def packaged_dgp_path(design: str) -> str:
    """Filesystem path of a shipped DGP document (dgp_701.json etc.)."""
    key = design.replace("0.", "").replace("dgp_", "").replace(".json", "")
    ref = resources.files("dtemix").joinpath(f"data/dgp_{key}.json")
    return str(ref)


# ---------------------------------------------------------------------------
# Monte Carlo study harness
# ---------------------------------------------------------------------------


def default_x_collapse(m_x: int, k: int) -> Partition | None:
    """Equal-count grouping of X cell indices down to k groups (None if not needed)."""
    if m_x <= k:
        return None
    if m_x % k != 0:
        raise ValueError(f"cannot evenly collapse {m_x} X cells into {k}")
    width = m_x // k
    cuts = tuple(width * i - 0.5 for i in range(1, k))
    return Partition(cuts=cuts)


@dataclass(frozen=True)
class StudyRow:
    delta: float
    true_value: float
    bias: float
    rmse: float
    coverage: float


@dataclass(frozen=True)
class StudyReport:
    """Per-delta performance of the estimator plus the falsification rejection rate."""

    rows: tuple[StudyRow, ...]
    rejection_rate: float | None
    b: int
    n: int
    seed: int
    n_failed: int
    design: str = ""
    failure_messages: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for row in self.rows:
            if np.isfinite(row.rmse) and row.rmse < abs(row.bias) - 1e-12:
                raise ValueError("rmse cannot be smaller than |bias|")

    def to_csv(self) -> str:
        lines = ["delta,bias,rmse,coverage"]
        for row in self.rows:
            lines.append(f"{row.delta:g},{row.bias:.6f},{row.rmse:.6f},{row.coverage:.4f}")
        return "\n".join(lines) + "\n"

    def metadata(self) -> dict:
        return {
            "design": self.design,
            "replications": self.b,
            "n": self.n,
            "seed": self.seed,
            "n_failed": self.n_failed,
            "rejection_rate": self.rejection_rate,
            "true_values": {f"{r.delta:g}": r.true_value for r in self.rows},
            "failures": list(self.failure_messages),
        }


def _study_rep(dgp: DgpSpec, n: int, seed_pair, deltas, x_partition,
               nmf_config, split_config, run_falsification: bool):
    from . import dte, falsify
    from .core import build_h, collapse_x

    ds = sample(dgp, n, seed_pair)
    if x_partition is not None:
        ds = collapse_x(ds, x_partition)
    h0 = build_h(ds, 0)
    h1 = build_h(ds, 1)
    fit = nmf.align(nmf.fit(h0, h1, nmf_config, m_x=ds.m_x))
    targets = [dte.MarginalTarget(d) for d in deltas]
    ests = dte.estimate_many(ds, fit, targets)
    reject = None
    if run_falsification:
        reject = falsify.run_test(ds, nmf_config.k, split_config).reject()
    return ([e.theta for e in ests], [e.ci_lo for e in ests],
            [e.ci_hi for e in ests], reject)


def run_study(dgp: DgpSpec, b: int, n: int, deltas=(-2, -1, 0, 1, 2), seed: int = 0,
              *, nmf_config: "nmf.NmfConfig | None" = None,
              split_config: "nmf.NmfConfig | None" = None,
              x_partition: Partition | None | str = "auto",
              run_falsification: bool = True, n_jobs: int = 1,
              population: bool = False) -> StudyReport:
    """Monte Carlo study: bias, rMSE, CI coverage, and falsification type-I rate.

    Replication r draws its sample from a stream seeded by ``(seed, r)``, so
    results do not depend on execution order or the number of workers.
    Replication-level failures are recorded and excluded, never hidden.

    With ``population=True`` the sampling step is skipped: the estimator runs
    once on the exact cell probabilities (bias should vanish to numerical
    precision; rmse equals |bias| and coverage is undefined).
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    dgp = resolve(dgp)
    nmf_config = nmf_config or nmf.NmfConfig(k=dgp.k, restarts=6, tol_objective=1e-9,
                                             max_outer_iter=200)
    split_config = split_config or nmf_config
    if x_partition == "auto":
        x_partition = default_x_collapse(dgp.m_x, dgp.k)
    deltas = tuple(float(d) for d in deltas)
    truth = {d: true_dte(dgp, d) for d in deltas}

    if population:
        from . import dte

        pi = exact_cells(dgp, x_partition)
        cells = dte.CellTable.from_probs(pi)
        h0 = exact_h(dgp, 0, x_partition)
        h1 = exact_h(dgp, 1, x_partition)
        pop_cfg = nmf.NmfConfig(k=dgp.k, restarts=max(2, nmf_config.restarts // 3),
                                tol_objective=1e-14, max_outer_iter=5000)
        fit = nmf.align(nmf.fit(h0, h1, pop_cfg, m_x=pi.shape[2]))
        ests = dte.estimate_many(cells, fit, [dte.MarginalTarget(d) for d in deltas])
        rows = tuple(
            StudyRow(delta=d, true_value=truth[d], bias=e.theta - truth[d],
                     rmse=abs(e.theta - truth[d]), coverage=float("nan"))
            for d, e in zip(deltas, ests)
        )
        return StudyReport(rows=rows, rejection_rate=None, b=1, n=0, seed=seed,
                           n_failed=0, design=dgp.name)

    def one(r: int):
        try:
            return _study_rep(dgp, n, (seed, r), deltas, x_partition,
                              nmf_config, split_config, run_falsification)
        except Exception as exc:  # noqa: BLE001 - failures are reported, not raised
            return f"rep {r}: {type(exc).__name__}: {exc}"

    if n_jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(one)(r) for r in range(b))
    else:
        results = [one(r) for r in range(b)]

    failures = [r for r in results if isinstance(r, str)]
    good = [r for r in results if not isinstance(r, str)]
    if not good:
        raise RuntimeError(f"all {b} replications failed; first: {failures[0]}")
    thetas = np.array([g[0] for g in good])            # [reps, deltas]
    ci_lo = np.array([g[1] for g in good])
    ci_hi = np.array([g[2] for g in good])
    rows = []
    for i, d in enumerate(deltas):
        errs = thetas[:, i] - truth[d]
        rows.append(StudyRow(
            delta=d, true_value=truth[d], bias=float(errs.mean()),
            rmse=float(np.sqrt(np.mean(errs ** 2))),
            coverage=float(np.mean((ci_lo[:, i] <= truth[d]) & (truth[d] <= ci_hi[:, i]))),
        ))
    rejection = None
    if run_falsification:
        rejection = float(np.mean([g[3] for g in good]))
    return StudyReport(rows=tuple(rows), rejection_rate=rejection, b=b, n=n,
                       seed=seed, n_failed=len(failures), design=dgp.name,
                       failure_messages=tuple(failures[:10]))
