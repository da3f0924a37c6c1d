import hashlib
import json
import re

import numpy as np
import pytest

from dtemix import cli, core, dte, nmf, sim


def write_sample_csv(path, dgp, n=2500, seed=11):
    ds = sim.sample(dgp, n, seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("y,d,x,z\n")
        for i in range(ds.n):
            fh.write(f"{ds.y_cell[i] + 1},{ds.d[i]},{ds.x_cell[i] + 1},"
                     f"{ds.z_cell[i] + 1}\n")
    return ds


@pytest.fixture(scope="module")
def sample_csv(tmp_path_factory, dgp701):
    path = tmp_path_factory.mktemp("cli") / "sample.csv"
    write_sample_csv(path, dgp701)
    return str(path)


def test_estimate_round_trips_library_values(sample_csv, tmp_path):
    out = tmp_path / "est.json"
    code = cli.main(["estimate", "--input", sample_csv, "--k", "3",
                     "--delta-grid=-2:2:1", "--restarts", "6",
                     "--output", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "dtemix-estimate-v1"
    assert len(doc["marginal"]) == 5
    # rebuild in memory with the same settings and compare exactly
    y, d, x, z = core.load_csv(sample_csv)
    ds = core.discretize(y, d, x, z, core.build_partition(y, 3),
                         core.build_partition(x, 3), core.build_partition(z, 3))
    fit = nmf.align(nmf.fit(core.build_h(ds, 0), core.build_h(ds, 1),
                            nmf.NmfConfig(k=3, restarts=6, seed=0), m_x=3))
    ests = dte.estimate_many(ds, fit, [dte.MarginalTarget(v)
                                       for v in (-2, -1, 0, 1, 2)])
    for row, est in zip(doc["marginal"], ests):
        assert row["theta"] == est.theta
        assert row["se"] == est.se
        assert row["ci_lo"] == est.ci_lo
    assert "manifest" in doc and doc["manifest"]["tool_version"]


def test_estimate_is_deterministic_and_non_mutating(sample_csv, tmp_path):
    digest_before = hashlib.sha256(open(sample_csv, "rb").read()).hexdigest()
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    for out in (out1, out2):
        assert cli.main(["estimate", "--input", sample_csv, "--k", "3",
                         "--restarts", "4", "--seed", "5",
                         "--output", str(out)]) == 0
    d1 = json.loads(out1.read_text())
    d2 = json.loads(out2.read_text())
    d1["manifest"].pop("duration_seconds")
    d2["manifest"].pop("duration_seconds")
    d1["manifest"]["config"].pop("output")
    d2["manifest"]["config"].pop("output")
    assert d1 == d2
    assert hashlib.sha256(open(sample_csv, "rb").read()).hexdigest() == digest_before


def test_estimate_k1_matches_independence_coupling(dgp701, tmp_path):
    path = tmp_path / "k1.csv"
    ds = write_sample_csv(path, dgp701, n=4000, seed=23)
    out = tmp_path / "k1.json"
    assert cli.main(["estimate", "--input", str(path), "--k", "1", "--my", "3",
                     "--mx", "3", "--delta-grid=0:0:1",
                     "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    theta = doc["marginal"][0]["theta"]
    # with one latent class the estimand is the independent coupling of the
    # arm-specific empirical outcome distributions
    y1 = ds.y_cell[ds.d == 1]
    y0 = ds.y_cell[ds.d == 0]
    p1 = np.bincount(y1, minlength=3) / y1.size
    p0 = np.bincount(y0, minlength=3) / y0.size
    coupling = sum(p0[a] * p1[b] for a in range(3) for b in range(3) if b - a <= 0)
    assert theta == pytest.approx(coupling, abs=5e-3)


def test_estimate_bounds_columns_match_library(sample_csv, tmp_path):
    out = tmp_path / "b.json"
    assert cli.main(["estimate", "--input", sample_csv, "--k", "3",
                     "--restarts", "6", "--bounds", "--clamp",
                     "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    y, d, x, z = core.load_csv(sample_csv)
    ds = core.discretize(y, d, x, z, core.build_partition(y, 3),
                         core.build_partition(x, 3), core.build_partition(z, 3))
    fit = nmf.align(nmf.fit(core.build_h(ds, 0), core.build_h(ds, 1),
                            nmf.NmfConfig(k=3, restarts=6, seed=0), m_x=3))
    cells = dte.CellTable.from_dataset(ds)
    nuis = dte.build_nuisances(fit, cells)
    f0, f1 = dte.marginal_cdfs(cells, nuis)
    for row in doc["marginal"]:
        b = dte.makarov_bounds(f1, f0, row["delta"])
        assert row["lower"] == b.lower and row["upper"] == b.upper
        assert row["theta"] == row["theta_clamped"]


def test_estimate_joint_grid(sample_csv, tmp_path):
    out = tmp_path / "j.json"
    assert cli.main(["estimate", "--input", sample_csv, "--k", "3",
                     "--restarts", "4", "--joint-grid",
                     "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["joint"]) == 9
    corner = [r for r in doc["joint"] if r["y0_cell"] == 2 and r["y1_cell"] == 2][0]
    assert corner["theta"] == pytest.approx(1.0, abs=0.05)


def test_falsify_output_format(sample_csv, capsys):
    assert cli.main(["falsify", "--input", sample_csv, "--k", "3",
                     "--restarts", "4"]) == 0
    line = capsys.readouterr().out.strip()
    assert re.fullmatch(r"T=[0-9.eE+-]+ df=\d+ p=[0-9.eE+-]+", line)


def test_falsify_json_document(sample_csv, tmp_path):
    out = tmp_path / "f.json"
    assert cli.main(["falsify", "--input", sample_csv, "--k", "3",
                     "--restarts", "4", "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "dtemix-falsify-v1"
    assert len(doc["w"]) == 9
    assert 0.0 <= doc["p_value"] <= 1.0


def test_simulate_csv_deterministic(tmp_path):
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    args = ["simulate", "--dgp", "701", "--reps", "3", "--n", "500",
            "--seed", "4", "--workers", "1"]
    assert cli.main(args + ["--output", str(out1)]) == 0
    assert cli.main(args + ["--output", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().splitlines()
    assert lines[0] == "delta,bias,rmse,coverage"
    assert len(lines) == 6
    meta = json.loads((tmp_path / "s1.csv.meta.json").read_text())
    assert meta["replications"] == 3
    assert "manifest" in meta


def test_simulate_bad_dgp_exit_code(tmp_path, capsys):
    missing = tmp_path / "none.json"
    assert cli.main(["simulate", "--dgp", str(missing), "--reps", "1",
                     "--n", "100"]) == cli.EXIT_BAD_INPUT
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": "other"}')
    assert cli.main(["simulate", "--dgp", str(bad), "--reps", "1",
                     "--n", "100"]) == cli.EXIT_BAD_INPUT
    err = capsys.readouterr().err
    assert "dgp_schema" in err


def test_estimate_insufficient_support_exit_code(tmp_path, capsys):
    # all units untreated: the treated H matrix has no support anywhere
    path = tmp_path / "one_arm.csv"
    rng = np.random.default_rng(0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("y,d,x,z\n")
        for _ in range(200):
            fh.write(f"{rng.integers(1, 4)},0,{rng.integers(1, 4)},"
                     f"{rng.integers(1, 4)}\n")
    assert cli.main(["estimate", "--input", str(path), "--k", "3"]) \
        == cli.EXIT_ESTIMATION
    assert "no observations" in capsys.readouterr().err


def test_estimate_malformed_csv_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    assert cli.main(["estimate", "--input", str(path), "--k", "3"]) \
        == cli.EXIT_BAD_INPUT
    assert "header" in capsys.readouterr().err


def test_delta_grid_parsing():
    assert cli._parse_grid("-2:2:1") == [-2.0, -1.0, 0.0, 1.0, 2.0]
    assert cli._parse_grid("0:1:0.5") == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        cli._parse_grid("1:0:1")
    with pytest.raises(ValueError):
        cli._parse_grid("nonsense")
