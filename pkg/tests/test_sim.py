import json

import numpy as np
import pytest

from dtemix import sim
from dtemix.core import Partition
from dtemix.sim import (
    DgpSpec,
    StudyReport,
    StudyRow,
    builtin_dgp,
    default_x_collapse,
    dgp_from_dict,
    dgp_to_dict,
    exact_cells,
    exact_h,
    load_dgp,
    resolve,
    run_study,
    sample,
    true_dte,
    true_joint,
)


def test_builtin_designs_order_by_informativeness():
    smins = [np.linalg.svd(builtin_dgp(k).lam, compute_uv=False)[-1]
             for k in ("701", "501", "310")]
    assert smins[0] > smins[1] > smins[2]
    # the first design's published label matches its matrix
    assert smins[0] == pytest.approx(0.701, abs=0.002)


def test_builtin_dgp_normalization(dgp701):
    for mat in (dgp701.gamma_x, dgp701.gamma_y0, dgp701.gamma_y1, dgp701.lam):
        assert np.allclose(mat.sum(axis=0), 1.0, atol=1e-12)
    assert dgp701.p_u.sum() == pytest.approx(1.0)
    assert np.allclose(dgp701.p_u, [0.286, 0.286, 0.438], atol=0.006)


def test_unknown_design_rejected():
    with pytest.raises(KeyError):
        builtin_dgp("999")


def test_resolve_derives_consistent_instrument_marginal(dgp701):
    assert dgp701.p_z is not None
    assert dgp701.p_z.min() > 0
    assert dgp701.p_z.sum() == pytest.approx(1.0)
    assert np.allclose(dgp701.lam @ dgp701.p_z, dgp701.p_u, atol=1e-12)


def test_resolve_rejects_unattainable_marginal():
    lam = np.array([[0.9, 0.1], [0.1, 0.9]])
    spec = DgpSpec(p_u=np.array([0.99, 0.01]), gamma_x=np.eye(2),
                   gamma_y0=np.eye(2), gamma_y1=np.eye(2), lam=lam)
    with pytest.raises(ValueError, match="p_z"):
        resolve(spec)


def test_exact_cells_are_probabilities(dgp701):
    pi = exact_cells(dgp701)
    assert pi.shape == (3, 2, 6, 3)
    assert pi.sum() == pytest.approx(1.0)
    collapsed = exact_cells(dgp701, sim.X_COLLAPSE)
    assert collapsed.shape == (3, 2, 3, 3)
    assert np.allclose(collapsed.sum(axis=2), pi.sum(axis=2))


def test_exact_h_is_factor_product(dgp701):
    h = exact_h(dgp701, 1)
    gamma = (dgp701.gamma_x[:, None, :] * dgp701.gamma_y1[None, :, :]).reshape(18, 3)
    assert np.allclose(h, gamma @ dgp701.lam, atol=1e-14)


def test_sample_deterministic(dgp701):
    a = sample(dgp701, 500, (7, 3))
    b = sample(dgp701, 500, (7, 3))
    assert np.array_equal(a.counts, b.counts)
    c = sample(dgp701, 500, (7, 4))
    assert not np.array_equal(a.counts, c.counts)


def test_single_class_makes_proxies_independent():
    k1 = DgpSpec(p_u=np.array([1.0]), gamma_x=np.array([[0.3], [0.7]]),
                 gamma_y0=np.array([[0.4], [0.6]]), gamma_y1=np.array([[0.5], [0.5]]),
                 lam=np.array([[1.0]]), p_z=np.array([1.0]))
    ds = sample(k1, 40_000, 5)
    p_xy = ds.counts.sum(axis=(1, 3)) / ds.n          # [y, x]
    p_y = p_xy.sum(axis=1)
    p_x = p_xy.sum(axis=0)
    assert np.abs(p_xy - np.outer(p_y, p_x)).max() < 0.01


def test_true_dte_support_ends(dgp701):
    assert true_dte(dgp701, 2) == pytest.approx(1.0)
    assert true_dte(dgp701, 2.5) == pytest.approx(1.0)
    assert true_dte(dgp701, -2.01) == pytest.approx(0.0)


def test_true_dte_matches_enumeration(dgp701):
    for delta in (-2, -1, 0, 1):
        total = 0.0
        for k in range(3):
            for y0 in range(3):
                for y1 in range(3):
                    if y1 - y0 <= delta:
                        total += (dgp701.p_u[k] * dgp701.gamma_y0[y0, k]
                                  * dgp701.gamma_y1[y1, k])
        assert true_dte(dgp701, delta) == pytest.approx(total, abs=1e-14)


def test_true_joint_matches_enumeration(dgp701):
    for a in range(3):
        for b in range(3):
            total = 0.0
            for k in range(3):
                c0 = dgp701.gamma_y0[: a + 1, k].sum()
                c1 = dgp701.gamma_y1[: b + 1, k].sum()
                total += dgp701.p_u[k] * c0 * c1
            assert true_joint(dgp701, a, b) == pytest.approx(total, abs=1e-14)


def test_default_x_collapse():
    part = default_x_collapse(6, 3)
    assert part.cuts == (1.5, 3.5)
    assert default_x_collapse(3, 3) is None
    with pytest.raises(ValueError):
        default_x_collapse(7, 3)


def test_dgp_json_round_trip(dgp701, tmp_path):
    doc = dgp_to_dict(dgp701)
    back = dgp_from_dict(doc)
    assert np.allclose(back.lam, dgp701.lam)
    assert np.allclose(back.p_z, dgp701.p_z)
    path = tmp_path / "dgp.json"
    path.write_text(json.dumps(doc))
    loaded = load_dgp(path)
    assert np.allclose(loaded.gamma_x, dgp701.gamma_x)
    with pytest.raises(ValueError, match="schema"):
        dgp_from_dict({"schema": "other"})


def test_packaged_dgps_load():
    for key in ("701", "501", "310"):
        path = sim.packaged_dgp_path(key)
        dgp = load_dgp(path)
        assert dgp.k == 3
        assert np.allclose(dgp.lam, builtin_dgp(key).lam)


def test_population_study_has_zero_bias(dgp701):
    report = run_study(dgp701, b=1, n=0, population=True)
    for row in report.rows:
        assert abs(row.bias) <= 1e-10
        assert row.rmse == abs(row.bias)


def test_study_report_identities_and_csv(dgp701):
    report = run_study(dgp701, b=4, n=600, deltas=(0,), seed=9,
                       run_falsification=False)
    assert report.n_failed == 0
    row = report.rows[0]
    assert row.rmse >= abs(row.bias)
    text = report.to_csv()
    assert text.splitlines()[0] == "delta,bias,rmse,coverage"
    assert len(text.splitlines()) == 2
    meta = report.metadata()
    assert meta["replications"] == 4 and meta["n"] == 600


def test_study_single_replication_coverage_binary(dgp701):
    report = run_study(dgp701, b=1, n=800, deltas=(0,), seed=3,
                       run_falsification=False)
    assert report.rows[0].coverage in (0.0, 1.0)


def test_study_deterministic_and_schedule_independent(dgp701):
    kw = dict(b=3, n=500, deltas=(0, 1), seed=11, run_falsification=False)
    a = run_study(dgp701, **kw)
    b = run_study(dgp701, **kw)
    assert a == b
    c = run_study(dgp701, n_jobs=2, **kw)
    assert c.rows == a.rows


def test_study_records_failures(dgp701):
    # n=15 often leaves an empty (d, z) cell; failures must be counted,
    # never silently dropped
    report = run_study(dgp701, b=12, n=15, deltas=(0,), seed=1,
                       run_falsification=False)
    assert report.n_failed + sum(1 for _ in range(12 - report.n_failed)) == 12
    if report.n_failed:
        assert report.failure_messages


def test_study_report_validation():
    with pytest.raises(ValueError, match="rmse"):
        StudyReport(rows=(StudyRow(0, 0.5, 0.3, 0.1, 0.9),), rejection_rate=None,
                    b=1, n=10, seed=0, n_failed=0)
