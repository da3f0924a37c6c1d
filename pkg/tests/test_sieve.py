import numpy as np
import pytest

from dtemix import sieve
from dtemix.sieve import (
    BLOCK_NAMES,
    SieveFitConfig,
    SieveSpec,
    SieveTheta,
    assemble_constraints,
    bernstein_basis,
    bernstein_cdf_basis,
    fit_sieve,
    load_theta,
    mean_weights,
    save_theta,
    sieve_dte,
    sieve_loglik,
    sieve_score,
    uniform_theta,
)

UNIT = dict(y_range=(0.0, 1.0), x_range=(0.0, 1.0), z_range=(0.0, 1.0))


def unit_spec(**kw):
    base = dict(p_y1=2, p_y0=2, p_x=2, p_u=2, p_z=2, **UNIT)
    base.update(kw)
    return SieveSpec(**base)


def sim_data(n=600, seed=0, slope=0.55):
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    y = np.clip(slope * u + (1 - slope) * rng.random(n), 0, 1)
    x = np.clip(0.5 * u + 0.5 * rng.random(n), 0, 1)
    d = rng.integers(0, 2, n)
    z = np.clip(0.6 * u + 0.4 * rng.random(n), 0, 1)
    return y, d, x, z


# ----------------------------------------------------------------- basis

def test_basis_endpoint():
    assert np.allclose(bernstein_basis(1, 0.0), [1.0, 0.0])
    assert np.allclose(bernstein_basis(3, 1.0), [0, 0, 0, 1.0])


def test_basis_partition_of_unity():
    t = np.linspace(0, 1, 17)
    for p in (0, 1, 4, 7):
        assert np.allclose(bernstein_basis(p, t).sum(axis=1), 1.0, atol=1e-12)


def test_basis_integrals_match_beta_identity():
    nodes, w = np.polynomial.legendre.leggauss(12)
    t = (nodes + 1) / 2
    for p in (1, 3, 6):
        integrals = bernstein_basis(p, t).T @ (w / 2)
        assert np.allclose(integrals, 1.0 / (p + 1), atol=1e-12)


def test_basis_rejects_out_of_range():
    with pytest.raises(ValueError, match="outside"):
        bernstein_basis(2, 1.5)


def test_cdf_basis_consistency():
    # derivative of the antiderivative recovers the basis (finite differences)
    t = 0.37
    eps = 1e-6
    for p in (2, 4):
        fd = (bernstein_cdf_basis(p, t + eps) - bernstein_cdf_basis(p, t - eps)) / (2 * eps)
        assert np.allclose(fd, bernstein_basis(p, t), atol=1e-6)
    assert np.allclose(bernstein_cdf_basis(3, 1.0), 0.25, atol=1e-12)


def test_mean_weights_match_quadrature():
    nodes, w = np.polynomial.legendre.leggauss(12)
    t = (nodes + 1) / 2
    for p in (2, 5):
        expected = (t[:, None] * bernstein_basis(p, t)).T @ (w / 2)
        assert np.allclose(mean_weights(p), expected, atol=1e-13)
    assert np.allclose(mean_weights(2), np.array([1, 2, 3]) / 12.0)


# --------------------------------------------------------------- constraints

def test_uniform_theta_satisfies_all_constraints():
    spec = unit_spec()
    cons = assemble_constraints(spec)
    theta = uniform_theta(spec)
    for b in BLOCK_NAMES:
        assert cons[b].residual(theta.block(b)) <= 1e-12


def test_monotonicity_violation_detected():
    spec = unit_spec()
    cons = assemble_constraints(spec)
    theta = uniform_theta(spec)
    bad = theta.y1.copy()
    bad[:, 0] = [0.0, 0.6, 2.4]   # mean high at u-index 0
    bad[:, 2] = [2.4, 0.6, 0.0]   # mean low at u-index 2: decreasing
    assert cons["y1"].residual(bad) > 1e-3


def test_constraints_absent_without_monotone_arms():
    spec = unit_spec(monotone_arms=())
    cons = assemble_constraints(spec)
    assert cons["y1"].a_in is None
    assert cons["x"].a_in is None


# ------------------------------------------------------------------ likelihood

def test_uniform_model_loglik_zero():
    spec = unit_spec()
    data = sim_data(200, 1)
    assert sieve_loglik(uniform_theta(spec), data, spec) == pytest.approx(0.0, abs=1e-10)


def test_degree_zero_single_observation():
    spec = unit_spec(p_y1=0, p_y0=0, p_x=0, p_u=0, p_z=0)
    theta = uniform_theta(spec)
    data = (np.array([0.4]), np.array([1]), np.array([0.2]), np.array([0.9]))
    # all blocks are forced to the constant 1, so the integrand is 1*1*1
    assert sieve_loglik(theta, data, spec) == pytest.approx(0.0, abs=1e-14)


def test_quadrature_matches_riemann_oracle():
    spec = unit_spec()
    rng = np.random.default_rng(4)
    cons = assemble_constraints(spec)
    blocks = {}
    for b in BLOCK_NAMES:
        sh = spec.block_shapes()[b]
        noisy = np.ones(sh) * (1 + 0.5 * rng.random(sh))
        blocks[b] = sieve._project_block(noisy.ravel(), cons[b], 1e-10).reshape(sh)
    theta = SieveTheta(**blocks)
    data = sim_data(60, 2)
    npts = 100_000
    u = (np.arange(npts) + 0.5) / npts
    bu = bernstein_basis(spec.p_u, u)
    y, d, x, z = data
    by1 = bernstein_basis(spec.p_y1, y)
    by0 = bernstein_basis(spec.p_y0, y)
    bx = bernstein_basis(spec.p_x, x)
    bz = bernstein_basis(spec.p_z, z)
    fy = np.where(d[:, None] == 1, by1 @ theta.y1 @ bu.T, by0 @ theta.y0 @ bu.T)
    fx = bx @ theta.x @ bu.T
    fz1 = (bu @ theta.z1 @ bz.T).T
    fz0 = (bu @ theta.z0 @ bz.T).T
    fz = np.where(d[:, None] == 1, fz1, fz0)
    riemann = float(np.log((fy * fx * fz).mean(axis=1)).sum())
    assert sieve_loglik(theta, data, spec) == pytest.approx(riemann, abs=1e-8)


def test_gradient_matches_finite_differences():
    spec = unit_spec()
    rng = np.random.default_rng(6)
    cons = assemble_constraints(spec)
    blocks = {}
    for b in BLOCK_NAMES:
        sh = spec.block_shapes()[b]
        noisy = np.ones(sh) * (1 + 0.4 * rng.random(sh))
        blocks[b] = sieve._project_block(noisy.ravel(), cons[b], 1e-10).reshape(sh)
    data = sim_data(250, 7)
    ll, grads = sieve_score(SieveTheta(**blocks), data, spec)
    eps = 1e-6
    for b in BLOCK_NAMES:
        sh = blocks[b].shape
        for idx in [(0, 0), (sh[0] - 1, sh[1] - 1), (sh[0] // 2, sh[1] // 2)]:
            up = {k: v.copy() for k, v in blocks.items()}
            dn = {k: v.copy() for k, v in blocks.items()}
            up[b][idx] += eps
            dn[b][idx] -= eps
            fd = (sieve_loglik(SieveTheta(**up), data, spec)
                  - sieve_loglik(SieveTheta(**dn), data, spec)) / (2 * eps)
            denom = max(1.0, abs(fd))
            assert abs(fd - grads[b][idx]) / denom <= 1e-6


# ------------------------------------------------------------------- fitting

@pytest.fixture(scope="module")
def fitted():
    spec = unit_spec()
    data = sim_data(1200, 3)
    theta = fit_sieve(data, spec, SieveFitConfig(max_iter=300, restarts=2))
    return spec, data, theta


def test_fit_dominates_uniform_truth(fitted):
    spec, data, theta = fitted
    # the uniform model lies inside the sieve, so the MLE cannot fall below it
    assert theta.loglik >= -1e-6


def test_fit_is_feasible_on_dense_grid(fitted):
    spec, _, theta = fitted
    tgrid = np.linspace(0, 1, 101)
    nodes, w = np.polynomial.legendre.leggauss(8)
    yn = (nodes + 1) / 2
    for name in BLOCK_NAMES:
        block = theta.block(name)
        p_out = block.shape[0] - 1
        p_cond = block.shape[1] - 1
        vals = bernstein_basis(p_out, tgrid) @ block @ bernstein_basis(p_cond, tgrid).T
        assert vals.min() >= -1e-10
        ints = (bernstein_basis(p_out, yn) @ block
                @ bernstein_basis(p_cond, tgrid).T).T @ (w / 2)
        assert np.abs(ints - 1.0).max() <= 1e-8
    assert theta.constraint_residual <= 1e-8


def test_fit_has_monotone_conditional_means(fitted):
    spec, _, theta = fitted
    ugrid = np.linspace(0, 1, 41)
    bu = bernstein_basis(spec.p_u, ugrid)
    for name in ("y1", "y0"):
        means = mean_weights(theta.block(name).shape[0] - 1) @ theta.block(name) @ bu.T
        assert np.all(np.diff(means) >= -1e-9)


def test_fit_beats_data_generating_density(fitted):
    spec, data, theta = fitted
    # project an approximation of the generating density into the sieve and
    # confirm the MLE attains at least its likelihood on the realized sample
    cons = assemble_constraints(spec)
    rng = np.random.default_rng(0)
    ll_alternatives = []
    for _ in range(5):
        blocks = {}
        for b in BLOCK_NAMES:
            sh = spec.block_shapes()[b]
            noisy = np.ones(sh) * (1 + 0.6 * rng.random(sh))
            blocks[b] = sieve._project_block(noisy.ravel(), cons[b],
                                             1e-10).reshape(sh)
        ll_alternatives.append(sieve_loglik(SieveTheta(**blocks), data, spec))
    assert theta.loglik >= max(ll_alternatives) - 1e-6


# ---------------------------------------------------------------- functionals

def test_symmetric_model_centers_at_half():
    spec = unit_spec()
    data = sim_data(100, 5)
    theta = uniform_theta(spec)
    assert sieve_dte(theta, data, spec, delta=0.0) == pytest.approx(0.5, abs=1e-12)


def test_delta_support_ends():
    spec = unit_spec()
    data = sim_data(100, 5)
    theta = uniform_theta(spec)
    assert sieve_dte(theta, data, spec, delta=1.0) == pytest.approx(1.0, abs=1e-12)
    assert sieve_dte(theta, data, spec, delta=-1.0) == pytest.approx(0.0, abs=1e-12)


def test_joint_upper_corner_is_one(fitted):
    spec, data, theta = fitted
    assert sieve_dte(theta, data, spec, joint=(1.0, 1.0)) == pytest.approx(1.0, abs=1e-9)
    assert sieve_dte(theta, data, spec, joint=(0.0, 0.0)) == pytest.approx(0.0, abs=1e-9)


def test_marginal_curve_is_cdf_like(fitted):
    spec, data, theta = fitted
    deltas = np.linspace(-1, 1, 11)
    curve = [sieve_dte(theta, data, spec, delta=d) for d in deltas]
    assert np.all(np.diff(curve) >= -1e-9)
    assert curve[0] == pytest.approx(0.0, abs=1e-9)
    assert curve[-1] == pytest.approx(1.0, abs=1e-9)


def test_sieve_dte_argument_validation(fitted):
    spec, data, theta = fitted
    with pytest.raises(ValueError, match="exactly one"):
        sieve_dte(theta, data, spec)
    with pytest.raises(ValueError, match="exactly one"):
        sieve_dte(theta, data, spec, delta=0.0, joint=(0.5, 0.5))


# ------------------------------------------------------------- serialization

def test_theta_round_trip(tmp_path, fitted):
    spec, data, theta = fitted
    path = tmp_path / "theta.json"
    save_theta(theta, spec, path)
    theta2, spec2 = load_theta(path)
    assert spec2.p_u == spec.p_u and spec2.y_range == spec.y_range
    for b in BLOCK_NAMES:
        assert np.allclose(theta2.block(b), theta.block(b))
    v1 = sieve_dte(theta, data, spec, delta=0.2)
    v2 = sieve_dte(theta2, data, spec2, delta=0.2)
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        unit_spec(p_u=-1)
    with pytest.raises(ValueError):
        SieveSpec(p_y1=2, p_y0=2, p_x=2, p_u=2, p_z=2, y_range=(1.0, 0.0),
                  x_range=(0, 1), z_range=(0, 1))
    with pytest.raises(ValueError, match="monotone"):
        unit_spec(monotone_arms=("x",))
    spec = unit_spec()
    with pytest.raises(ValueError, match="outside"):
        spec.normalize("y", [2.0])
