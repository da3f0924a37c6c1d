"""Shape-constrained Bernstein-sieve MLE for continuous latent heterogeneity.

Five conditional densities are approximated on the unit square by tensor
products of Bernstein bases: both outcome laws and the X law given the latent
variable, and the latent law given (arm, instrument). Density shape is a set
of linear constraints on the coefficients: nonnegativity, per-column sum
(integrate-to-one), and a monotone conditional mean in the latent argument.
The likelihood integrates the latent variable by Gauss-Legendre quadrature,
which is exact because every integrand is a polynomial of known degree.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .qp import QpProblem, solve_qp

BLOCK_NAMES = ("y1", "y0", "x", "z1", "z0")


class SieveFitError(RuntimeError):
    pass


def bernstein_basis(p: int, t) -> NDArray[np.float64]:
    """Bernstein basis row(s) of degree p at points t in [0, 1].

    Returns shape ``(p + 1,)`` for scalar t, else ``(len(t), p + 1)``;
    rows sum to 1.
    """
    scalar = np.isscalar(t)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size and (t.min() < -1e-12 or t.max() > 1 + 1e-12):
        raise ValueError(f"basis argument outside [0, 1]: [{t.min()}, {t.max()}]")
    t = np.clip(t, 0.0, 1.0)
    j = np.arange(p + 1)
    binom = np.array([math.comb(p, jj) for jj in j], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = binom * t[:, None] ** j * (1 - t[:, None]) ** (p - j)
    return out[0] if scalar else out


def bernstein_cdf_basis(p: int, t) -> NDArray[np.float64]:
    """Antiderivatives of the basis: entry j is the integral of b_{j,p} from 0 to t."""
    scalar = np.isscalar(t)
    higher = bernstein_basis(p + 1, t)
    higher = np.atleast_2d(higher)
    # int_0^t b_{j,p} = (1/(p+1)) * sum_{l>j} b_{l,p+1}(t)
    tail = np.cumsum(higher[:, ::-1], axis=1)[:, ::-1]
    out = tail[:, 1:] / (p + 1)
    return out[0] if scalar else out


@dataclass(frozen=True)
class SieveSpec:
    """Degrees, quadrature size, and the affine maps sending raw data to [0, 1]."""

    p_y1: int
    p_y0: int
    p_x: int
    p_u: int
    p_z: int
    y_range: tuple[float, float]
    x_range: tuple[float, float]
    z_range: tuple[float, float]
    n_quad: int | None = None
    monotone_arms: tuple[str, ...] = ("y1", "y0")

    def __post_init__(self) -> None:
        for name in ("p_y1", "p_y0", "p_x", "p_u", "p_z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("y_range", "x_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be an increasing pair")
        bad = set(self.monotone_arms) - {"y1", "y0"}
        if bad:
            raise ValueError(f"monotone_arms must be among y1/y0, got {bad}")

    @classmethod
    def from_data(cls, y, x, z, degrees: int | tuple = 3, **kwargs) -> "SieveSpec":
        if isinstance(degrees, int):
            degrees = (degrees,) * 5
        p_y1, p_y0, p_x, p_u, p_z = degrees
        pad = lambda v: (float(np.min(v)), float(np.max(v)) + 1e-12)
        return cls(p_y1=p_y1, p_y0=p_y0, p_x=p_x, p_u=p_u, p_z=p_z,
                   y_range=pad(y), x_range=pad(x), z_range=pad(z), **kwargs)

    def quad_nodes(self) -> tuple[NDArray, NDArray]:
        """Gauss-Legendre rule on [0, 1], exact for the likelihood integrand."""
        q = self.n_quad or (3 * self.p_u) // 2 + 1
        nodes, weights = np.polynomial.legendre.leggauss(q)
        return (nodes + 1) / 2, weights / 2

    def normalize(self, which: str, values) -> NDArray[np.float64]:
        lo, hi = getattr(self, f"{which}_range")
        v = (np.asarray(values, dtype=float) - lo) / (hi - lo)
        if v.size and (v.min() < -1e-9 or v.max() > 1 + 1e-9):
            raise ValueError(f"{which} values fall outside the declared range")
        return np.clip(v, 0.0, 1.0)

    def block_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "y1": (self.p_y1 + 1, self.p_u + 1),
            "y0": (self.p_y0 + 1, self.p_u + 1),
            "x": (self.p_x + 1, self.p_u + 1),
            "z1": (self.p_u + 1, self.p_z + 1),
            "z0": (self.p_u + 1, self.p_z + 1),
        }


@dataclass(frozen=True)
class SieveTheta:
    """Coefficient blocks of the five fitted conditional densities."""

    y1: NDArray[np.float64]
    y0: NDArray[np.float64]
    x: NDArray[np.float64]
    z1: NDArray[np.float64]
    z0: NDArray[np.float64]
    loglik: float = float("nan")
    grad_norm: float = float("nan")
    constraint_residual: float = float("nan")
    converged: bool = True

    def block(self, name: str) -> NDArray[np.float64]:
        return getattr(self, name)

    def flat(self) -> NDArray[np.float64]:
        return np.concatenate([self.block(b).ravel() for b in BLOCK_NAMES])


def uniform_theta(spec: SieveSpec) -> SieveTheta:
    """The uniform model: every density identically 1 on the unit square."""
    shapes = spec.block_shapes()
    return SieveTheta(**{b: np.ones(shapes[b]) for b in BLOCK_NAMES})


def theta_from_flat(spec: SieveSpec, vec: NDArray) -> SieveTheta:
    shapes = spec.block_shapes()
    blocks = {}
    pos = 0
    for b in BLOCK_NAMES:
        size = shapes[b][0] * shapes[b][1]
        blocks[b] = vec[pos:pos + size].reshape(shapes[b]).copy()
        pos += size
    return SieveTheta(**blocks)


def mean_weights(p: int) -> NDArray[np.float64]:
    """Weights w_j = integral of t * b_{j,p}(t) dt = (j+1)/((p+1)(p+2))."""
    j = np.arange(p + 1, dtype=float)
    return (j + 1) / ((p + 1) * (p + 2))


@dataclass(frozen=True)
class BlockConstraints:
    a_eq: NDArray[np.float64]
    b_eq: NDArray[np.float64]
    a_in: NDArray[np.float64] | None
    b_in: NDArray[np.float64] | None

    def residual(self, block: NDArray) -> float:
        v = block.ravel()
        res = float(np.abs(self.a_eq @ v - self.b_eq).max(initial=0.0))
        if self.a_in is not None:
            res = max(res, float(np.maximum(self.a_in @ v - self.b_in, 0.0).max(initial=0.0)))
        res = max(res, float(np.maximum(-v, 0.0).max(initial=0.0)))
        return res


def assemble_constraints(spec: SieveSpec) -> dict[str, BlockConstraints]:
    """Linear shape constraints per coefficient block (row-major flattening).

    Each block is nonnegative with column sums fixed at (outcome degree + 1),
    which pins every conditional slice to integrate to one; outcome blocks
    named in ``monotone_arms`` additionally order the conditional means along
    the latent axis.
    """
    out = {}
    for name, (rows, cols) in spec.block_shapes().items():
        a_eq = np.zeros((cols, rows * cols))
        for c in range(cols):
            a_eq[c, c::cols] = 1.0
        b_eq = np.full(cols, float(rows))
        a_in = b_in = None
        if name in ("y1", "y0") and name in spec.monotone_arms and cols >= 2:
            w = mean_weights(rows - 1)
            a_in = np.zeros((cols - 1, rows * cols))
            for c in range(cols - 1):
                a_in[c, c::cols] = w
                a_in[c, c + 1::cols] = -w
            b_in = np.zeros(cols - 1)
        out[name] = BlockConstraints(a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in)
    return out


def _design_matrices(data, spec: SieveSpec):
    y, d, x, z = data
    d = np.asarray(d, dtype=int)
    ny = spec.normalize("y", y)
    nx = spec.normalize("x", x)
    nz = spec.normalize("z", z)
    nodes, weights = spec.quad_nodes()
    return {
        "d": d,
        "by1": bernstein_basis(spec.p_y1, ny),
        "by0": bernstein_basis(spec.p_y0, ny),
        "bx": bernstein_basis(spec.p_x, nx),
        "bz": bernstein_basis(spec.p_z, nz),
        "bu": bernstein_basis(spec.p_u, nodes),
        "nodes": nodes,
        "weights": weights,
    }


def _node_values(theta: SieveTheta, mats) -> tuple[NDArray, NDArray, NDArray]:
    """Per-observation, per-node values of the three density factors."""
    d = mats["d"]
    bu = mats["bu"]                                   # [q, p_u+1]
    fy = np.where(d[:, None] == 1,
                  mats["by1"] @ theta.y1 @ bu.T,
                  mats["by0"] @ theta.y0 @ bu.T)      # [n, q]
    fx = mats["bx"] @ theta.x @ bu.T                  # [n, q]
    fz1 = (bu @ theta.z1 @ mats["bz"].T).T            # [n, q]
    fz0 = (bu @ theta.z0 @ mats["bz"].T).T
    fz = np.where(d[:, None] == 1, fz1, fz0)
    return fy, fx, fz


def sieve_loglik(theta: SieveTheta, data, spec: SieveSpec) -> float:
    """Sample log likelihood with the latent variable integrated out by quadrature."""
    mats = _design_matrices(data, spec)
    fy, fx, fz = _node_values(theta, mats)
    integrals = (fy * fx * fz) @ mats["weights"]
    if np.any(integrals <= 0):
        idx = int(np.argmin(integrals))
        warnings.warn(f"non-positive likelihood contribution at observation {idx}",
                      RuntimeWarning)
        return float("-inf")
    return float(np.log(integrals).sum())


def sieve_score(theta: SieveTheta, data, spec: SieveSpec):
    """Log likelihood and its gradient for every coefficient block."""
    mats = _design_matrices(data, spec)
    fy, fx, fz = _node_values(theta, mats)
    w = mats["weights"]
    integrals = (fy * fx * fz) @ w
    if np.any(integrals <= 0):
        return float("-inf"), None
    inv = 1.0 / integrals
    d = mats["d"]
    bu = mats["bu"]
    t1 = d == 1
    t0 = ~t1

    def grad_outcome(mask, by):
        # d ll / d theta_y[j, k] = sum_i 1/I_i * sum_q w_q by[i,j] bu[q,k] fx fz
        core = (fx * fz) * (w[None, :] * inv[:, None])
        return np.einsum("ij,iq,qk->jk", by[mask], core[mask], bu,
                         optimize=True) if mask.any() else 0.0

    core_x = (fy * fz) * (w[None, :] * inv[:, None])
    grad_x = np.einsum("ij,iq,qk->jk", mats["bx"], core_x, bu, optimize=True)

    def grad_z(mask):
        core = (fy * fx) * (w[None, :] * inv[:, None])
        if not mask.any():
            return 0.0
        return np.einsum("qj,iq,ik->jk", bu, core[mask], mats["bz"][mask],
                         optimize=True)

    grads = {
        "y1": grad_outcome(t1, mats["by1"]),
        "y0": grad_outcome(t0, mats["by0"]),
        "x": grad_x,
        "z1": grad_z(t1),
        "z0": grad_z(t0),
    }
    shapes = spec.block_shapes()
    for b in BLOCK_NAMES:
        if np.isscalar(grads[b]):
            grads[b] = np.zeros(shapes[b])
    return float(np.log(integrals).sum()), grads


@dataclass(frozen=True)
class SieveFitConfig:
    max_iter: int = 500
    tol: float = 1e-7
    restarts: int = 2
    seed: int = 0
    step_init: float = 0.5
    qp_tolerance: float = 1e-10


def _project_block(target_vec, cons: BlockConstraints, qp_tol, x0=None):
    n = target_vec.size
    prob = QpProblem(q=np.eye(n), c=-target_vec, a_eq=cons.a_eq, b_eq=cons.b_eq,
                     a_in=cons.a_in, b_in=cons.b_in, nonneg=True)
    return solve_qp(prob, tolerance=qp_tol, x0=x0).x


def fit_sieve(data, spec: SieveSpec, config: SieveFitConfig | None = None) -> SieveTheta:
    """Maximize the sieve likelihood by feasible projected-gradient ascent.

    Every iterate satisfies the shape constraints: steps are computed by
    projecting a gradient move back onto the constraint polytope (block by
    block; the constraints do not couple blocks) and accepted by backtracking
    line search on the exact likelihood.
    """
    config = config or SieveFitConfig()
    cons = assemble_constraints(spec)
    shapes = spec.block_shapes()
    rng = np.random.default_rng(config.seed)
    best = None
    for restart in range(config.restarts):
        theta = uniform_theta(spec)
        if restart > 0:
            blocks = {}
            for b in BLOCK_NAMES:
                noisy = theta.block(b) * (1 + 0.5 * rng.random(shapes[b]))
                blocks[b] = _project_block(noisy.ravel(), cons[b],
                                           config.qp_tolerance).reshape(shapes[b])
            theta = SieveTheta(**blocks)
        result = _ascend(theta, data, spec, cons, config)
        if best is None or result.loglik > best.loglik:
            best = result
    if best is None or not np.isfinite(best.loglik):
        raise SieveFitError("no restart produced a finite likelihood")
    return best


def _ascend(theta: SieveTheta, data, spec: SieveSpec, cons, config: SieveFitConfig):
    tau = config.step_init
    ll, grads = sieve_score(theta, data, spec)
    if grads is None:
        raise SieveFitError("infeasible start: likelihood is not positive")
    converged = False
    grad_norm = float("nan")
    for _ in range(config.max_iter):
        step = {}
        descent = 0.0
        sq_norm = 0.0
        for b in BLOCK_NAMES:
            cur = theta.block(b).ravel()
            moved = cur + tau * grads[b].ravel()
            proj = _project_block(moved, cons[b], config.qp_tolerance, x0=cur)
            delta = proj - cur
            step[b] = delta
            descent += float(grads[b].ravel() @ delta)
            sq_norm += float(delta @ delta)
        grad_norm = np.sqrt(sq_norm) / tau
        if grad_norm <= config.tol or descent <= config.tol * 1e-3:
            converged = True
            break
        alpha = 1.0
        accepted = False
        for _ in range(30):
            cand = SieveTheta(**{
                b: (theta.block(b).ravel() + alpha * step[b]).reshape(theta.block(b).shape)
                for b in BLOCK_NAMES
            })
            ll_new, grads_new = sieve_score(cand, data, spec)
            if grads_new is not None and ll_new >= ll + 1e-4 * alpha * descent:
                theta, ll, grads = cand, ll_new, grads_new
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            tau *= 0.25
            if tau < 1e-12:
                break
            continue
        tau = min(tau * 1.25, 1e3) if alpha == 1.0 else tau * 0.7
    residual = max(cons[b].residual(theta.block(b)) for b in BLOCK_NAMES)
    return replace(theta, loglik=ll, grad_norm=grad_norm,
                   constraint_residual=residual, converged=converged)


def _mixture_weight_at_nodes(theta: SieveTheta, data, spec: SieveSpec) -> NDArray:
    """Average latent density over the sample, arm-matched, at the quadrature nodes."""
    mats = _design_matrices(data, spec)
    d = mats["d"]
    bu = mats["bu"]
    fz1 = (bu @ theta.z1 @ mats["bz"].T).T
    fz0 = (bu @ theta.z0 @ mats["bz"].T).T
    fz = np.where(d[:, None] == 1, fz1, fz0)
    return fz.mean(axis=0)


def sieve_dte(theta: SieveTheta, data, spec: SieveSpec, *, delta: float | None = None,
              joint: tuple[float, float] | None = None) -> float:
    """Distributional functionals of the fitted sieve.

    Exactly one of ``delta`` (threshold for the effect CDF, raw outcome units)
    or ``joint=(y0_value, y1_value)`` (joint CDF evaluation point, raw units)
    must be given. The latent variable is averaged over the sample through the
    arm-specific conditional latent densities.
    """
    if (delta is None) == (joint is None):
        raise ValueError("pass exactly one of delta or joint")
    nodes, weights = spec.quad_nodes()
    bu = bernstein_basis(spec.p_u, nodes)
    rho = _mixture_weight_at_nodes(theta, data, spec)

    lo, hi = spec.y_range
    if joint is not None:
        y0_val, y1_val = joint
        t0 = float(np.clip((y0_val - lo) / (hi - lo), 0.0, 1.0))
        t1 = float(np.clip((y1_val - lo) / (hi - lo), 0.0, 1.0))
        c0 = bernstein_cdf_basis(spec.p_y0, t0) @ theta.y0 @ bu.T   # [q]
        c1 = bernstein_cdf_basis(spec.p_y1, t1) @ theta.y1 @ bu.T
        return float((c1 * c0) @ (weights * rho))

    delta_n = delta / (hi - lo)
    # inner integral over y in [0,1] of F1(y + delta_n | u) f0(y | u) dy,
    # split where y + delta_n crosses 0 and 1 (F1 is 0 below, 1 above)
    a = min(max(-delta_n, 0.0), 1.0)
    b = min(max(1.0 - delta_n, 0.0), 1.0)
    q_y = (spec.p_y1 + 1 + spec.p_y0) // 2 + 1
    gl_nodes, gl_weights = np.polynomial.legendre.leggauss(q_y)
    total = np.zeros(nodes.size)
    if b > a:
        yy = a + (gl_nodes + 1) / 2 * (b - a)
        ww = gl_weights / 2 * (b - a)
        f0 = bernstein_basis(spec.p_y0, yy) @ theta.y0 @ bu.T       # [qy, q]
        f1c = bernstein_cdf_basis(spec.p_y1, np.clip(yy + delta_n, 0, 1)) @ theta.y1 @ bu.T
        total += (f0 * f1c).T @ ww
    if b < 1.0:
        # F1 = 1 on (b, 1]: remaining mass of f0
        yy = b + (gl_nodes + 1) / 2 * (1.0 - b)
        ww = gl_weights / 2 * (1.0 - b)
        f0 = bernstein_basis(spec.p_y0, yy) @ theta.y0 @ bu.T
        total += f0.T @ ww
    return float(total @ (weights * rho))


def theta_to_dict(theta: SieveTheta, spec: SieveSpec) -> dict:
    return {
        "schema": "dtemix-sieve-v1",
        "degrees": {"p_y1": spec.p_y1, "p_y0": spec.p_y0, "p_x": spec.p_x,
                    "p_u": spec.p_u, "p_z": spec.p_z},
        "ranges": {"y": list(spec.y_range), "x": list(spec.x_range),
                   "z": list(spec.z_range)},
        "monotone_arms": list(spec.monotone_arms),
        "blocks": {b: theta.block(b).tolist() for b in BLOCK_NAMES},
        "loglik": theta.loglik,
    }


def theta_from_dict(doc: dict) -> tuple[SieveTheta, SieveSpec]:
    if doc.get("schema") != "dtemix-sieve-v1":
        raise ValueError(f"not a dtemix sieve document (schema={doc.get('schema')!r})")
    deg = doc["degrees"]
    spec = SieveSpec(
        p_y1=deg["p_y1"], p_y0=deg["p_y0"], p_x=deg["p_x"], p_u=deg["p_u"],
        p_z=deg["p_z"], y_range=tuple(doc["ranges"]["y"]),
        x_range=tuple(doc["ranges"]["x"]), z_range=tuple(doc["ranges"]["z"]),
        monotone_arms=tuple(doc.get("monotone_arms", ("y1", "y0"))),
    )
    blocks = {b: np.asarray(doc["blocks"][b], dtype=float) for b in BLOCK_NAMES}
    return SieveTheta(**blocks, loglik=float(doc.get("loglik", "nan"))), spec


def save_theta(theta: SieveTheta, spec: SieveSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(theta_to_dict(theta, spec), fh, indent=1)


def load_theta(path) -> tuple[SieveTheta, SieveSpec]:
    with open(path, encoding="utf-8") as fh:
        return theta_from_dict(json.load(fh))
