"""Constrained nonnegative matrix factorization of the H matrices.

Minimizes ``||H0 - G0*L0||_F^2 + ||H1 - G1*L1||_F^2`` over column-stochastic
factors, where each ``G_d`` is assembled column-by-column as the outer product
of an outcome block and a shared X block (the conditional-independence
structure). The alternating scheme cycles three convex QP substeps -- mixture
weights, X block, outcome blocks -- so the objective never increases. Multiple
restarts guard against local minima; fitted columns are aligned by the
latent-rank convention (ascending conditional mean of the untreated outcome).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .core import CondProbMatrix, as_stochastic
from .qp import QpProblem, solve_qp


@dataclass(frozen=True)
class NmfConfig:
    k: int
    restarts: int = 20
    tol_objective: float = 1e-10
    max_outer_iter: int = 500
    seed: int = 0
    init_mode: str = "columns"  # or "eigen" for the spectral initial guess
    qp_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tol_objective <= 0:
            raise ValueError("tol_objective must be positive")
        if self.init_mode not in ("columns", "eigen"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


@dataclass(frozen=True)
class MixtureFit:
    """Fitted factors for both arms plus fit diagnostics."""

    gamma_x: CondProbMatrix
    gamma_y0: CondProbMatrix
    gamma_y1: CondProbMatrix
    lambda0: CondProbMatrix
    lambda1: CondProbMatrix
    objective: float
    restarts_used: int
    converged: bool


@dataclass(frozen=True)
class SingleArmFit:
    """Factors fitted from one treatment arm alone (used by the falsification test)."""

    d: int
    gamma_x: CondProbMatrix
    gamma_y: CondProbMatrix
    lam: CondProbMatrix
    objective: float
    restarts_used: int
    converged: bool


def _values(m) -> NDArray[np.float64]:
    return m.values if isinstance(m, CondProbMatrix) else np.asarray(m, dtype=float)


def assemble_gamma(gamma_x, gamma_yd) -> CondProbMatrix:
    """Per-column outer product of the X block and an outcome block.

    Column k of the output is the x-major flattening of
    ``gamma_yd[:, k] (outer) gamma_x[:, k]``; each column sums to 1.
    """
    gx = _values(gamma_x)
    gy = _values(gamma_yd)
    if gx.shape[1] != gy.shape[1]:
        raise ValueError(f"column counts differ: {gx.shape[1]} vs {gy.shape[1]}")
    return CondProbMatrix(_assemble(gx, gy))


def _assemble(gx: NDArray, gy: NDArray) -> NDArray:
    m_x, k = gx.shape
    m_y = gy.shape[0]
    # out[x*m_y + y, k] = gy[y, k] * gx[x, k]
    return (gx[:, None, :] * gy[None, :, :]).reshape(m_x * m_y, k)


def _split_column(col: NDArray, m_x: int, m_y: int) -> tuple[NDArray, NDArray]:
    grid = col.reshape(m_x, m_y)
    return grid.sum(axis=1), grid.sum(axis=0)


def _eigen_guess(h: NDArray, k: int) -> NDArray:
    u, _, _ = np.linalg.svd(h, full_matrices=False)
    guess = u[:, :k].copy()
    signs = np.where(guess.sum(axis=0) < 0, -1.0, 1.0)
    guess = np.clip(guess * signs, 0.0, None)
    sums = guess.sum(axis=0)
    sums[sums == 0] = 1.0
    return guess / sums


def initialize(h0, h1, config: NmfConfig, restart: int) -> tuple[CondProbMatrix, CondProbMatrix]:
    """Initial guesses for (G0, G1): H columns, spectral, or random convex combinations.

    Restart 0 copies the first k columns of each H (or the clipped top-k
    spectral directions in ``eigen`` mode); later restarts mix H columns with
    simplex weights drawn from a stream seeded by (seed, restart), so guesses
    are reproducible and independent of execution order.
    """
    if restart >= config.restarts:
        raise ValueError(f"restart index {restart} out of range")
    h0v, h1v = _values(h0), _values(h1)
    k = config.k
    if restart == 0:
        if config.init_mode == "eigen":
            return CondProbMatrix(_eigen_guess(h0v, k)), CondProbMatrix(_eigen_guess(h1v, k))
        return CondProbMatrix(h0v[:, :k].copy()), CondProbMatrix(h1v[:, :k].copy())
    rng = np.random.default_rng((config.seed, restart))
    guesses = []
    for hv in (h0v, h1v):
        weights = rng.dirichlet(np.ones(hv.shape[1]), size=k).T  # [cols, k]
        guesses.append(CondProbMatrix(hv @ weights))
    return guesses[0], guesses[1]


def _colsum_eq(m: int, k: int) -> tuple[NDArray, NDArray]:
    # row-major vec of an (m, k) block: columns-sum-to-one constraints
    a = np.zeros((k, m * k))
    for j in range(k):
        a[j, j::k] = 1.0
    return a, np.ones(k)


class _Alternator:
    """Alternating minimizer over arms sharing one X block."""

    def __init__(self, hs: list[NDArray], k: int, qp_tol: float):
        self.hs = hs
        self.k = k
        self.qp_tol = qp_tol
        self.m, n_cols = hs[0].shape
        for h in hs:
            if h.shape != (self.m, n_cols):
                raise ValueError("H matrices must share shape")
        if n_cols != k:
            raise ValueError(f"H must have exactly k={k} columns, got {n_cols}")
        self.m_y = None  # set by run()

    def objective(self, gx, gys, lams) -> float:
        total = 0.0
        for h, gy, lam in zip(self.hs, gys, lams):
            resid = h - _assemble(gx, gy) @ lam
            total += float(np.vdot(resid, resid))
        return total

    def _update_lambdas(self, gx, gys, lams):
        out = []
        for h, gy, lam in zip(self.hs, gys, lams):
            g = _assemble(gx, gy)
            q = 2.0 * g.T @ g
            gt_h = g.T @ h
            cols = np.empty_like(lam)
            a_eq = np.ones((1, self.k))
            b_eq = np.ones(1)
            for j in range(self.k):
                prob = QpProblem(q=q, c=-2.0 * gt_h[:, j], a_eq=a_eq, b_eq=b_eq,
                                 nonneg=True)
                cols[:, j] = solve_qp(prob, tolerance=self.qp_tol, x0=lam[:, j]).x
            out.append(cols)
        return out

    def _update_gx(self, gx, gys, lams):
        m_x, k = gx.shape
        m_y = self.m // m_x
        s = np.zeros((k, k))
        c_mat = np.zeros((m_x, k))
        for h, gy, lam in zip(self.hs, gys, lams):
            t = gy[:, :, None] * lam[None, :, :]  # [y, k, j]
            s += np.einsum("ykj,ylj->kl", t, t)
            h_r = h.reshape(m_x, m_y, self.k)
            c_mat += np.einsum("xyj,ykj->xk", h_r, t)
        q = np.kron(np.eye(m_x), 2.0 * s)
        a_eq, b_eq = _colsum_eq(m_x, k)
        prob = QpProblem(q=q, c=-2.0 * c_mat.ravel(), a_eq=a_eq, b_eq=b_eq, nonneg=True)
        sol = solve_qp(prob, tolerance=self.qp_tol, x0=gx.ravel())
        return sol.x.reshape(m_x, k)

    def _update_gys(self, gx, gys, lams):
        m_x, k = gx.shape
        m_y = self.m // m_x
        a_eq, b_eq = _colsum_eq(m_y, k)
        out = []
        for h, gy, lam in zip(self.hs, gys, lams):
            t = gx[:, :, None] * lam[None, :, :]  # [x, k, j]
            s = np.einsum("xkj,xlj->kl", t, t)
            h_r = h.reshape(m_x, m_y, self.k)
            c_mat = np.einsum("xyj,xkj->yk", h_r, t)
            q = np.kron(np.eye(m_y), 2.0 * s)
            prob = QpProblem(q=q, c=-2.0 * c_mat.ravel(), a_eq=a_eq, b_eq=b_eq,
                             nonneg=True)
            sol = solve_qp(prob, tolerance=self.qp_tol, x0=gy.ravel())
            out.append(sol.x.reshape(m_y, k))
        return out

    def run(self, gx, gys, tol: float, max_outer: int):
        k = self.k
        lams = [np.full((k, k), 1.0 / k) for _ in self.hs]
        trail = [self.objective(gx, gys, lams)]
        converged = False
        for _ in range(max_outer):
            lams = self._update_lambdas(gx, gys, lams)
            trail.append(self.objective(gx, gys, lams))
            gx = self._update_gx(gx, gys, lams)
            trail.append(self.objective(gx, gys, lams))
            gys = self._update_gys(gx, gys, lams)
            trail.append(self.objective(gx, gys, lams))
            if trail[-4] - trail[-1] < tol:
                converged = True
                break
        return gx, gys, lams, trail, converged


def _guess_blocks(guess: NDArray, m_x: int, m_y: int) -> tuple[NDArray, NDArray]:
    gx = np.empty((m_x, guess.shape[1]))
    gy = np.empty((m_y, guess.shape[1]))
    for j in range(guess.shape[1]):
        gx[:, j], gy[:, j] = _split_column(guess[:, j], m_x, m_y)
    return gx, gy


def _fit_arms(hs: list[NDArray], guesses_per_restart, config: NmfConfig, m_x: int):
    """Run all restarts of the alternating loop; return the best result."""
    m = hs[0].shape[0]
    m_y = m // m_x
    if m_x * m_y != m:
        raise ValueError(f"H row count {m} not divisible by m_x={m_x}")
    alt = _Alternator(hs, config.k, config.qp_tolerance)
    best = None
    for restart, guesses in enumerate(guesses_per_restart):
        blocks = [_guess_blocks(g, m_x, m_y) for g in guesses]
        gx = sum(b[0] for b in blocks) / len(blocks)
        gys = [b[1] for b in blocks]
        gx, gys, lams, trail, converged = alt.run(
            gx, gys, config.tol_objective, config.max_outer_iter
        )
        obj = trail[-1]
        if best is None or obj < best[0] - 1e-15:
            best = (obj, gx, gys, lams, converged, restart)
    return best


def fit(h0, h1, config: NmfConfig, m_x: int | None = None) -> MixtureFit:
    """Joint factorization of both arms with a shared X block.

    Parameters
    ----------
    h0, h1 : CondProbMatrix or ndarray
        Conditional (y, x)-cell probability matrices, one column per z cell;
        both must have exactly ``config.k`` columns.
    config : NmfConfig
    m_x : int, optional
        Number of X cells; defaults to ``config.k`` (the square design).

    Returns
    -------
    MixtureFit
        Best fit across restarts (ties break toward the earlier restart).
    """
    h0v = as_stochastic(_values(h0)).values
    h1v = as_stochastic(_values(h1)).values
    m_x = config.k if m_x is None else m_x
    guesses = [
        [g.values for g in initialize(h0v, h1v, config, r)]
        for r in range(config.restarts)
    ]
    obj, gx, gys, lams, converged, _ = _fit_arms([h0v, h1v], guesses, config, m_x)
    return MixtureFit(
        gamma_x=as_stochastic(gx),
        gamma_y0=as_stochastic(gys[0]),
        gamma_y1=as_stochastic(gys[1]),
        lambda0=as_stochastic(lams[0]),
        lambda1=as_stochastic(lams[1]),
        objective=obj,
        restarts_used=config.restarts,
        converged=converged,
    )


def fit_single(h, d: int, config: NmfConfig, m_x: int | None = None) -> SingleArmFit:
    """Factorize one arm's H alone (its own X block; used by the falsification test)."""
    hv = as_stochastic(_values(h)).values
    m_x = config.k if m_x is None else m_x
    guesses = [
        [initialize(hv, hv, config, r)[0].values] for r in range(config.restarts)
    ]
    obj, gx, gys, lams, converged, _ = _fit_arms([hv], guesses, config, m_x)
    return SingleArmFit(
        d=d,
        gamma_x=as_stochastic(gx),
        gamma_y=as_stochastic(gys[0]),
        lam=as_stochastic(lams[0]),
        objective=obj,
        restarts_used=config.restarts,
        converged=converged,
    )


def _rank_order(gy0: NDArray, gy1: NDArray) -> NDArray:
    scores = np.arange(gy0.shape[0], dtype=float)
    mean0 = scores @ gy0
    mean1 = scores @ gy1
    return np.lexsort((np.arange(gy0.shape[1]), mean1, mean0))


def align(fit: MixtureFit) -> MixtureFit:
    """Permute latent classes so the untreated conditional mean is ascending.

    Ties break by the treated conditional mean, then by column index. The
    permutation is applied jointly: columns of the three component blocks and
    rows of both weight matrices.
    """
    order = _rank_order(fit.gamma_y0.values, fit.gamma_y1.values)
    if np.array_equal(order, np.arange(order.size)):
        return fit
    return replace(
        fit,
        gamma_x=CondProbMatrix(fit.gamma_x.values[:, order]),
        gamma_y0=CondProbMatrix(fit.gamma_y0.values[:, order]),
        gamma_y1=CondProbMatrix(fit.gamma_y1.values[:, order]),
        lambda0=CondProbMatrix(fit.lambda0.values[order, :]),
        lambda1=CondProbMatrix(fit.lambda1.values[order, :]),
    )


def align_single(fit: SingleArmFit) -> SingleArmFit:
    """Single-arm version of `align`, ranking by the fit's own outcome block."""
    order = _rank_order(fit.gamma_y.values, fit.gamma_y.values)
    if np.array_equal(order, np.arange(order.size)):
        return fit
    return replace(
        fit,
        gamma_x=CondProbMatrix(fit.gamma_x.values[:, order]),
        gamma_y=CondProbMatrix(fit.gamma_y.values[:, order]),
        lam=CondProbMatrix(fit.lam.values[order, :]),
    )
