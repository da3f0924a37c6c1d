"""Second-step estimators: orthogonalized pairwise GMM for distributional effects.

Given fitted mixture weights, the joint CDF of the two potential outcomes and
the CDF of their difference are weighted sums of products of observed
conditional CDFs across (treatment, z-cell) subpopulations. Each target is
estimated from a symmetric pairwise moment, orthogonalized against the
first-step nuisances (the inverted weight matrices, the latent marginal, and
the (d, z) cell masses) so that first-step estimation error is second order.

All pair sums are reduced to contingency-cell aggregates with same-unit
corrections, which reproduces the literal O(n^2) pairwise computation exactly
at O(cells^2) cost. Outcome "values" are 0-based cell indices throughout, so
difference thresholds live on the integer grid of cell-index differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import DiscreteDataset, InsufficientSupportError
from .nmf import MixtureFit

Z975 = 1.959963984540054


class RankDeficiencyError(RuntimeError):
    """A weight matrix is numerically singular; carries the offending spectrum."""

    def __init__(self, message: str, smallest_singular_value: float):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


@dataclass(frozen=True)
class MarginalTarget:
    """CDF of the treatment effect at threshold ``delta`` (cell-index units)."""

    delta: float

    def event_matrix(self, m_y: int) -> NDArray[np.float64]:
        y0 = np.arange(m_y)[:, None]
        y1 = np.arange(m_y)[None, :]
        return (y1 - y0 <= self.delta).astype(float)

    def label(self) -> str:
        return f"marginal(delta={self.delta:g})"


@dataclass(frozen=True)
class JointTarget:
    """Joint CDF at the upper edges of cells (y0_cell, y1_cell), 0-based."""

    y0_cell: int
    y1_cell: int

    def event_matrix(self, m_y: int) -> NDArray[np.float64]:
        y0 = np.arange(m_y)[:, None]
        y1 = np.arange(m_y)[None, :]
        return ((y0 <= self.y0_cell) & (y1 <= self.y1_cell)).astype(float)

    def label(self) -> str:
        return f"joint(y0_cell={self.y0_cell}, y1_cell={self.y1_cell})"


@dataclass(frozen=True)
class DteEstimate:
    """A target functional with its standard error and 95% normal interval."""

    target: str
    theta: float
    se: float
    ci_lo: float
    ci_hi: float

    @property
    def theta_clamped(self) -> float:
        return min(1.0, max(0.0, self.theta))

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi


@dataclass(frozen=True)
class BoundsEstimate:
    """Marginals-only bounds on the treatment-effect CDF at ``delta``."""

    delta: float
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.lower <= self.upper <= 1.0):
            raise ValueError(f"bounds must satisfy 0 <= lower <= upper <= 1, got "
                             f"({self.lower}, {self.upper})")


class CellTable:
    """Cell weights over (y, d, x, z): counts for a sample, probabilities for a population."""

    def __init__(self, weights: NDArray[np.float64], n: int | None):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 4 or w.shape[1] != 2:
            raise ValueError("weights must have shape (m_y, 2, m_x, m_z)")
        if np.any(w < 0):
            raise ValueError("cell weights must be nonnegative")
        self.w = w
        self.n = n
        self.total = float(w.sum())
        if self.total <= 0:
            raise ValueError("cell weights are all zero")
        self.pi = w / self.total
        self.pi_ydz = self.pi.sum(axis=2)                      # [y, d, z]
        self.pi_xdz = self.pi.sum(axis=0).transpose(1, 0, 2)   # [x, d, z]
        self.pi_dz = self.pi.sum(axis=(0, 2))                  # [d, z]
        self.pi_x = self.pi.sum(axis=(0, 1, 3))                # [x]

    @classmethod
    def from_dataset(cls, dataset: DiscreteDataset) -> "CellTable":
        return cls(dataset.counts.astype(float), dataset.n)

    @classmethod
    def from_probs(cls, probs: NDArray[np.float64]) -> "CellTable":
        return cls(probs, None)

    @property
    def m_y(self) -> int:
        return self.w.shape[0]

    @property
    def m_x(self) -> int:
        return self.w.shape[2]

    @property
    def k(self) -> int:
        return self.w.shape[3]

    def require_support(self) -> None:
        empty = np.argwhere(self.pi_dz == 0)
        if empty.size:
            d, j = empty[0]
            raise InsufficientSupportError(f"no observations in cell (d={d}, z_cell={j})")


@dataclass(frozen=True)
class NuisanceSet:
    """First-step nuisances in the fixed stacking used by the orthogonalization.

    ``lt[d, j, k]`` holds entry (j, k) of the inverse weight matrix for arm d;
    the flat vector interleaves arms within each latent class. ``mu`` is the
    target-specific orthogonalization multiplier (absent until computed).
    """

    lt: NDArray[np.float64]          # [2, K, K]
    p_u: NDArray[np.float64]         # [K]
    p_dz: NDArray[np.float64]        # [2, K]
    mu: NDArray[np.float64] | None = None

    @property
    def k(self) -> int:
        return self.p_u.size

    @property
    def lambda_tilde(self) -> NDArray[np.float64]:
        """Flat nuisance vector: j within (d, k), d inner, k outer."""
        k = self.k
        out = np.empty(2 * k * k)
        for kk in range(k):
            for d in (0, 1):
                out[(kk * 2 + d) * k:(kk * 2 + d + 1) * k] = self.lt[d, :, kk]
        return out

    @property
    def p_vec(self) -> NDArray[np.float64]:
        return np.concatenate([self.p_u, self.p_dz[0], self.p_dz[1]])


def nuisances_from_flat(lambda_tilde: NDArray, p_vec: NDArray) -> NuisanceSet:
    """Rebuild a NuisanceSet from the flat stackings (inverse of the properties)."""
    k = p_vec.size // 3
    lt = np.empty((2, k, k))
    for kk in range(k):
        for d in (0, 1):
            lt[d, :, kk] = lambda_tilde[(kk * 2 + d) * k:(kk * 2 + d + 1) * k]
    return NuisanceSet(lt=lt, p_u=p_vec[:k].copy(),
                       p_dz=np.stack([p_vec[k:2 * k], p_vec[2 * k:]]))


def invert_weights(lam, cond_cap: float = 1e8) -> NDArray[np.float64]:
    """Invert a mixture weight matrix, guarding against near-singularity."""
    lam = np.asarray(getattr(lam, "values", lam), dtype=float)
    svals = np.linalg.svd(lam, compute_uv=False)
    smin = float(svals[-1])
    if smin <= 0 or svals[0] / smin > cond_cap:
        raise RankDeficiencyError(
            f"weight matrix is numerically singular "
            f"(smallest singular value {smin:.3e})", smin)
    return np.linalg.inv(lam)


def marginal_u(lambda0, lambda1, p_dz: NDArray[np.float64]) -> NDArray[np.float64]:
    """Latent marginal implied by the weight matrices and the (d, z) masses."""
    l0 = np.asarray(getattr(lambda0, "values", lambda0), dtype=float)
    l1 = np.asarray(getattr(lambda1, "values", lambda1), dtype=float)
    p_dz = np.asarray(p_dz, dtype=float)
    if p_dz.shape != (2, l0.shape[1]):
        raise ValueError(f"p_dz must have shape (2, {l0.shape[1]})")
    return l0 @ p_dz[0] + l1 @ p_dz[1]


def build_nuisances(fit: MixtureFit, cells: CellTable,
                    cond_cap: float = 1e8) -> NuisanceSet:
    """Nuisances from a fitted mixture and the (d, z) cell masses of the data."""
    lt0 = invert_weights(fit.lambda0, cond_cap)
    lt1 = invert_weights(fit.lambda1, cond_cap)
    p_dz = cells.pi_dz.copy()
    p_u = marginal_u(fit.lambda0, fit.lambda1, p_dz)
    return NuisanceSet(lt=np.stack([lt0, lt1]), p_u=p_u, p_dz=p_dz)


# ---------------------------------------------------------------------------
# moment machinery
#
# Every orthogonalization coordinate is a symmetric pair function
#     phi_b(W, W') = (f_b(W) + f_b(W')) / 2
#                  + (u_b(W) v_b(W') + v_b(W) u_b(W')) / 2 + const_b
# with f, u, v one-unit cell functions, so pair averages and the per-unit
# projection reduce to the cell arrays built here.
# ---------------------------------------------------------------------------


class _PhiParts:
    def __init__(self, f, u, v, const, cells: CellTable):
        self.f = f          # [L, cells]
        self.u = u
        self.v = v
        self.const = const  # [L]
        self.cells = cells
        pi_flat = cells.pi.ravel()
        self.mean_f = f @ pi_flat
        self.mean_u = u @ pi_flat
        self.mean_v = v @ pi_flat

    def uavg(self) -> NDArray[np.float64]:
        """Pairwise average over distinct pairs (expectation in population mode)."""
        cells = self.cells
        if cells.n is None:
            pair = self.mean_u * self.mean_v
        else:
            n = cells.n
            w_flat = cells.w.ravel()
            sum_u = self.u @ w_flat
            sum_v = self.v @ w_flat
            sum_uv = (self.u * self.v) @ w_flat
            pair = (sum_u * sum_v - sum_uv) / (n * (n - 1))
        return self.mean_f + pair + self.const

    def tilde(self) -> NDArray[np.float64]:
        """Per-cell projection: the average of phi(W_i, w) over all units i."""
        t = 0.5 * (self.f + self.mean_f[:, None])
        t += 0.5 * (self.u * self.mean_v[:, None] + self.v * self.mean_u[:, None])
        t += self.const[:, None]
        return t

    def pair_value(self, cell_a: int, cell_b: int) -> NDArray[np.float64]:
        """phi evaluated at one ordered pair of cells (for cross-checks)."""
        return (0.5 * (self.f[:, cell_a] + self.f[:, cell_b])
                + 0.5 * (self.u[:, cell_a] * self.v[:, cell_b]
                         + self.v[:, cell_a] * self.u[:, cell_b])
                + self.const)


def phi_dim(m_y: int, m_x: int, k: int) -> int:
    return 2 * m_y * m_x * k + 2 * m_x + 2 * k


def build_phi_parts(cells: CellTable, nuis: NuisanceSet) -> _PhiParts:
    """Assemble the cell arrays of every orthogonalization coordinate.

    Coordinate order: the conditional-independence block over (y, x) cells for
    (d=0, k), (d=1, k), k ascending; then the iterated-expectation block over x
    for d=0, d=1; then the (d, z) mass block.
    """
    m_y, m_x, k = cells.m_y, cells.m_x, cells.k
    m = m_y * m_x
    n_cells = m_y * 2 * m_x * k
    ell = phi_dim(m_y, m_x, k)
    f = np.zeros((ell, n_cells))
    u = np.zeros((ell, n_cells))
    v = np.zeros((ell, n_cells))
    const = np.zeros(ell)

    r_hat = nuis.lt / nuis.p_dz[:, :, None]     # [d, j, k]
    cell_idx = np.arange(n_cells).reshape(m_y, 2, m_x, k)

    for kk in range(k):
        for d in (0, 1):
            base = (kk * 2 + d) * m
            for y in range(m_y):
                for x in range(m_x):
                    row = base + x * m_y + y
                    f[row, cell_idx[y, d, x, :]] = r_hat[d, :, kk]
                    u[row, cell_idx[y, d, :, :]] = r_hat[d, None, :, kk]
                    v[row, cell_idx[:, d, x, :]] = -r_hat[d, None, :, kk]

    s_b = np.einsum("k,djk->dj", nuis.p_u, r_hat)
    base_b = 2 * m * k
    for d in (0, 1):
        for x in range(m_x):
            row = base_b + d * m_x + x
            f[row, cell_idx[:, :, x, :]] = 1.0
            f[row, cell_idx[:, d, x, :]] -= s_b[d, None, :]

    base_c = base_b + 2 * m_x
    for d in (0, 1):
        for j in range(k):
            row = base_c + d * k + j
            f[row, cell_idx[:, d, :, j]] = 1.0
            const[row] = -nuis.p_dz[d, j]
    return _PhiParts(f, u, v, const, cells)


def build_phi(cells: CellTable, nuis: NuisanceSet) -> NDArray[np.float64]:
    """Pairwise average of the orthogonalization moments on the data."""
    return build_phi_parts(cells, nuis).uavg()


def population_phi(cells: CellTable, lt: NDArray, p_u: NDArray,
                   p_dz: NDArray) -> NDArray[np.float64]:
    """Expected phi under the cell distribution, as a function of free nuisances."""
    nuis = NuisanceSet(lt=lt, p_u=p_u, p_dz=p_dz)
    parts = build_phi_parts(cells, nuis)
    return parts.mean_f + parts.mean_u * parts.mean_v + parts.const


def _rho(nuis: NuisanceSet) -> NDArray[np.float64]:
    # rho[j, j'] = sum_k p_u[k] lt0[j,k] lt1[j',k] / (p_dz0[j] p_dz1[j'])
    c = np.einsum("k,jk,lk->jl", nuis.p_u, nuis.lt[0], nuis.lt[1])
    return c / (nuis.p_dz[0][:, None] * nuis.p_dz[1][None, :])


def m_kernel_stats(cells: CellTable, nuis: NuisanceSet, target) -> tuple[float, NDArray]:
    """Pairwise average and per-cell projection of the target moment kernel.

    Returns the kernel part of the moment (without the -theta shift): its
    average over distinct pairs, and its projection g_tilde(cell) = average of
    the kernel against every unit.
    """
    event = target.event_matrix(cells.m_y)
    rho = _rho(nuis)
    if cells.n is None:
        c0 = cells.pi_ydz[:, 0, :]      # [y0, j]
        c1 = cells.pi_ydz[:, 1, :]      # [y1, j']
        scale = 1.0
        n_denom = 1.0
    else:
        counts_ydz = cells.w.sum(axis=2)
        c0 = counts_ydz[:, 0, :]
        c1 = counts_ydz[:, 1, :]
        scale = 1.0 / (cells.n * (cells.n - 1))
        n_denom = float(cells.n)
    g_bar = float(np.einsum("jl,ab,aj,bl->", rho, event, c0, c1)) * scale

    # projections: at a treated cell (y, 1, x, j') average over untreated partners
    a1 = np.einsum("jl,ab,aj->bl", rho, event, c0) / n_denom   # [y1, j']
    a0 = np.einsum("jl,ab,bl->aj", rho, event, c1) / n_denom   # [y0, j]
    n_cells = cells.pi.size
    g_tilde = np.zeros((cells.m_y, 2, cells.m_x, cells.k))
    g_tilde[:, 1, :, :] = 0.5 * a1[:, None, :]
    g_tilde[:, 0, :, :] = 0.5 * a0[:, None, :]
    return g_bar, g_tilde.reshape(n_cells)


def population_m(cells: CellTable, lt: NDArray, p_u: NDArray, p_dz: NDArray,
                 target) -> float:
    """Expected moment kernel under the cell distribution with free nuisances."""
    nuis = NuisanceSet(lt=lt, p_u=p_u, p_dz=p_dz)
    g_bar, _ = m_kernel_stats(CellTable(cells.pi, None), nuis, target)
    return g_bar


# ---------------------------------------------------------------------------
# Jacobians: analytic derivatives of E[phi] and E[m] in the nuisance vector
# eta = (lambda_tilde, p_u, p_dz); rows index eta, columns index moments.
# ---------------------------------------------------------------------------


def eta_dim(k: int) -> int:
    return 2 * k * k + 3 * k


def _eta_slices(k: int):
    def lam_idx(d: int, kk: int) -> slice:
        base = (kk * 2 + d) * k
        return slice(base, base + k)

    off = 2 * k * k
    return lam_idx, slice(off, off + k), lambda d: slice(off + k + d * k,
                                                         off + k + (d + 1) * k)


def build_jacobians(cells: CellTable, nuis: NuisanceSet, target) -> tuple[NDArray, NDArray]:
    """Closed-form Jacobians of the moment expectations in the nuisances.

    Returns ``(dphi, dm)`` with ``dphi[a, b] = d E[phi_b] / d eta_a`` and
    ``dm[a] = d E[m] / d eta_a``, both evaluated at ``nuis`` under the cell
    distribution of ``cells``.
    """
    return jac_phi(cells, nuis), jac_m(cells, nuis, target)


def jac_phi(cells: CellTable, nuis: NuisanceSet) -> NDArray:
    """Derivative of every orthogonalization-moment expectation in the nuisances."""
    m_y, m_x, k = cells.m_y, cells.m_x, cells.k
    m = m_y * m_x
    ell = phi_dim(m_y, m_x, k)
    p = eta_dim(k)
    lam_idx, pu_idx, pdz_idx = _eta_slices(k)

    lt, p_u, p_dz = nuis.lt, nuis.p_u, nuis.p_dz
    r_hat = lt / p_dz[:, :, None]                       # [d, j, k]
    h_t = np.einsum("ydxj,dj->ydxj", cells.pi, 1.0 / p_dz)   # joint / p_dz
    a_t = cells.pi_ydz / p_dz[None, :, :]               # [y, d, j]
    b_t = cells.pi_xdz / p_dz[None, :, :]               # [x, d, j]
    a_k = np.einsum("ydj,djk->dyk", cells.pi_ydz, r_hat)   # plug-in P{Y(d)=y|U}
    b_k = np.einsum("xdj,djk->dxk", cells.pi_xdz, r_hat)   # plug-in P{X=x|U}

    dphi = np.zeros((p, ell))
    # conditional-independence block
    for kk in range(k):
        for d in (0, 1):
            base = (kk * 2 + d) * m
            cols = (base + np.arange(m_x)[:, None] * m_y + np.arange(m_y)[None, :]).ravel()
            ht_d = h_t[:, d, :, :].transpose(2, 1, 0)                       # [j, x, y]
            cross = (np.einsum("yj,x->jxy", a_t[:, d, :], b_k[d][:, kk])
                     + np.einsum("xj,y->jxy", b_t[:, d, :], a_k[d][:, kk]))
            dphi[lam_idx(d, kk), :][:, cols] = (ht_d - cross).reshape(k, m)
            grad_p = r_hat[d, :, kk][:, None, None] * (cross - ht_d)
            dphi[pdz_idx(d), :][:, cols] += grad_p.reshape(k, m)

    # iterated-expectation block
    base_b = 2 * m * k
    for d in (0, 1):
        cols = base_b + d * m_x + np.arange(m_x)
        for kk in range(k):
            dphi[lam_idx(d, kk), :][:, cols] = -p_u[kk] * b_t[:, d, :].T  # [j, x]
        dphi[pu_idx, :][:, cols] = -b_k[d].T                              # [k, x]
        s_jx = np.einsum("k,djk->dj", p_u, r_hat)[d][:, None] * b_t[:, d, :].T
        dphi[pdz_idx(d), :][:, cols] += s_jx

    # cell-mass block
    base_c = base_b + 2 * m_x
    for d in (0, 1):
        cols = base_c + d * k + np.arange(k)
        dphi[pdz_idx(d), :][:, cols] += -np.eye(k)
    return dphi


def jac_m(cells: CellTable, nuis: NuisanceSet, target) -> NDArray:
    """Derivative of the target-moment expectation in the nuisances."""
    m_y, k = cells.m_y, cells.k
    p = eta_dim(k)
    lam_idx, pu_idx, pdz_idx = _eta_slices(k)
    lt, p_u, p_dz = nuis.lt, nuis.p_u, nuis.p_dz
    event = target.event_matrix(m_y)
    q = np.einsum("ab,aj,bl->jl", event, cells.pi_ydz[:, 0, :], cells.pi_ydz[:, 1, :])
    r = q / (p_dz[0][:, None] * p_dz[1][None, :])
    dm = np.zeros(p)
    for kk in range(k):
        dm[lam_idx(0, kk)] = p_u[kk] * (r @ lt[1, :, kk])
        dm[lam_idx(1, kk)] = p_u[kk] * (r.T @ lt[0, :, kk])
    dm[pu_idx] = np.einsum("jk,lk,jl->k", lt[0], lt[1], r)
    c_jl = np.einsum("k,jk,lk->jl", p_u, lt[0], lt[1])
    dm[pdz_idx(0)] = -(c_jl * r).sum(axis=1) / p_dz[0]
    dm[pdz_idx(1)] = -(c_jl * r).sum(axis=0) / p_dz[1]
    return dm


def compute_mu(dphi: NDArray, dm: NDArray, ridge_scale: float = 1e-10) -> NDArray:
    """Least-squares multiplier making the corrected score insensitive to nuisances.

    Solves ``mu = dphi' (dphi dphi')^{-1} dm``; a singular Gram matrix falls
    back to a ridge-regularized solve with a warning.
    """
    gram = dphi @ dphi.T
    try:
        coef = np.linalg.solve(gram, dm)
        if not np.isfinite(coef).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("orthogonalization Gram matrix is singular; "
                      "using ridge-regularized fallback", RuntimeWarning)
        reg = ridge_scale * np.trace(gram) * np.eye(gram.shape[0])
        coef = np.linalg.solve(gram + reg, dm)
    return dphi.T @ coef


def estimate_variance(cells: CellTable, psi_tilde: NDArray[np.float64]) -> float:
    """Plug-in standard error from the per-cell score projection.

    The influence of an order-2 symmetric kernel is twice its one-unit
    projection, hence the factor 2 on the projected dispersion.
    """
    if cells.n is None:
        return 0.0
    sigma2 = float(cells.pi.ravel() @ psi_tilde**2)
    return 2.0 * np.sqrt(max(sigma2, 0.0) / cells.n)


def _as_cells(data) -> CellTable:
    if isinstance(data, CellTable):
        return data
    if isinstance(data, DiscreteDataset):
        return CellTable.from_dataset(data)
    raise TypeError(f"expected DiscreteDataset or CellTable, got {type(data)!r}")


def estimate_theta(data, fit: MixtureFit, target, *, cond_cap: float = 1e8) -> DteEstimate:
    """Estimate one distributional target with its orthogonalized score.

    Parameters
    ----------
    data : DiscreteDataset or CellTable
        Sample cells, or a population cell table (then ``se`` is 0).
    fit : MixtureFit
        Aligned first-step fit.
    target : MarginalTarget or JointTarget
    """
    return estimate_many(data, fit, [target], cond_cap=cond_cap)[0]


def estimate_many(data, fit: MixtureFit, targets, *, cond_cap: float = 1e8) -> list[DteEstimate]:
    """Estimate several targets sharing one nuisance construction."""
    cells = _as_cells(data)
    cells.require_support()
    if fit.lambda0.cols != cells.k:
        raise ValueError(f"fit has k={fit.lambda0.cols} but data has {cells.k} z cells")
    nuis = build_nuisances(fit, cells, cond_cap)
    parts = build_phi_parts(cells, nuis)
    phi_bar = parts.uavg()
    phi_tilde = parts.tilde()
    dphi = jac_phi(cells, nuis)
    gram = dphi @ dphi.T
    try:
        gram_solve = _gram_solver(gram)
    except np.linalg.LinAlgError:
        warnings.warn("orthogonalization Gram matrix is singular; "
                      "using ridge-regularized fallback", RuntimeWarning)
        reg = 1e-10 * np.trace(gram) * np.eye(gram.shape[0])
        gram_solve = _gram_solver(gram + reg)
    out = []
    for target in targets:
        dm = jac_m(cells, nuis, target)
        mu = dphi.T @ gram_solve(dm)
        g_bar, g_tilde = m_kernel_stats(cells, nuis, target)
        theta = float(g_bar - mu @ phi_bar)
        if cells.n is None:
            se = 0.0
        else:
            psi_tilde = g_tilde - theta - mu @ phi_tilde
            se = estimate_variance(cells, psi_tilde)
        out.append(DteEstimate(target=target.label(), theta=theta, se=se,
                               ci_lo=theta - Z975 * se, ci_hi=theta + Z975 * se))
    return out


def _gram_solver(gram: NDArray):
    from scipy.linalg import cho_factor, cho_solve

    factor = cho_factor(gram)
    return lambda rhs: cho_solve(factor, rhs)


def marginal_cdfs(cells: CellTable, nuis: NuisanceSet) -> tuple[NDArray, NDArray]:
    """Model-implied marginal CDFs of the two potential outcomes on the y grid."""
    cond = cells.pi_ydz / cells.pi_dz[None, :, :]      # [y, d, j]
    cum = np.cumsum(cond, axis=0)
    f_by_arm = []
    for d in (0, 1):
        per_class = cum[:, d, :] @ nuis.lt[d]          # [y, k]
        f_by_arm.append(per_class @ nuis.p_u)
    return f_by_arm[0], f_by_arm[1]


def makarov_bounds(f1: NDArray, f0: NDArray, delta: float,
                   scores: NDArray | None = None) -> BoundsEstimate:
    """Marginals-only bounds on P{Y(1) - Y(0) <= delta}.

    ``f1`` and ``f0`` are CDF values at the grid ``scores`` (cell indices by
    default). The envelope is evaluated on the union of the grid and the
    delta-shifted grid, which is exact for step CDFs.
    """
    f1 = np.asarray(f1, dtype=float)
    f0 = np.asarray(f0, dtype=float)
    if np.any(np.diff(f1) < -1e-10) or np.any(np.diff(f0) < -1e-10):
        raise ValueError("marginal CDFs must be nondecreasing on the grid")
    if scores is None:
        scores = np.arange(f1.size, dtype=float)
    grid = np.union1d(scores, scores + delta)

    def step(f, s, t):
        idx = np.searchsorted(s, t, side="right") - 1
        vals = np.concatenate([[0.0], f])
        return vals[idx + 1]

    diff = step(f1, scores, grid) - step(f0, scores, grid - delta)
    lower = float(np.clip(np.max(np.maximum(diff, 0.0), initial=0.0), 0.0, 1.0))
    upper = float(np.clip(1.0 + np.min(np.minimum(diff, 0.0), initial=0.0), 0.0, 1.0))
    return BoundsEstimate(delta=delta, lower=lower, upper=max(lower, upper))
