"""Overidentification test: does the X block agree across treatment arms?

Each arm identifies its own conditional law of X given the latent class, so
fitting the two arms separately and comparing the recovered X blocks tests
the shared-proxy restriction. The difference vector is studentized with the
same orthogonalized-score projection used for the distributional estimates,
giving a Wald statistic with a chi-square reference distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import permutations

import numpy as np
from numpy.typing import NDArray
from scipy.stats import chi2

from . import nmf
from .core import CondProbMatrix, DiscreteDataset, build_h
from .dte import (
    CellTable,
    NuisanceSet,
    _eta_slices,
    build_phi_parts,
    eta_dim,
    invert_weights,
    jac_phi,
    marginal_u,
)

MAX_BRUTE_FORCE_K = 8


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FalsificationResult:
    """Wald test output; ``df`` reflects the numerical rank actually used."""

    w: NDArray[np.float64]
    t_stat: float
    df: int
    p_value: float
    permutation: tuple[int, ...]
    rank_deficient: bool = False

    def reject(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def split_fit(dataset_or_hs, k: int, config: nmf.NmfConfig | None = None,
              m_x: int | None = None) -> tuple[nmf.SingleArmFit, nmf.SingleArmFit]:
    """Fit each arm's H separately; returns (treated fit, untreated fit)."""
    config = config or nmf.NmfConfig(k=k)
    if isinstance(dataset_or_hs, DiscreteDataset):
        h0 = build_h(dataset_or_hs, 0).values
        h1 = build_h(dataset_or_hs, 1).values
        m_x = dataset_or_hs.m_x
    else:
        h0, h1 = dataset_or_hs
        h0 = getattr(h0, "values", h0)
        h1 = getattr(h1, "values", h1)
    fit1 = nmf.align_single(nmf.fit_single(h1, 1, config, m_x=m_x))
    fit0 = nmf.align_single(nmf.fit_single(h0, 0, config, m_x=m_x))
    return fit1, fit0


def match_labels(gamma_x_treated, gamma_x_untreated) -> tuple[int, ...]:
    """Permutation pi minimizing sum_k ||gx1[:, k] - gx0[:, pi(k)]||^2.

    Brute force over all permutations; latent dimensions above
    ``MAX_BRUTE_FORCE_K`` are refused (an assignment solver would be needed).
    """
    g1 = np.asarray(getattr(gamma_x_treated, "values", gamma_x_treated), dtype=float)
    g0 = np.asarray(getattr(gamma_x_untreated, "values", gamma_x_untreated), dtype=float)
    if g1.shape != g0.shape:
        raise ValueError("X blocks must share shape")
    k = g1.shape[1]
    if k > MAX_BRUTE_FORCE_K:
        raise ConfigurationError(
            f"label matching is brute force and limited to k <= {MAX_BRUTE_FORCE_K}")
    # cost[a, b] = ||gx1[:, a] - gx0[:, b]||^2
    cost = ((g1[:, :, None] - g0[:, None, :]) ** 2).sum(axis=0)
    best, best_val = None, np.inf
    for perm in permutations(range(k)):
        val = cost[np.arange(k), perm].sum()
        if val < best_val - 1e-15:
            best, best_val = perm, val
    return tuple(best)


def _permute_single(fit: nmf.SingleArmFit, order) -> nmf.SingleArmFit:
    order = np.asarray(order)
    return replace(
        fit,
        gamma_x=CondProbMatrix(fit.gamma_x.values[:, order]),
        gamma_y=CondProbMatrix(fit.gamma_y.values[:, order]),
        lam=CondProbMatrix(fit.lam.values[order, :]),
    )


def _w_moment_jacobian(cells: CellTable, nuis: NuisanceSet):
    """Per-coordinate derivative of E[W-moment] in the nuisances ([P, m_x*k])."""
    m_x, k = cells.m_x, cells.k
    p = eta_dim(k)
    lam_idx, _, pdz_idx = _eta_slices(k)
    b_t = cells.pi_xdz / nuis.p_dz[None, :, :]       # [x, d, j]
    r_hat = nuis.lt / nuis.p_dz[:, :, None]          # [d, j, k]
    dms = np.zeros((p, m_x * k))
    for kk in range(k):
        for x in range(m_x):
            col = kk * m_x + x
            dms[lam_idx(1, kk), col] = b_t[x, 1, :]
            dms[lam_idx(0, kk), col] = -b_t[x, 0, :]
            dms[pdz_idx(1), col] += -r_hat[1, :, kk] * b_t[x, 1, :]
            dms[pdz_idx(0), col] += r_hat[0, :, kk] * b_t[x, 0, :]
    return dms


def _w_feature(cells: CellTable, nuis: NuisanceSet) -> NDArray:
    """One-unit cell features f[(k, x), cell] of the X-block difference moment."""
    m_y, m_x, k = cells.m_y, cells.m_x, cells.k
    n_cells = cells.pi.size
    cell_idx = np.arange(n_cells).reshape(m_y, 2, m_x, k)
    r_hat = nuis.lt / nuis.p_dz[:, :, None]
    f = np.zeros((m_x * k, n_cells))
    for kk in range(k):
        for x in range(m_x):
            row = kk * m_x + x
            f[row, cell_idx[:, 1, x, :]] = r_hat[1, None, :, kk]
            f[row, cell_idx[:, 0, x, :]] = -r_hat[0, None, :, kk]
    return f


def wald_statistic(cells: CellTable, fit1: nmf.SingleArmFit, fit0: nmf.SingleArmFit,
                   permutation: tuple[int, ...], rcond: float = 1e-10):
    """Orthogonalized difference vector, its covariance, and the Wald statistic.

    ``permutation`` pairs treated class k with untreated class permutation[k],
    so the untreated fit is relabeled before the comparison.
    """
    fit0 = _permute_single(fit0, permutation)
    lt = np.stack([invert_weights(fit0.lam), invert_weights(fit1.lam)])
    p_dz = cells.pi_dz.copy()
    nuis = NuisanceSet(lt=lt, p_u=marginal_u(fit0.lam, fit1.lam, p_dz), p_dz=p_dz)

    parts = build_phi_parts(cells, nuis)
    phi_bar = parts.uavg()
    phi_tilde = parts.tilde()
    dphi = jac_phi(cells, nuis)
    dms = _w_moment_jacobian(cells, nuis)
    gram = dphi @ dphi.T
    mu_mat = dphi.T @ np.linalg.solve(gram, dms)      # [L, m_x*k]

    f = _w_feature(cells, nuis)
    pi_flat = cells.pi.ravel()
    mean_f = f @ pi_flat
    w_vec = mean_f - mu_mat.T @ phi_bar
    psi = 0.5 * (f + mean_f[:, None]) - w_vec[:, None] - mu_mat.T @ phi_tilde
    avar = 4.0 * (psi * pi_flat[None, :]) @ psi.T

    evals, evecs = np.linalg.eigh(avar)
    keep = evals > rcond * max(evals.max(), 1e-300)
    rank = int(keep.sum())
    proj = evecs[:, keep].T @ w_vec
    n_eff = cells.n if cells.n is not None else 1
    t_stat = float(n_eff * np.sum(proj ** 2 / evals[keep])) if rank else 0.0
    return w_vec, t_stat, rank, rank < w_vec.size


def run_test(dataset, k: int, config: nmf.NmfConfig | None = None) -> FalsificationResult:
    """Split-sample falsification test of the shared-X-block restriction.

    Parameters
    ----------
    dataset : DiscreteDataset or CellTable
        Sample (or population cells, in which case the statistic degenerates
        to an exact-null check).
    k : int
        Latent support size.
    config : NmfConfig, optional
        Settings for the two single-arm fits.
    """
    config = config or nmf.NmfConfig(k=k)
    if isinstance(dataset, DiscreteDataset):
        cells = CellTable.from_dataset(dataset)
        m_x = dataset.m_x
    else:
        cells = dataset
        m_x = cells.m_x
    cells.require_support()
    cond0 = cells.pi[:, 0] / cells.pi_dz[0]
    cond1 = cells.pi[:, 1] / cells.pi_dz[1]
    h0 = cond0.transpose(1, 0, 2).reshape(cells.m_y * m_x, cells.k)
    h1 = cond1.transpose(1, 0, 2).reshape(cells.m_y * m_x, cells.k)
    fit1, fit0 = split_fit((h0, h1), k, config, m_x=m_x)
    perm = match_labels(fit1.gamma_x, fit0.gamma_x)
    w_vec, t_stat, df, deficient = wald_statistic(cells, fit1, fit0, perm)
    p_value = float(chi2.sf(t_stat, df)) if df else 1.0
    return FalsificationResult(w=w_vec, t_stat=t_stat, df=df, p_value=p_value,
                               permutation=perm, rank_deficient=deficient)
