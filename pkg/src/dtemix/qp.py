"""Dense convex quadratic programming by a primal active-set method.

Minimize ``0.5 x'Qx + c'x`` subject to ``A_eq x = b_eq``, ``A_in x <= b_in``
and optionally ``x >= 0``. Problems here are small (dimension <= ~100), so the
working-set subproblems are solved as dense KKT systems. Singular PSD Q is
allowed; ties are then broken by the minimum-norm solve of the final working
set. Every returned solution carries an honestly computed KKT residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

_EMPTY = np.zeros((0,))


class QpInfeasibleError(RuntimeError):
    """Constraints admit no feasible point; carries the phase-1 certificate."""

    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


@dataclass(frozen=True)
class QpProblem:
    """Convex QP data. ``a_in x <= b_in``; ``nonneg`` adds ``x >= 0``."""

    q: NDArray[np.float64]
    c: NDArray[np.float64]
    a_eq: NDArray[np.float64] | None = None
    b_eq: NDArray[np.float64] | None = None
    a_in: NDArray[np.float64] | None = None
    b_in: NDArray[np.float64] | None = None
    nonneg: bool = False

    def __post_init__(self) -> None:
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.size
        if q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {q.shape}")
        if np.max(np.abs(q - q.T), initial=0.0) > 1e-10 * max(1.0, np.abs(q).max()):
            raise ValueError("Q must be symmetric within 1e-10")
        object.__setattr__(self, "q", 0.5 * (q + q.T))
        object.__setattr__(self, "c", c)
        for mat, vec, name in ((self.a_eq, self.b_eq, "eq"), (self.a_in, self.b_in, "in")):
            if (mat is None) != (vec is None):
                raise ValueError(f"a_{name} and b_{name} must be supplied together")
            if mat is not None:
                m = np.atleast_2d(np.asarray(mat, dtype=float))
                v = np.asarray(vec, dtype=float).ravel()
                if m.shape != (v.size, n):
                    raise ValueError(f"a_{name} shape {m.shape} inconsistent with n={n}")
                object.__setattr__(self, f"a_{name}", m)
                object.__setattr__(self, f"b_{name}", v)

    @property
    def dim(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class QpSolution:
    x: NDArray[np.float64]
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool


def _kkt_step(q, g, cons) -> tuple[NDArray, NDArray]:
    """Solve min 0.5 p'Qp + g'p s.t. cons @ p = 0; return (p, multipliers)."""
    n = g.size
    m = cons.shape[0]
    if m == 0:
        try:
            p = np.linalg.solve(q, -g)
            if np.isfinite(p).all():
                return p, _EMPTY
        except np.linalg.LinAlgError:
            pass
        p = np.linalg.lstsq(q, -g, rcond=None)[0]
        return p, _EMPTY
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = q
    kkt[:n, n:] = cons.T
    kkt[n:, :n] = cons
    rhs = np.empty(n + m)
    rhs[:n] = -g
    rhs[n:] = 0.0
    try:
        sol = np.linalg.solve(kkt, rhs)
        ok = np.isfinite(sol).all()
        if ok:
            err = np.abs(kkt @ sol - rhs).max()
            ok = err <= 1e-8 * max(1.0, np.abs(rhs).max())
        if not ok:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _independent_rows(base, candidates, idx, tol=1e-9):
    """Subset of ``idx`` whose rows stay linearly independent on top of ``base``."""
    if not idx:
        return []
    stacked = np.vstack([base, candidates[idx]]) if base.shape[0] else candidates[idx]
    if np.linalg.matrix_rank(stacked, tol=tol) == stacked.shape[0]:
        return list(idx)
    kept: list[int] = []
    rows = [base] if base.shape[0] else []
    rank = base.shape[0]
    for i in idx:
        trial = np.vstack(rows + [candidates[i][None, :]])
        if np.linalg.matrix_rank(trial, tol=tol) == rank + 1:
            kept.append(i)
            rows = [trial]
            rank += 1
    return kept


def _feasible_start(a_eq, b_eq, g_mat, h, x0, n, feas_tol, max_iter):
    m_eq = a_eq.shape[0]
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).ravel()
        eq_err = np.abs(a_eq @ x0 - b_eq).max() if m_eq else 0.0
        if eq_err > 1e-12:
            corr, *_ = np.linalg.lstsq(a_eq, a_eq @ x0 - b_eq, rcond=None)
            x0 = x0 - corr
            eq_err = np.abs(a_eq @ x0 - b_eq).max()
        if eq_err <= feas_tol and (
            g_mat.shape[0] == 0 or (g_mat @ x0 - h).max() <= feas_tol
        ):
            return x0

    if m_eq:
        x_eq, *_ = np.linalg.lstsq(a_eq, b_eq, rcond=None)
        if np.abs(a_eq @ x_eq - b_eq).max() > feas_tol * max(1.0, np.abs(b_eq).max()):
            raise QpInfeasibleError(
                "equality constraints are inconsistent",
                float(np.abs(a_eq @ x_eq - b_eq).max()),
            )
    else:
        x_eq = np.zeros(n)
    if g_mat.shape[0] == 0 or (g_mat @ x_eq - h).max() <= feas_tol:
        return x_eq

    # phase 1: minimize slack s with G x - s <= h on the equality manifold
    viol = float((g_mat @ x_eq - h).max())
    n1 = n + 1
    q1 = np.eye(n1) * 1e-8
    q1[n, n] = 1.0
    c1 = np.zeros(n1)
    a_eq1 = np.hstack([a_eq, np.zeros((m_eq, 1))]) if m_eq else np.zeros((0, n1))
    g1 = np.hstack([g_mat, -np.ones((g_mat.shape[0], 1))])
    start = np.concatenate([x_eq, [viol + 1.0]])
    sol = _solve_core(q1, c1, a_eq1, b_eq, g1, h, start,
                      tol=min(feas_tol * 1e-2, 1e-10), max_iter=max_iter)
    s_star = sol.x[n]
    if s_star > feas_tol:
        raise QpInfeasibleError(
            f"inequality constraints infeasible (best max violation {s_star:.3e})",
            float(s_star),
        )
    return sol.x[:n]


def _solve_core(q, c, a_eq, b_eq, g_mat, h, x, tol, max_iter):
    n = c.size
    m_eq = a_eq.shape[0]
    m_in = g_mat.shape[0]
    act_tol = max(tol, 1e-11)

    if m_in:
        slack = g_mat @ x - h
        active = np.nonzero(slack >= -act_tol)[0]
        work = _independent_rows(a_eq, g_mat, active.tolist())
    else:
        work = []
    in_work = np.zeros(m_in, dtype=bool)
    in_work[work] = True

    iterations = 0
    lam_work = _EMPTY
    mult = _EMPTY
    while iterations < max_iter:
        iterations += 1
        g = q @ x + c
        if m_eq or work:
            cons = np.vstack([a_eq, g_mat[work]]) if work else a_eq
        else:
            cons = np.zeros((0, n))
        p, mult = _kkt_step(q, g, cons)
        lam_work = mult[m_eq:] if mult.size else _EMPTY
        if np.abs(p).max(initial=0.0) <= act_tol * max(1.0, np.abs(x).max()):
            if lam_work.size == 0 or lam_work.min() >= -tol:
                break
            worst = int(np.argmin(lam_work))
            in_work[work[worst]] = False
            del work[worst]
            continue
        alpha = 1.0
        blocker = -1
        if m_in:
            gp = g_mat @ p
            cand = np.nonzero((gp > 1e-13) & ~in_work)[0]
            if cand.size:
                ratios = (h[cand] - g_mat[cand] @ x) / gp[cand]
                np.maximum(ratios, 0.0, out=ratios)
                best = int(np.argmin(ratios))
                if ratios[best] < alpha:
                    alpha = float(ratios[best])
                    blocker = int(cand[best])
        x = x + alpha * p
        if blocker >= 0:
            work.append(blocker)
            in_work[blocker] = True
    converged = iterations < max_iter

    # honest KKT residual of the returned iterate
    lam_full = np.zeros(m_in)
    if lam_work.size:
        lam_full[work] = lam_work
    g = q @ x + c
    stat = g.copy()
    if m_in:
        stat += g_mat.T @ lam_full
    if m_eq:
        if converged and mult.size >= m_eq:
            nu = mult[:m_eq]
        else:
            nu, *_ = np.linalg.lstsq(a_eq.T, -stat, rcond=None)
        stat += a_eq.T @ nu
    res = float(np.abs(stat).max(initial=0.0))
    if m_eq:
        res = max(res, float(np.abs(a_eq @ x - b_eq).max()))
    if m_in:
        slack = g_mat @ x - h
        res = max(res, float(np.maximum(slack, 0.0).max()))
        res = max(res, float(np.maximum(-lam_full, 0.0).max()))
        res = max(res, float(np.abs(lam_full * slack).max()))
    obj = float(0.5 * x @ q @ x + c @ x)
    return QpSolution(x=x, objective=obj, kkt_residual=res, iterations=iterations,
                      converged=converged)


def solve_qp(problem: QpProblem, tolerance: float = 1e-9, max_iter: int = 10_000,
             x0: NDArray[np.float64] | None = None) -> QpSolution:
    """Solve a convex QP to a KKT point.

    Parameters
    ----------
    problem : QpProblem
    tolerance : float
        Target on the max-norm KKT residual (stationarity, feasibility,
        complementarity).
    max_iter : int
        Active-set iteration cap; on exhaustion the best iterate is returned
        with ``converged=False``.
    x0 : ndarray, optional
        Warm-start point; used when feasible, which also seeds the working set.

    Raises
    ------
    QpInfeasibleError
        If phase 1 certifies an empty feasible set.
    """
    n = problem.dim
    if problem.a_in is not None and problem.nonneg:
        g_mat = np.vstack([problem.a_in, -np.eye(n)])
        h = np.concatenate([problem.b_in, np.zeros(n)])
    elif problem.a_in is not None:
        g_mat, h = problem.a_in, problem.b_in
    elif problem.nonneg:
        g_mat, h = -np.eye(n), np.zeros(n)
    else:
        g_mat, h = np.zeros((0, n)), np.zeros(0)
    a_eq = problem.a_eq if problem.a_eq is not None else np.zeros((0, n))
    b_eq = problem.b_eq if problem.b_eq is not None else np.zeros(0)

    feas_tol = max(tolerance, 1e-10)
    x = _feasible_start(a_eq, b_eq, g_mat, h, x0, n, feas_tol, max_iter)
    return _solve_core(problem.q, problem.c, a_eq, b_eq, g_mat, h, x,
                       tol=tolerance, max_iter=max_iter)
