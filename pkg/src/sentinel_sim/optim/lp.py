"""Linear programming: a dense bounded revised simplex plus a HiGHS backend.

Problems are stated as

    minimize    c @ x
    subject to  A_ub @ x <= b_ub
                A_eq @ x == b_eq
                lo <= x <= hi          (lo finite, hi may be +inf)

Both backends return an :class:`LPResult` with row duals, so callers can
check complementary slackness irrespective of the solver used.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class LPResult:
    status: str
    x: Optional[np.ndarray]
    fun: float
    # duals: d(objective)/d(rhs); <= 0 for binding <= rows of a minimization
    duals_ub: np.ndarray
    duals_eq: np.ndarray
    iterations: int = 0

    @property
    def success(self):
        return self.status == OPTIMAL


def _as2d(A, n):
    if A is None:
        return np.zeros((0, n))
    if sparse.issparse(A):
        return A
    A = np.asarray(A, dtype=float)
    return A.reshape(-1, n)


class BoundedSimplex:
    """Revised primal simplex with bounded variables.

    Phase one minimizes the sum of artificials; phase two keeps artificials
    fixed at zero. Entering variables are chosen by Dantzig's rule until a run
    of degenerate pivots suggests cycling, after which Bland's rule is used.
    """

    def __init__(self, tol=1e-9, max_iter=20000, degenerate_switch=50):
        self.tol = tol
        self.max_iter = max_iter
        self.degenerate_switch = degenerate_switch

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
        c = np.asarray(c, dtype=float)
        n = c.size
        A_ub, A_eq = _as2d(A_ub, n), _as2d(A_eq, n)
        b_ub = np.asarray(b_ub if b_ub is not None else [], dtype=float)
        b_eq = np.asarray(b_eq if b_eq is not None else [], dtype=float)
        m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
        lo, hi = _bounds(bounds, n)
        if np.any(hi < lo - self.tol):
            return LPResult(INFEASIBLE, None, np.nan, np.zeros(m_ub), np.zeros(m_eq))

        # standard form: [A_ub I; A_eq 0] [x; s] = b, s >= 0
        m = m_ub + m_eq
        A = np.zeros((m, n + m_ub))
        A[:m_ub, :n] = A_ub
        A[:m_ub, n:] = np.eye(m_ub)
        A[m_ub:, :n] = A_eq
        b = np.concatenate([b_ub, b_eq])
        lo_all = np.concatenate([lo, np.zeros(m_ub)])
        hi_all = np.concatenate([hi, np.full(m_ub, np.inf)])
        cost = np.concatenate([c, np.zeros(m_ub)])

        # artificials with sign so that the start point is feasible
        x_start = lo_all.copy()
        resid = b - A @ x_start
        sign = np.where(resid >= 0, 1.0, -1.0)
        nn = A.shape[1]
        A_full = np.hstack([A, np.diag(sign)])
        lo_full = np.concatenate([lo_all, np.zeros(m)])
        hi_full = np.concatenate([hi_all, np.full(m, np.inf)])
        x = np.concatenate([x_start, np.abs(resid)])
        basis = list(range(nn, nn + m))
        at_upper = np.zeros(nn + m, dtype=bool)

        phase1_cost = np.concatenate([np.zeros(nn), np.ones(m)])
        status, iters = self._iterate(A_full, phase1_cost, lo_full, hi_full, x, basis, at_upper)
        if status != OPTIMAL:
            return LPResult(status, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), iters)
        if x[nn:].sum() > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
            return LPResult(INFEASIBLE, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), iters)
        # pin artificials to zero for phase two
        hi_full[nn:] = 0.0
        x[nn:] = 0.0
        phase2_cost = np.concatenate([cost, np.zeros(m)])
        status, iters2 = self._iterate(A_full, phase2_cost, lo_full, hi_full, x, basis, at_upper)
        iters += iters2
        if status != OPTIMAL:
            return LPResult(status, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), iters)
        B = A_full[:, basis]
        y = np.linalg.solve(B.T, phase2_cost[basis])
        return LPResult(OPTIMAL, x[:n].copy(), float(c @ x[:n]), y[:m_ub].copy(), y[m_ub:].copy(), iters)

    def _iterate(self, A, cost, lo, hi, x, basis, at_upper):
        tol = self.tol
        m, ntot = A.shape
        degenerate_run = 0
        for it in range(self.max_iter):
            B = A[:, basis]
            try:
                y = np.linalg.solve(B.T, cost[basis])
            except np.linalg.LinAlgError:
                return ITERATION_LIMIT, it
            d = cost - A.T @ y
            in_basis = np.zeros(ntot, dtype=bool)
            in_basis[basis] = True
            fixed = hi - lo <= tol
            can_up = ~in_basis & ~fixed & ~at_upper & (d < -tol)
            can_down = ~in_basis & ~fixed & at_upper & (d > tol)
            candidates = np.flatnonzero(can_up | can_down)
            if candidates.size == 0:
                return OPTIMAL, it
            if degenerate_run >= self.degenerate_switch:
                j = int(candidates[0])  # Bland
            else:
                j = int(candidates[np.argmax(np.abs(d[candidates]))])
            direction = 1.0 if can_up[j] else -1.0
            w = np.linalg.solve(B, A[:, j])
            # x_B(t) = x_B - direction * t * w
            delta = direction * w
            step = hi[j] - lo[j]
            leave = -1
            leave_to_upper = False
            xb = x[basis]
            lob, hib = lo[basis], hi[basis]
            for r in range(m):
                if delta[r] > tol:
                    t = (xb[r] - lob[r]) / delta[r]
                    to_upper = False
                elif delta[r] < -tol and np.isfinite(hib[r]):
                    t = (hib[r] - xb[r]) / -delta[r]
                    to_upper = True
                else:
                    continue
                t = max(t, 0.0)
                better = t < step - tol
                tie = abs(t - step) <= tol and leave >= 0 and basis[r] < basis[leave]
                if better or tie:
                    step, leave, leave_to_upper = t, r, to_upper
            if not np.isfinite(step):
                return UNBOUNDED, it
            degenerate_run = degenerate_run + 1 if step <= tol else 0
            x[j] += direction * step
            x[basis] = xb - step * delta
            if leave < 0:
                at_upper[j] = not at_upper[j]
                continue
            out = basis[leave]
            x[out] = hi[out] if leave_to_upper else lo[out]
            at_upper[out] = leave_to_upper
            at_upper[j] = False
            basis[leave] = j
        return ITERATION_LIMIT, self.max_iter


def _bounds(bounds, n):
    if bounds is None:
        return np.zeros(n), np.full(n, np.inf)
    if isinstance(bounds, tuple) and len(bounds) == 2 and np.ndim(bounds[0]) <= 1 and not (
            isinstance(bounds[0], tuple)):
        lo = np.broadcast_to(np.asarray(bounds[0] if bounds[0] is not None else 0.0, dtype=float), (n,)).copy()
        hi_raw = bounds[1] if bounds[1] is not None else np.inf
        hi = np.broadcast_to(np.asarray(hi_raw, dtype=float), (n,)).copy()
        return lo, hi
    lo = np.array([0.0 if b[0] is None else b[0] for b in bounds], dtype=float)
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds], dtype=float)
    return lo, hi


def solve_highs(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
    c = np.asarray(c, dtype=float)
    n = c.size
    lo, hi = _bounds(bounds, n)
    A_ub2, A_eq2 = _as2d(A_ub, n), _as2d(A_eq, n)
    m_ub, m_eq = A_ub2.shape[0], A_eq2.shape[0]
    res = linprog(c, A_ub=A_ub2 if m_ub else None, b_ub=b_ub if m_ub else None,
                  A_eq=A_eq2 if m_eq else None, b_eq=b_eq if m_eq else None,
                  bounds=np.column_stack([lo, hi]), method="highs")
    if res.status == 2:
        return LPResult(INFEASIBLE, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), res.nit)
    if res.status == 3:
        return LPResult(UNBOUNDED, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), res.nit)
    if res.status != 0:
        return LPResult(ITERATION_LIMIT, None, np.nan, np.zeros(m_ub), np.zeros(m_eq), res.nit)
    duals_ub = res.ineqlin.marginals if m_ub else np.zeros(0)
    duals_eq = res.eqlin.marginals if m_eq else np.zeros(0)
    return LPResult(OPTIMAL, res.x, float(res.fun), np.asarray(duals_ub), np.asarray(duals_eq), res.nit)


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None, method="highs"):
    if method == "highs":
        return solve_highs(c, A_ub, b_ub, A_eq, b_eq, bounds)
    if method == "simplex":
        return BoundedSimplex().solve(c, A_ub, b_ub, A_eq, b_eq, bounds)
    raise ValueError(f"unknown LP method {method!r}")


def complementary_slackness_gap(result, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
    """Largest violation of primal/dual complementary slackness for an optimal result."""
    c = np.asarray(c, dtype=float)
    n = c.size
    lo, hi = _bounds(bounds, n)
    A_ub, A_eq = _as2d(A_ub, n), _as2d(A_eq, n)
    x = result.x
    gap = 0.0
    if A_ub.shape[0]:
        slack = np.asarray(b_ub, dtype=float) - A_ub @ x
        gap = max(gap, float(np.max(np.abs(slack * result.duals_ub))))
        gap = max(gap, float(np.max(result.duals_ub, initial=0.0)))  # sign feasibility
    reduced = c - A_ub.T @ result.duals_ub - A_eq.T @ result.duals_eq
    # reduced cost must be >= 0 at lower bound, <= 0 at upper bound, 0 strictly inside
    at_lo = np.abs(x - lo) <= 1e-9
    at_hi = np.isfinite(hi) & (np.abs(x - hi) <= 1e-9)
    inside = ~at_lo & ~at_hi
    viol = np.where(inside, np.abs(reduced), 0.0)
    viol = np.maximum(viol, np.where(at_lo & ~at_hi, np.maximum(0.0, -reduced), 0.0))
    viol = np.maximum(viol, np.where(at_hi & ~at_lo, np.maximum(0.0, reduced), 0.0))
    return max(gap, float(viol.max(initial=0.0)))
