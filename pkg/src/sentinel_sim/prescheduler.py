"""Pre-scheduling: turn a demand forecast and effect estimates into a strategy.

Pipeline per tick: collapse the region axis of A*S into per-(server, category)
expected revenue, approximate the revenue curve by secants on [0, u_opt],
solve the LP over collapsed assignments, round, expand back to regions, and
push the result to the strategy pool.

The Gaussian revenue curve is convex below ``u_opt - sigma``, so the secant
interpolant is not concave on all of [0, u_opt]. The LP therefore uses the
interpolant's concave envelope, and a small best-first branch-and-bound
narrows the utilization range of the server with the largest envelope gap to
either side of a breakpoint. On a single segment the interpolant is linear, so
the search is exact once it runs to completion (or stops at the node budget).
"""
from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .domain import PreSchedule
from .exceptions import Infeasible, ShapeMismatch, StaleStrategy
from .optim.lp import solve_lp
from .revenue import RevenueCurve, revenue_efficiency


# ---------------------------------------------------------------------------
# collapse


def demand_weights(R_hat):
    """Regional mix per category (M x I); categories without demand get uniform weights."""
    R_hat = np.asarray(R_hat, dtype=float)
    tot = R_hat.sum(axis=0)
    M = R_hat.shape[0]
    return np.where(tot > 0, R_hat / np.where(tot > 0, tot, 1.0), 1.0 / M)


def collapse_effects(A, S, R_hat, seed=None, n_samples=None):
    """Expected A*S over the forecast regional mix of each category (E x I).

    With ``n_samples`` the expectation is estimated by drawing regions from the
    mix and serviceability from ``S`` read as probabilities.
    """
    A = np.asarray(A, dtype=float)
    S = np.asarray(S, dtype=float)
    R_hat = np.asarray(R_hat, dtype=float)
    if A.shape != S.shape or A.ndim != 3 or R_hat.shape != A.shape[1:]:
        raise ShapeMismatch(f"A {A.shape}, S {S.shape} and R_hat {R_hat.shape} are inconsistent")
    w = demand_weights(R_hat)
    if n_samples is None:
        return np.einsum("mi,emi->ei", w, A * S)
    rng = np.random.default_rng(seed)
    E, M, I = A.shape
    out = np.empty((E, I))
    for i in range(I):
        regions = rng.choice(M, size=n_samples, p=w[:, i])
        keep = rng.random((E, n_samples)) < S[:, regions, i]
        out[:, i] = (A[:, regions, i] * keep).mean(axis=1)
    return out


def serviceable_share(S, R_hat):
    """Share of each category's forecast demand that server e can serve (E x I)."""
    return np.einsum("mi,emi->ei", demand_weights(R_hat), np.asarray(S, dtype=float))


# ---------------------------------------------------------------------------
# secants


@dataclass(frozen=True)
class SecantApprox:
    breakpoints: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    # concave envelope of the interpolant, used as LP epigraph cuts
    hull_slopes: np.ndarray
    hull_intercepts: np.ndarray
    tangent: float
    curve: RevenueCurve

    @property
    def J(self):
        return self.slopes.size

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.interp(u, self.breakpoints, self.values)

    def envelope(self, u):
        u = np.asarray(u, dtype=float)
        return np.min(self.hull_slopes[:, None] * u.ravel()[None, :] + self.hull_intercepts[:, None],
                      axis=0).reshape(u.shape)

    def max_gap(self, n_grid=10_000):
        grid = np.linspace(self.breakpoints[0], self.breakpoints[-1], n_grid)
        return float(np.max(np.abs(revenue_efficiency(self.curve, grid) - self(grid))))


def build_secants(curve: RevenueCurve, J=16, upper=None):
    """Chords of the revenue curve between J+1 equally spaced breakpoints on [0, upper]."""
    if J < 2:
        raise ValueError("need at least two segments")
    upper = curve.u_opt if upper is None else float(upper)
    u = np.linspace(0.0, upper, J + 1)
    f = revenue_efficiency(curve, u)
    slopes = np.diff(f) / np.diff(u)
    intercepts = f[:-1] - slopes * u[:-1]
    hull = _upper_hull(u, f)
    hu, hf = u[hull], f[hull]
    hs = np.diff(hf) / np.diff(hu)
    hb = hf[:-1] - hs * hu[:-1]
    return SecantApprox(u, f, slopes, intercepts, hs, hb, float(hu[1]), curve)


def _upper_hull(x, y):
    hull = []
    for k in range(x.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[k] - y[a]) - (y[b] - y[a]) * (x[k] - x[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


# ---------------------------------------------------------------------------
# LP


@dataclass
class PlanProblem:
    """Collapsed planning problem for one tick."""

    load: np.ndarray            # effective Mbps per request (E x I), inf where unusable
    demand: np.ndarray          # per-category demand (I)
    upper: np.ndarray           # per-(e, i) assignment bound (E x I)
    capacities: np.ndarray      # B_e
    weights: np.ndarray         # objective weight per server (0 for unavailable)
    u_cap: float
    secants: SecantApprox

    @property
    def shape(self):
        return self.load.shape

    def utilization(self, xbar):
        return (np.where(np.isfinite(self.load), self.load, 0.0) * xbar).sum(axis=1) / self.capacities

    def objective(self, xbar, exact=False):
        u = self.utilization(xbar)
        f = revenue_efficiency(self.secants.curve, u) if exact else self.secants(u)
        return float((self.weights * f).sum())


@dataclass
class PlanSolution:
    xbar: np.ndarray
    objective: float            # interpolant objective of xbar
    bound: float                # best LP bound seen
    nodes: int
    fraction: np.ndarray        # scheduled share of each category's demand
    partial: bool = False


class _LPBuilder:
    def __init__(self, problem: PlanProblem):
        p = problem
        E, I = p.shape
        self.p = p
        usable = np.isfinite(p.load) & (p.upper > 0) & (p.weights[:, None] > 0)
        self.var_e, self.var_i = np.nonzero(usable)
        self.nx = self.var_e.size
        self.servers = np.unique(self.var_e)
        self.y_of = {int(e): self.nx + k for k, e in enumerate(self.servers)}
        self.n = self.nx + self.servers.size
        load = p.load[self.var_e, self.var_i]
        self.coef_u = load / p.capacities[self.var_e]
        K = p.secants.hull_slopes.size
        rows, cols, vals, rhs = [], [], [], []
        r = 0
        # capacity: sum_i load * x <= u_cap * B
        for e in self.servers:
            idx = np.flatnonzero(self.var_e == e)
            rows += [r] * idx.size
            cols += idx.tolist()
            vals += self.coef_u[idx].tolist()
            rhs.append(p.u_cap)
            r += 1
        # epigraph: y_e - a_k u_e <= b_k
        for e in self.servers:
            idx = np.flatnonzero(self.var_e == e)
            for k in range(K):
                a = p.secants.hull_slopes[k]
                rows += [r] * (idx.size + 1)
                cols += idx.tolist() + [self.y_of[int(e)]]
                vals += (-a * self.coef_u[idx]).tolist() + [1.0]
                rhs.append(p.secants.hull_intercepts[k])
                r += 1
        self.base_rows = (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals))
        self.base_rhs = np.array(rhs)
        self.n_ub = r
        self.c = np.zeros(self.n)
        for e in self.servers:
            self.c[self.y_of[int(e)]] = -p.weights[e]
        eq_rows = self.var_i
        self.A_eq = sparse.csr_matrix((np.ones(self.nx), (eq_rows, np.arange(self.nx))), shape=(I, self.n))
        self.lo = np.zeros(self.n)
        self.hi = np.concatenate([p.upper[self.var_e, self.var_i], np.ones(self.servers.size)])
        self._cut_cache = {}

    def cuts(self, a, b):
        """Concave envelope of the interpolant restricted to breakpoints a..b (slopes, intercepts)."""
        key = (a, b)
        if key not in self._cut_cache:
            sec = self.p.secants
            u, f = sec.breakpoints[a:b + 1], sec.values[a:b + 1]
            if u.size < 2:
                self._cut_cache[key] = (np.zeros(1), f.copy())
            else:
                hull = _upper_hull(u, f)
                hs = np.diff(f[hull]) / np.diff(u[hull])
                self._cut_cache[key] = (hs, f[hull][:-1] - hs * u[hull][:-1])
        return self._cut_cache[key]

    def solve(self, demand, intervals=None, method="highs", theta=False):
        """LP with each server in ``intervals`` held to utilization between two breakpoints.

        ``intervals`` maps server -> (a, b) breakpoint indices; (0, 0) idles the
        server. Restricted servers also get the envelope of the interpolant on
        their own interval as extra epigraph cuts.
        """
        rows, cols, vals = self.base_rows
        rhs = self.base_rhs
        bp = self.p.secants.breakpoints
        extra_r, extra_c, extra_v, extra_rhs = [], [], [], []
        r = self.n_ub
        hi = self.hi.copy()
        for e, (a, b) in (intervals or {}).items():
            idx = np.flatnonzero(self.var_e == e)
            if b == 0:
                hi[:self.nx][self.var_e == e] = 0.0
                continue
            if a > 0:
                extra_r += [r] * idx.size
                extra_c += idx.tolist()
                extra_v += (-self.coef_u[idx]).tolist()
                extra_rhs.append(-bp[a])
                r += 1
            if b < bp.size - 1:
                extra_r += [r] * idx.size
                extra_c += idx.tolist()
                extra_v += self.coef_u[idx].tolist()
                extra_rhs.append(bp[b])
                r += 1
            for slope, icpt in zip(*self.cuts(a, b)):
                extra_r += [r] * (idx.size + 1)
                extra_c += idx.tolist() + [self.y_of[int(e)]]
                extra_v += (-slope * self.coef_u[idx]).tolist() + [1.0]
                extra_rhs.append(icpt)
                r += 1
        n = self.n + (1 if theta else 0)
        A_ub = sparse.csr_matrix((np.concatenate([vals, extra_v]),
                                  (np.concatenate([rows, extra_r]).astype(np.int64),
                                   np.concatenate([cols, extra_c]).astype(np.int64))), shape=(r, n))
        b_ub = np.concatenate([rhs, extra_rhs])
        lo = self.lo
        if theta:
            # maximize theta subject to sum_e x = theta * demand
            c = np.zeros(n)
            c[-1] = -1.0
            A_eq = sparse.hstack([self.A_eq, sparse.csr_matrix(-np.asarray(demand, dtype=float)[:, None])]).tocsr()
            b_eq = np.zeros(A_eq.shape[0])
            lo = np.concatenate([lo, [0.0]])
            hi = np.concatenate([hi, [1.0]])
        else:
            c = self.c
            A_eq, b_eq = self.A_eq, np.asarray(demand, dtype=float)
        if method != "highs":
            A_ub, A_eq = A_ub.toarray(), A_eq.toarray()
        return solve_lp(c, A_ub, b_ub, A_eq, b_eq, (lo, hi), method=method)

    def xbar(self, x):
        out = np.zeros(self.p.shape)
        out[self.var_e, self.var_i] = x[:self.nx]
        return out


def solve_plan(problem: PlanProblem, max_nodes=32, method="highs", tol=1e-9):
    """Maximize the weighted interpolant revenue; raises :class:`Infeasible` with fractions."""
    builder = _LPBuilder(problem)
    demand = problem.demand.astype(float)
    E, I = problem.shape
    reachable = np.zeros(I, dtype=bool)
    reachable[builder.var_i] = True
    fraction = np.where(reachable | (demand == 0), 1.0, 0.0)
    demand_eff = demand * fraction
    root = builder.solve(demand_eff, method=method)
    partial = bool(np.any(fraction < 1.0))
    if not root.success:
        res = builder.solve(demand_eff, method=method, theta=True)
        theta = float(res.x[-1]) if res.success else 0.0
        # back off slightly so the scaled problem is strictly feasible
        theta = max(0.0, theta - 1e-9)
        fraction = fraction * theta
        demand_eff = demand * fraction
        root = builder.solve(demand_eff, method=method)
        partial = True
        if not root.success:
            fraction = np.zeros(I)
            demand_eff = np.zeros(I)
            root = builder.solve(demand_eff, method=method)
    bp = problem.secants.breakpoints
    last = bp.size - 1
    counter = 0
    best_x, best_val = None, -np.inf
    best_bound = -root.fun
    heap = [(root.fun, counter, {}, root)]
    nodes = 0
    while heap and nodes < max_nodes:
        neg_bound, _, intervals, res = heapq.heappop(heap)
        nodes += 1
        if -neg_bound <= best_val + tol * max(1.0, abs(best_val)):
            break
        xbar = builder.xbar(res.x)
        val = problem.objective(xbar)
        if val > best_val:
            best_x, best_val = xbar, val
        if nodes >= max_nodes:
            continue
        u = problem.utilization(xbar)
        gap = np.zeros(E)
        for e in builder.servers:
            a, b = intervals.get(int(e), (0, last))
            if b - a < 2:
                continue
            slopes, icpts = builder.cuts(a, b)
            gap[e] = problem.weights[e] * (np.min(slopes * u[e] + icpts) - problem.secants(u[e]))
        if gap.max() <= tol:
            continue
        e = int(np.argmax(gap))
        a, b = intervals.get(e, (0, last))
        # split at the breakpoint closest to the current utilization, strictly inside (a, b)
        k = int(np.clip(np.rint(np.interp(u[e], bp, np.arange(bp.size))), a + 1, b - 1))
        for child in ((a, k), (k, b)):
            child_intervals = {**intervals, e: child}
            res_c = builder.solve(demand_eff, intervals=child_intervals, method=method)
            if res_c.success and -res_c.fun > best_val + tol:
                counter += 1
                heapq.heappush(heap, (res_c.fun, counter, child_intervals, res_c))
    if heap:
        best_bound = max(best_val, -min(h[0] for h in heap))
    else:
        best_bound = best_val
    return PlanSolution(best_x, best_val, best_bound, nodes, fraction, partial)


# ---------------------------------------------------------------------------
# rounding and expansion


def largest_remainder(values, total):
    """Integers summing to ``total`` closest to ``values``; ties go to lower index."""
    values = np.asarray(values, dtype=float)
    total = int(total)
    base = np.floor(values + 1e-9).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = values - base
        order = np.lexsort((np.arange(values.size), -frac))
        base[order[:short]] += 1
    elif short < 0:
        frac = values - base
        order = np.lexsort((np.arange(values.size), frac))
        for k in order:
            if short == 0:
                break
            take = min(base[k], -short)
            base[k] -= take
            short += take
    return base


def integer_demand(R_hat, fraction=None):
    """Per-(m, i) integer demand whose category totals are floor(fraction * sum_m R_hat)."""
    R_hat = np.asarray(R_hat, dtype=float)
    M, I = R_hat.shape
    fraction = np.ones(I) if fraction is None else np.asarray(fraction, dtype=float)
    out = np.zeros((M, I), dtype=np.int64)
    for i in range(I):
        col = R_hat[:, i] * fraction[i]
        out[:, i] = largest_remainder(col, np.floor(col.sum() + 1e-9))
    return out


def round_and_expand(xbar, R_hat, S, A=None, capacities=None, availability=None, u_cap=None, curve=None,
                     weights=None, fraction=None, tick=0, max_moves=200,
                     repair_max_cells=256):
    """Integer E x M x I strategy from a collapsed solution.

    Per category the collapsed amounts are rounded by largest remainder, each
    server's amount is split over regions in proportion to forecast demand
    restricted to serviceable regions, and the split is integerized by largest
    remainder. When ``A`` and ``capacities`` are given, a repair pass then
    enforces the demand equalities and the utilization cap exactly; demand
    that fits nowhere is reported as residual.
    """
    xbar = np.asarray(xbar, dtype=float)
    S = np.asarray(S)
    R_hat = np.asarray(R_hat, dtype=float)
    E, I = xbar.shape
    M = R_hat.shape[0]
    target = integer_demand(R_hat, fraction)
    totals = target.sum(axis=0)
    x = np.zeros((E, M, I), dtype=np.int64)
    for i in range(I):
        col = xbar[:, i]
        if totals[i] == 0:
            continue
        if col.sum() <= 0:
            continue
        scaled = col * (totals[i] / col.sum()) if abs(col.sum() - totals[i]) > 1e-6 else col
        counts = largest_remainder(scaled, totals[i])
        for e in np.flatnonzero(counts):
            w = target[:, i] * (S[e, :, i] > 0)
            if w.sum() <= 0:
                w = (S[e, :, i] > 0).astype(float)
            if w.sum() <= 0:
                continue
            x[e, :, i] = largest_remainder(counts[e] * w / w.sum(), counts[e])
    residual = np.zeros((M, I), dtype=np.int64)
    if A is None or capacities is None:
        return PreSchedule(x, np.maximum(xbar, 0.0), tick, residual, False)
    A = np.asarray(A, dtype=float)
    caps = np.asarray(capacities, dtype=float)
    alive = np.ones(E, dtype=bool) if availability is None else np.asarray(availability).astype(bool)
    u_cap = 1.0 if u_cap is None else float(u_cap)
    curve = curve or RevenueCurve()
    weights = caps if weights is None else np.asarray(weights, dtype=float)
    limit = u_cap * caps + 1e-9
    x = _repair(x, target, A, S, caps, alive, limit, curve, weights, residual)
    full = integer_demand(R_hat)
    if not np.array_equal(x.sum(axis=0), full) and x.size <= repair_max_cells:
        fixed = integer_repair(x, full, A, S, alive, limit)
        if fixed is not None:
            x = fixed
    x = improve_moves(x, A, S, caps, alive, limit, curve, weights, max_moves)
    residual = full - x.sum(axis=0)
    partial = bool(residual.sum() > 0)
    return PreSchedule(x, np.maximum(xbar, 0.0), tick, residual, partial)


def improve_moves(x, A, S, caps, alive, limit, curve, weights, max_moves=200):
    """Hill-climb on single-unit moves between servers within a (region, category) cell."""
    E, M, I = x.shape
    ok_cell = (S > 0) & alive[:, None, None] & (A > 0)
    load = np.einsum("emi,emi->e", x, A)
    for _ in range(max_moves):
        f_now = weights * revenue_efficiency(curve, load / caps)
        # loss of removing one unit of (e, m, i), gain of adding one to (e', m, i)
        f_minus = weights[:, None, None] * revenue_efficiency(curve, (load[:, None, None] - A) / caps[:, None, None])
        f_plus = weights[:, None, None] * revenue_efficiency(curve, (load[:, None, None] + A) / caps[:, None, None])
        remove = np.where(x > 0, f_minus - f_now[:, None, None], -np.inf)
        fits = ok_cell & (load[:, None, None] + A <= limit[:, None, None])
        add = np.where(fits, f_plus - f_now[:, None, None], -np.inf)
        # best source and best target per cell; a move needs distinct servers
        src = np.argmax(remove, axis=0)
        order = np.argsort(-add, axis=0, kind="stable")
        dst = np.where(order[0] == src, order[min(1, E - 1)], order[0])
        mm, ii = np.meshgrid(np.arange(M), np.arange(I), indexing="ij")
        gain = remove[src, mm, ii] + add[dst, mm, ii]
        gain = np.where(dst == src, -np.inf, gain)
        k = int(np.argmax(gain))
        m, i = divmod(k, I)
        if not gain[m, i] > 1e-12:
            break
        e_from, e_to = int(src[m, i]), int(dst[m, i])
        x[e_from, m, i] -= 1
        x[e_to, m, i] += 1
        load[e_from] -= A[e_from, m, i]
        load[e_to] += A[e_to, m, i]
    return x


def integer_repair(x0, target, A, S, alive, limit, time_limit=1.0):
    """Closest integer strategy meeting demand and capacity exactly, or None.

    Minimizes the L1 distance to ``x0`` with a branch-and-cut MILP solve.
    """
    E, M, I = x0.shape
    cells = np.argwhere((S > 0) & alive[:, None, None])
    n = len(cells)
    if n == 0:
        return None
    e_idx, m_idx, i_idx = cells[:, 0], cells[:, 1], cells[:, 2]
    cell_of = m_idx * I + i_idx
    a = A[e_idx, m_idx, i_idx]
    x_prev = x0[e_idx, m_idx, i_idx].astype(float)
    # variables: x (n), d (n) with d >= |x - x_prev|
    c = np.concatenate([np.zeros(n), np.ones(n)])
    eye = sparse.identity(n, format="csr")
    demand = sparse.csr_matrix((np.ones(n), (cell_of, np.arange(n))), shape=(M * I, n))
    cap = sparse.csr_matrix((a, (e_idx, np.arange(n))), shape=(E, n))
    zero = sparse.csr_matrix((M * I, n))
    zero_e = sparse.csr_matrix((E, n))
    A_rows = sparse.vstack([
        sparse.hstack([demand, zero]),
        sparse.hstack([cap, zero_e]),
        sparse.hstack([eye, -eye]),
        sparse.hstack([-eye, -eye]),
    ]).tocsr()
    lo = np.concatenate([target.ravel(), np.full(E, -np.inf), np.full(n, -np.inf), np.full(n, -np.inf)])
    hi = np.concatenate([target.ravel(), limit, x_prev, -x_prev])
    integrality = np.concatenate([np.ones(n), np.zeros(n)])
    res = milp(c, constraints=LinearConstraint(A_rows, lo, hi), integrality=integrality,
               bounds=Bounds(np.zeros(2 * n), np.full(2 * n, np.inf)),
               options={"time_limit": time_limit})
    if res.x is None or res.status not in (0, 1):
        return None
    x = np.zeros_like(x0)
    x[e_idx, m_idx, i_idx] = np.rint(res.x[:n]).astype(np.int64)
    if not np.array_equal(x.sum(axis=0), target) or np.any(np.einsum("emi,emi->e", x, A) > limit):
        return None
    return x


def _repair(x, target, A, S, caps, alive, limit, curve, weights, residual):
    E, M, I = x.shape
    x[~alive] = 0
    x[S == 0] = 0
    # surplus: drop units from the fullest servers of the cell
    col = x.sum(axis=0)
    for m, i in zip(*np.nonzero(col > target)):
        extra = col[m, i] - target[m, i]
        while extra > 0:
            e = int(np.argmax(x[:, m, i]))
            take = min(extra, x[e, m, i])
            x[e, m, i] -= take
            extra -= take
    # capacity: shed the heaviest cells first
    load = np.einsum("emi,emi->e", x, A)
    for e in np.flatnonzero(load > limit):
        while load[e] > limit[e]:
            cells = np.argwhere(x[e] > 0)
            heavy = max(map(tuple, cells), key=lambda c: (A[e, c[0], c[1]], -c[0], -c[1]))
            x[e][heavy] -= 1
            load[e] -= A[e][heavy]
    # deficits: best marginal revenue among feasible servers
    col = x.sum(axis=0)
    deficit = target - col
    for i in range(I):
        for m in range(M):
            for _ in range(int(deficit[m, i])):
                ok = alive & (S[:, m, i] > 0) & (load + A[:, m, i] <= limit)
                if not ok.any():
                    residual[m, i] += 1
                    continue
                cand = np.flatnonzero(ok)
                gain = weights[cand] * (revenue_efficiency(curve, (load[cand] + A[cand, m, i]) / caps[cand])
                                        - revenue_efficiency(curve, load[cand] / caps[cand]))
                e = int(cand[np.argmax(gain)])
                x[e, m, i] += 1
                load[e] += A[e, m, i]
    return x


# ---------------------------------------------------------------------------
# strategy pool and orchestration


class StrategyPool:
    """Stack of strategies keyed by tick with atomic push/replace."""

    def __init__(self, max_depth=64):
        self._stack = []
        self._lock = threading.Lock()
        self.max_depth = max_depth

    def push(self, ps: PreSchedule):
        with self._lock:
            self._stack = [p for p in self._stack if p.built_for_tick != ps.built_for_tick]
            self._stack.append(ps)
            if len(self._stack) > self.max_depth:
                self._stack = self._stack[-self.max_depth:]

    def pop(self):
        with self._lock:
            if not self._stack:
                raise StaleStrategy("strategy pool is empty")
            return self._stack.pop()

    def get(self, tick):
        with self._lock:
            for ps in reversed(self._stack):
                if ps.built_for_tick == tick:
                    return ps
        raise StaleStrategy(f"no strategy built for tick {tick}")

    def __len__(self):
        return len(self._stack)


@dataclass
class PlannerConfig:
    segments: int = 16
    max_nodes: int = 32
    max_moves: int = 200
    # exact integer repair is only attempted on small problems
    repair_max_cells: int = 256
    # "capacity" weighs each server by B_e (realized revenue); "unit" uses F_r alone
    weighting: str = "capacity"
    lp_method: str = "highs"
    u_cap: Optional[float] = None   # defaults to the curve's u_opt


def plan_problem(R_hat, effects, availability, capacities, curve, config=PlannerConfig(), secants=None):
    A = np.asarray(effects.A, dtype=float)
    S = np.asarray(effects.S)
    R_hat = np.asarray(R_hat, dtype=float)
    E, M, I = A.shape
    if R_hat.shape != (M, I) or np.asarray(availability).shape != (E,):
        raise ShapeMismatch("forecast or availability does not match the effect matrices")
    caps = np.asarray(capacities, dtype=float)
    abar = collapse_effects(A, S, R_hat)
    rho = serviceable_share(S, R_hat)
    with np.errstate(divide="ignore", invalid="ignore"):
        load = np.where((rho > 0) & (abar > 0), abar / rho, np.inf)
    alive = np.asarray(availability).astype(bool)
    load[~alive] = np.inf
    upper = np.einsum("mi,emi->ei", R_hat, (S > 0).astype(float))
    if config.weighting == "capacity":
        weights = caps * alive
    elif config.weighting == "unit":
        weights = alive.astype(float)
    else:
        raise ValueError(f"unknown weighting {config.weighting!r}")
    secants = secants or build_secants(curve, config.segments)
    u_cap = curve.u_opt if config.u_cap is None else config.u_cap
    demand = np.floor(R_hat.sum(axis=0) + 1e-9)
    return PlanProblem(load, demand, upper, caps, weights, u_cap, secants), abar


def strategy_value(ps, A, capacities, weights, curve):
    """Weighted true revenue efficiency of an integer strategy."""
    u = ps.implied_utilization(A, capacities)
    return float((np.asarray(weights) * revenue_efficiency(curve, u)).sum())


def pre_schedule(tick, R_hat, effects, availability, capacities, curve, config=PlannerConfig(), pool=None,
                 secants=None):
    """Full pipeline for ``tick``; pushes the strategy to ``pool`` when given.

    Besides the rounding of the best LP point, a consolidated variant that idles
    every server planned inside the envelope's chord region (and lets the
    repair pass re-place that demand greedily) is evaluated; the better of the
    two under the true curve is kept. A partial strategy (``partial=True``
    with a residual) is produced when the forecast exceeds what the available
    serviceable capacity can take at the utilization cap.
    """
    d = np.asarray(getattr(availability, "d", availability))
    problem, abar = plan_problem(R_hat, effects, d, capacities, curve, config, secants)
    sol = solve_plan(problem, max_nodes=config.max_nodes, method=config.lp_method)
    args = (R_hat, effects.S, effects.A, capacities, d, problem.u_cap, curve, problem.weights, sol.fraction, tick,
            config.max_moves, config.repair_max_cells)
    ps = round_and_expand(sol.xbar, *args)
    u = problem.utilization(sol.xbar)
    chord = (u > 1e-9) & (u < problem.secants.tangent - 1e-9)
    if chord.any():
        xbar = sol.xbar.copy()
        xbar[chord] = 0.0
        alt = round_and_expand(xbar, *args)
        value = strategy_value(ps, effects.A, capacities, problem.weights, curve)
        alt_value = strategy_value(alt, effects.A, capacities, problem.weights, curve)
        if alt_value > value + 1e-12 and alt.residual.sum() <= ps.residual.sum():
            ps = alt
    if pool is not None:
        pool.push(ps)
    return ps


def solve_or_raise(problem, **kw):
    """Like :func:`solve_plan` but raises :class:`Infeasible` when demand had to be scaled."""
    sol = solve_plan(problem, **kw)
    if sol.partial:
        raise Infeasible("forecast demand exceeds capped serviceable capacity", fraction=sol.fraction)
    return sol
