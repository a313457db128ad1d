"""Independent brute-force oracles shared by the test-suite."""
import itertools

import numpy as np

from sentinel_sim.revenue import revenue_efficiency


def compositions(n, k):
    """All k-tuples of non-negative integers summing to n."""
    if k == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in compositions(n - first, k - 1):
            yield (first,) + rest


def exhaustive_plan(R, A, S, D, caps, curve, u_cap):
    """Best planned revenue over integer assignments onto alive serviceable cells.

    Returns (best value, best x) or (None, None) when no assignment satisfies
    the demand equalities and the utilization cap.
    """
    E, M, I = A.shape
    cells = [(m, i) for m in range(M) for i in range(I) if R[m, i] > 0]
    options = []
    for m, i in cells:
        eligible = [e for e in range(E) if D[e] and S[e, m, i]]
        if not eligible:
            return None, None
        opts = []
        for comp in compositions(int(R[m, i]), len(eligible)):
            v = np.zeros(E)
            for e, c in zip(eligible, comp):
                v[e] = c
            opts.append(v * A[:, m, i])
        options.append((np.array(opts), eligible, m, i))
    best, best_choice = None, None
    limit = u_cap * caps + 1e-9
    for choice in itertools.product(*[range(len(o[0])) for o in options]):
        load = np.zeros(E)
        for (opts, _, _, _), k in zip(options, choice):
            load += opts[k]
        if np.any(load > limit):
            continue
        val = float((np.asarray(D) * revenue_efficiency(curve, load / caps)).sum())
        if best is None or val > best:
            best, best_choice = val, choice
    if best is None:
        return None, None
    x = np.zeros((E, M, I), dtype=np.int64)
    for (opts, _, m, i), k in zip(options, best_choice):
        x[:, m, i] = np.rint(np.divide(opts[k], A[:, m, i], out=np.zeros(E), where=A[:, m, i] > 0))
    return best, x


def tiny_instance(rng):
    """Random feasible-looking tiny planning instance (rejection happens in the caller)."""
    E = int(rng.integers(1, 4))
    M = int(rng.integers(1, 3))
    I = int(rng.integers(1, 3))
    total = int(rng.integers(1, 13))
    R = np.zeros((M, I), dtype=np.int64)
    for _ in range(total):
        R[rng.integers(M), rng.integers(I)] += 1
    A = np.round(rng.uniform(1.0, 6.0, size=(E, M, I)), 2)
    S = (rng.random((E, M, I)) < 0.85).astype(np.int8)
    D = (rng.random(E) < 0.9).astype(np.int8)
    if D.sum() == 0:
        D[0] = 1
    caps = np.round(rng.uniform(5.0, 40.0, size=E), 1)
    return R, A, S, D, caps


def flow_dp(supply, capacity, cost, arc):
    """Exact (max flow, min cost) for a bipartite network by DP over left nodes.

    The state is the vector of capacity used on every right node; each left
    node enumerates all feasible integer arc-flow vectors.
    """
    supply = [int(s) for s in supply]
    capacity = [int(c) for c in capacity]
    P, E = len(supply), len(capacity)
    W = 10_000
    shape = tuple(c + 1 for c in capacity)
    NEG = -np.inf
    state = np.full(shape, NEG)
    state[(0,) * E] = 0.0
    for p in range(P):
        ranges = [range(min(int(arc[p][e]), capacity[e]) + 1) for e in range(E)]
        new = np.full(shape, NEG)
        for f in itertools.product(*ranges):
            if sum(f) > supply[p]:
                continue
            val = sum(f) * W - sum(fe * cost[p][e] for e, fe in enumerate(f))
            src = tuple(slice(0, shape[e] - f[e]) for e in range(E))
            dst = tuple(slice(f[e], shape[e]) for e in range(E))
            np.maximum(new[dst], state[src] + val, out=new[dst])
        state = new
    best = state.max()
    flow = int(round(best / W))
    # best = flow * W - cost with |cost| < W / 2
    min_cost = flow * W - best
    return flow, float(min_cost)


def straight_rule_stats(window, baseline):
    """Variance gaps per dimension and the Frobenius correlation gap, with plain loops."""
    window = np.asarray(window, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    T, N = window.shape

    def var(col):
        m = sum(col) / T
        return sum((v - m) ** 2 for v in col) / T

    def corr(w, a, b):
        if a == b:
            return 1.0
        ma, mb = w[:, a].mean(), w[:, b].mean()
        num = sum((w[t, a] - ma) * (w[t, b] - mb) for t in range(T))
        den = (sum((w[t, a] - ma) ** 2 for t in range(T)) * sum((w[t, b] - mb) ** 2 for t in range(T))) ** 0.5
        return num / den if den > 1e-12 else 0.0

    var_gap = [abs(var(window[:, n]) - var(baseline[:, n])) for n in range(N)]
    frob = sum((corr(window, a, b) - corr(baseline, a, b)) ** 2 for a in range(N) for b in range(N)) ** 0.5
    return var_gap, frob


def central_difference(loss_fn, params, name, index, step=1e-5):
    """d loss / d params[name][index] by central differences (params restored afterwards)."""
    p = params[name]
    old = p[index]
    p[index] = old + step
    up = loss_fn(params)
    p[index] = old - step
    down = loss_fn(params)
    p[index] = old
    return (up - down) / (2 * step)
