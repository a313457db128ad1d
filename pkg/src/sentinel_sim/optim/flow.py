"""Min-cost max-flow by successive shortest paths.

:class:`MinCostFlow` is the general adjacency-list solver (Bellman-Ford for the
initial potentials, Dijkstra with reduced costs afterwards).
:func:`bipartite_min_cost_flow` solves the dense source -> left -> right -> sink
transportation shape used by the max-flow baseline with numpy relaxations;
it is much faster per tick and is cross-checked against the general solver.
"""
from __future__ import annotations

import heapq

import numpy as np

INF = float("inf")


class Edge:
    __slots__ = ("to", "cap", "cost", "flow", "rev")

    def __init__(self, to, cap, cost, rev):
        self.to = to
        self.cap = cap
        self.cost = cost
        self.flow = 0
        self.rev = rev

    @property
    def residual(self):
        return self.cap - self.flow


class MinCostFlow:
    def __init__(self, n):
        self.n = n
        self.graph = [[] for _ in range(n)]
        self._edges = []

    def add_edge(self, u, v, cap, cost):
        """Add arc u -> v; returns a handle usable with :meth:`flow_on`."""
        fwd = Edge(v, cap, cost, len(self.graph[v]))
        bwd = Edge(u, 0, -cost, len(self.graph[u]))
        self.graph[u].append(fwd)
        self.graph[v].append(bwd)
        self._edges.append((u, len(self.graph[u]) - 1))
        return len(self._edges) - 1

    def flow_on(self, handle):
        u, k = self._edges[handle]
        return self.graph[u][k].flow

    def _bellman_ford(self, s):
        dist = [INF] * self.n
        dist[s] = 0
        for _ in range(self.n - 1):
            changed = False
            for u in range(self.n):
                if dist[u] == INF:
                    continue
                for e in self.graph[u]:
                    if e.residual > 0 and dist[u] + e.cost < dist[e.to]:
                        dist[e.to] = dist[u] + e.cost
                        changed = True
            if not changed:
                break
        return dist

    def solve(self, s, t, max_flow=INF):
        """Push up to ``max_flow`` from s to t at minimum cost; returns (flow, cost)."""
        potential = self._bellman_ford(s)
        potential = [p if p < INF else 0 for p in potential]
        flow, cost = 0, 0
        while flow < max_flow:
            dist = [INF] * self.n
            prev = [None] * self.n
            dist[s] = 0
            heap = [(0, s)]
            while heap:
                d, u = heapq.heappop(heap)
                if d > dist[u]:
                    continue
                for k, e in enumerate(self.graph[u]):
                    if e.residual <= 0:
                        continue
                    nd = d + e.cost + potential[u] - potential[e.to]
                    if nd < dist[e.to] - 1e-12:
                        dist[e.to] = nd
                        prev[e.to] = (u, k)
                        heapq.heappush(heap, (nd, e.to))
            if dist[t] == INF:
                break
            for v in range(self.n):
                if dist[v] < INF:
                    potential[v] += dist[v]
            push = max_flow - flow
            v = t
            while v != s:
                u, k = prev[v]
                push = min(push, self.graph[u][k].residual)
                v = u
            v = t
            while v != s:
                u, k = prev[v]
                e = self.graph[u][k]
                e.flow += push
                self.graph[v][e.rev].flow -= push
                cost += push * e.cost
                v = u
            flow += push
        return flow, cost

    def has_negative_cycle(self, tol=1e-9):
        """True iff the residual graph contains a negative-cost cycle."""
        dist = [0.0] * self.n
        for _ in range(self.n):
            changed = False
            for u in range(self.n):
                for e in self.graph[u]:
                    if e.residual > 0 and dist[u] + e.cost < dist[e.to] - tol:
                        dist[e.to] = dist[u] + e.cost
                        changed = True
            if not changed:
                return False
        return True


def bipartite_min_cost_flow(supply, capacity, cost, arc_capacity=None):
    """Min-cost max-flow on source -> left (supply) -> right (capacity) -> sink.

    ``cost`` is (P, E); ``arc_capacity`` (P, E) defaults to unbounded. Supplies
    and capacities must be integers for an integral optimum. Returns the flow
    matrix (P, E) as int64.
    """
    supply = np.asarray(supply, dtype=np.int64).copy()
    capacity = np.asarray(capacity, dtype=np.int64).copy()
    cost = np.asarray(cost, dtype=float)
    P, E = cost.shape
    big = int(supply.sum() + capacity.sum() + 1)
    arc = np.full((P, E), big, dtype=np.int64) if arc_capacity is None else np.asarray(
        arc_capacity, dtype=np.int64).copy()
    flow = np.zeros((P, E), dtype=np.int64)
    left_rem = supply
    right_rem = capacity
    n_iter = P + E + 2
    while left_rem.sum() > 0 and right_rem.sum() > 0:
        # Bellman-Ford over left/right nodes; the source reaches left nodes with supply
        d_left = np.where(left_rem > 0, 0.0, INF)
        d_right = np.full(E, INF)
        via_left = np.full(E, -1)
        via_right = np.full(P, -1)
        fwd_ok = arc - flow > 0
        bwd_ok = flow > 0
        fwd_cost = np.where(fwd_ok, cost, INF)
        bwd_cost = np.where(bwd_ok, -cost, INF)
        for _ in range(n_iter):
            cand = d_left[:, None] + fwd_cost
            best = np.argmin(cand, axis=0)
            val = cand[best, np.arange(E)]
            upd = val < d_right - 1e-12
            d_right = np.where(upd, val, d_right)
            via_left = np.where(upd, best, via_left)
            cand2 = d_right[None, :] + bwd_cost
            best2 = np.argmin(cand2, axis=1)
            val2 = cand2[np.arange(P), best2]
            upd2 = val2 < d_left - 1e-12
            d_left = np.where(upd2, val2, d_left)
            via_right = np.where(upd2, best2, via_right)
            if not upd.any() and not upd2.any():
                break
        reach = np.where(right_rem > 0, d_right, INF)
        if not np.isfinite(reach).any():
            break
        # lowest cost, then lowest id
        e = int(np.argmin(reach))
        path = []
        push = int(right_rem[e])
        node_e = e
        seen = set()
        while True:
            p = int(via_left[node_e])
            path.append((p, node_e, 1))
            push = min(push, int(arc[p, node_e] - flow[p, node_e]))
            if via_right[p] < 0 or d_left[p] == 0.0 and left_rem[p] > 0:
                push = min(push, int(left_rem[p]))
                start = p
                break
            prev_e = int(via_right[p])
            if (p, prev_e) in seen:
                raise RuntimeError("cycle in shortest-path tree")
            seen.add((p, prev_e))
            path.append((p, prev_e, -1))
            push = min(push, int(flow[p, prev_e]))
            node_e = prev_e
        for p, q, sgn in path:
            flow[p, q] += sgn * push
        left_rem[start] -= push
        right_rem[e] -= push
    return flow
