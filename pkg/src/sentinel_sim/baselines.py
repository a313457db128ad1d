"""Comparison schedulers. None of them look at device availability or S.

Every scheduler maps one tick's arrivals to an assignment array (-1 = dropped).
Remaining bandwidth restarts at B_e every tick because a tick's placements
make up that tick's whole load.
"""
from __future__ import annotations

import numpy as np

from .optim.flow import bipartite_min_cost_flow
from .postscheduler import fallback_arrays


def origin(regions, nominal, platform):
    """Nearest region, then maximum remaining bandwidth, then lowest id, for every request."""
    n = len(regions)
    remain = platform.capacities.copy()
    demand = np.broadcast_to(np.asarray(nominal, dtype=float)[:, None], (n, platform.E))
    return fallback_arrays(regions, demand, np.ones(platform.E, dtype=bool), remain, platform.hops,
                           platform.server_regions)


def gp(regions, nominal, platform):
    """Nearest server that still has any residual bandwidth; ties by id."""
    remain = platform.capacities.copy()
    srv_region = platform.server_regions
    out = np.full(len(regions), -1, dtype=np.int64)
    for k, (m, need) in enumerate(zip(np.asarray(regions).tolist(), np.asarray(nominal, dtype=float).tolist())):
        free = remain > 0
        if not free.any():
            continue
        dist = np.where(free, platform.hops[m, srv_region], np.iinfo(np.int64).max)
        e = int(np.argmin(dist))
        out[k] = e
        remain[e] -= need
    return out


def greedy(regions, categories, A, platform):
    """Highest estimated revenue A[e, m, i] among servers the request still fits on (full B_e)."""
    A = np.asarray(A, dtype=float)
    remain = platform.capacities.copy()
    out = np.full(len(regions), -1, dtype=np.int64)
    for k, (m, i) in enumerate(zip(np.asarray(regions).tolist(), np.asarray(categories).tolist())):
        col = A[:, m, i]
        fits = remain >= col
        if not fits.any():
            continue
        e = int(np.argmax(np.where(fits, col, -np.inf)))
        out[k] = e
        remain[e] -= col[e]
    return out


def max_flow(regions, categories, nominal, A, platform):
    """Min-cost max-flow over (region, category) demand nodes and servers.

    Flow units are whole Mbps: a demand node supplies the sum of its requests'
    rounded nominal throughputs, a server absorbs floor(B_e), and each Mbps
    routed from (m, i) to e costs -A[e, m, i]. Requests are decoded in arrival
    order onto the server holding the most remaining flow from their node.
    """
    A = np.asarray(A, dtype=float)
    E, M, I = A.shape
    regions = np.asarray(regions, dtype=np.int64)
    categories = np.asarray(categories, dtype=np.int64)
    units = np.maximum(1, np.rint(np.asarray(nominal, dtype=float))).astype(np.int64)
    node = regions * I + categories
    supply_all = np.bincount(node, weights=units, minlength=M * I).astype(np.int64)
    active = np.flatnonzero(supply_all)
    out = np.full(len(regions), -1, dtype=np.int64)
    if active.size == 0:
        return out
    cost = -A.reshape(E, M * I).T[active]
    flow = bipartite_min_cost_flow(supply_all[active], np.floor(platform.capacities).astype(np.int64), cost)
    rest = np.zeros((M * I, E), dtype=np.int64)
    rest[active] = flow
    for k in range(len(regions)):
        row = rest[node[k]]
        e = int(np.argmax(row))
        if row[e] <= 0:
            continue
        out[k] = e
        row[e] -= units[k]
    return out


SCHEDULERS = ("sentinel", "origin", "gp", "greedy", "mf")
