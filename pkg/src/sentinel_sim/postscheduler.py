"""Post-scheduling: match arrivals to the pooled strategy, then fall back."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detection.detector import TwoStageDetector, refresh_baselines
from .exceptions import StaleStrategy
from .revenue import OpsHistory, OptimalUtilization, RevenueCurve, nearest_rank_percentile
from .service_effect import EffectEstimator, RequestClusters, fit_clusters

log = logging.getLogger(__name__)


def drain_orders(collapsed_revenue):
    """Per category, servers by descending collapsed revenue then ascending id (I x E)."""
    abar = np.asarray(collapsed_revenue, dtype=float)
    E, I = abar.shape
    return np.stack([np.lexsort((np.arange(E), -abar[:, i])) for i in range(I)])


def match_arrays(regions, categories, ps, tick=None, collapsed_revenue=None):
    """Consume strategy budgets in arrival order.

    Returns (assignment array with -1 for unmatched, used budget E x M x I).
    """
    if tick is not None and ps.built_for_tick != tick:
        raise StaleStrategy(f"strategy built for tick {ps.built_for_tick}, used at {tick}")
    budget = np.array(ps.x, dtype=np.int64)
    E, M, I = budget.shape
    orders = drain_orders(ps.collapsed if collapsed_revenue is None else collapsed_revenue)
    assignment = np.full(len(regions), -1, dtype=np.int64)
    used = np.zeros_like(budget)
    cursor = {}
    for k, (m, i) in enumerate(zip(np.asarray(regions).tolist(), np.asarray(categories).tolist())):
        pos = cursor.get((m, i), 0)
        order = orders[i]
        while pos < E and budget[order[pos], m, i] == 0:
            pos += 1
        cursor[(m, i)] = pos
        if pos == E:
            continue
        e = order[pos]
        budget[e, m, i] -= 1
        used[e, m, i] += 1
        assignment[k] = e
    return assignment, used


def match(requests, ps, cluster_model, tick=None, collapsed_revenue=None):
    """(placements, unmatched) for LiveRequest objects; categories come from the cluster model."""
    if not requests:
        if tick is not None and ps.built_for_tick != tick:
            raise StaleStrategy(f"strategy built for tick {ps.built_for_tick}, used at {tick}")
        return [], []
    feats = np.array([r.features for r in requests], dtype=float)
    cats = cluster_model.predict(feats)
    regions = np.array([r.region for r in requests])
    assignment, _ = match_arrays(regions, cats, ps, tick, collapsed_revenue)
    placements = [(r.id, int(e)) for r, e in zip(requests, assignment) if e >= 0]
    unmatched = [r for r, e in zip(requests, assignment) if e < 0]
    return placements, unmatched


class BandwidthLedger:
    """Counts how often the remaining-bandwidth clamp was needed."""

    def __init__(self):
        self.clamp_warnings = 0


def remaining_bandwidth(capacities, placed_counts, A, ledger=None):
    """B_e - sum_{m,i} s * A, clamped at zero."""
    raw = np.asarray(capacities, dtype=float) - np.einsum("emi,emi->e", np.asarray(placed_counts),
                                                          np.asarray(A, dtype=float))
    neg = raw < 0
    if neg.any():
        if ledger is not None:
            ledger.clamp_warnings += int(neg.sum())
        log.debug("remaining bandwidth clamped on %d servers", int(neg.sum()))
    return np.maximum(raw, 0.0)


def nearest_max_remaining(region, available, remain, hops, server_regions):
    """Server minimizing (hop distance, -remaining, id) among ``available``; -1 if none."""
    if not available.any():
        return -1
    dist = np.where(available, hops[region, server_regions], np.iinfo(np.int64).max)
    near = dist == dist.min()
    rem = np.where(near, remain, -np.inf)
    return int(np.argmax(rem))  # first max = lowest id


def fallback_arrays(regions, demand, available, remain, hops, server_regions):
    """Place each request in turn; ``demand`` is (n, E) estimated throughput per server.

    ``remain`` is updated in place. Returns the assignment (-1 = dropped).
    """
    out = np.full(len(regions), -1, dtype=np.int64)
    available = np.asarray(available).astype(bool)
    for k, m in enumerate(np.asarray(regions).tolist()):
        e = nearest_max_remaining(m, available, remain, hops, server_regions)
        if e < 0:
            continue
        out[k] = e
        remain[e] -= demand[k, e]
    return out


def fallback(unmatched, platform, availability, remain, throughput):
    """Placements for LiveRequest objects; ``throughput(request)`` gives (E,) estimates."""
    d = np.asarray(getattr(availability, "d", availability)).astype(bool)
    remain = np.array(remain, dtype=float)
    regions = np.array([r.region for r in unmatched], dtype=np.int64)
    demand = np.array([throughput(r) for r in unmatched], dtype=float).reshape(len(unmatched), platform.E)
    assignment = fallback_arrays(regions, demand, d, remain, platform.hops, platform.server_regions)
    placements = [(r.id, int(e)) for r, e in zip(unmatched, assignment) if e >= 0]
    dropped = [r.id for r, e in zip(unmatched, assignment) if e < 0]
    return placements, dropped, remain


# ---------------------------------------------------------------------------
# component refresh


@dataclass(frozen=True)
class Components:
    """Immutable snapshot of everything the Sentinel pipeline learns from history."""

    clusters: RequestClusters
    estimator: EffectEstimator
    curve: RevenueCurve
    detector: Optional[TwoStageDetector] = None
    version: int = 0
    reference_ops: Optional[OpsHistory] = None


@dataclass
class DayLog:
    """Placement observations and ops samples gathered over one day."""

    features: np.ndarray
    server: np.ndarray
    relation: np.ndarray
    peak: np.ndarray
    throughput: np.ndarray
    service_fail: np.ndarray
    device_fail: np.ndarray
    ops: OpsHistory

    @classmethod
    def concat(cls, logs):
        ops = logs[0].ops
        for log_ in logs[1:]:
            ops = ops.concat(log_.ops)
        cols = {name: np.concatenate([getattr(d, name) for d in logs])
                for name in ("features", "server", "relation", "peak", "throughput", "service_fail", "device_fail")}
        return cls(ops=ops, **cols)


def align_clusters(new, old):
    """Permute ``new`` centroids so each lines up with its closest ``old`` one (stable category ids)."""
    a = np.asarray(old.cluster_centers_)
    b = np.asarray(new.cluster_centers_)
    if a.shape != b.shape:
        return new
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    _, cols = linear_sum_assignment(cost)
    new.cluster_centers_ = b[cols]
    return new


def refresh_u_opt(curve, ops, min_above=50, percentile=80.0, n_bins=20, reference=None):
    """Re-estimate u_opt, keeping the old value when too few samples lie above it.

    Traffic steered to stay at or below u_opt carries no information about what
    happens beyond it, so refitting on it alone would only ever confirm or
    lower the estimate. ``reference`` (the training-phase ops) is pooled with
    the new samples and also fixes the percentile thresholds: a scheduler that
    avoids failing cells drives most error rates to zero, and a percentile
    taken from its own traffic would then flag every bin with a single error.
    The old estimate is also kept when a threshold equals its metric's minimum.
    """
    if len(ops) == 0 or int((ops.utilization > curve.u_opt).sum()) < min_above:
        return curve
    src = ops if reference is None or len(reference) == 0 else reference
    for metric in (src.startup_latency, src.error_rate):
        if nearest_rank_percentile(metric, percentile) <= metric.min():
            return curve
    pooled = ops if src is ops else reference.concat(ops)
    est = OptimalUtilization(percentile, n_bins, curve.sigma, curve.unit_price).fit(
        pooled, reference=None if src is ops else reference)
    return est.curve_


def refresh_components(components, days, telemetry=None, classes=None, n_servers=None, window=12,
                       max_cluster_points=20_000, seed=0):
    """Refit clusters, effect tables, detector baselines and u_opt on the trailing ``days``.

    Returns a new :class:`Components`; the caller swaps it in between ticks.
    With no logged days this is a no-op.
    """
    days = [d for d in days if d is not None and d.server.size]
    if not days:
        return components
    log_ = DayLog.concat(days)
    rng = np.random.default_rng(seed)
    feats = log_.features
    k = components.clusters.n_clusters
    sample = feats if len(feats) <= max_cluster_points else feats[rng.choice(len(feats), max_cluster_points,
                                                                            replace=False)]
    clusters = align_clusters(fit_clusters(sample, k, seed), components.clusters)
    cats = clusters.predict(feats)
    keep = ~log_.device_fail
    E = n_servers if n_servers is not None else components.estimator.n_servers_
    estimator = EffectEstimator(components.estimator.alpha, components.estimator.s_threshold).fit(
        log_.server[keep], log_.relation[keep], cats[keep], log_.peak[keep], log_.throughput[keep],
        log_.service_fail[keep], E=E, I=k)
    curve = refresh_u_opt(components.curve, log_.ops, reference=components.reference_ops)
    detector = components.detector
    if detector is not None and telemetry is not None:
        detector = refresh_baselines(detector, telemetry, classes, T=window, seed=seed)
    return replace(components, clusters=clusters, estimator=estimator, curve=curve, detector=detector,
                   version=components.version + 1)
