"""Unified revenue metric: Gaussian revenue efficiency and optimal utilization."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyHistory

DEFAULT_U_OPT = 0.6
DEFAULT_SIGMA = 0.2


@dataclass(frozen=True)
class RevenueCurve:
    u_opt: float = DEFAULT_U_OPT
    sigma: float = DEFAULT_SIGMA
    unit_price: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.u_opt <= 1.0:
            raise ValueError(f"u_opt must lie in (0, 1], got {self.u_opt}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    def __call__(self, u):
        return revenue_efficiency(self, u)

    def half_max_points(self):
        delta = self.sigma * math.sqrt(2.0 * math.log(2.0))
        return self.u_opt - delta, self.u_opt + delta


def revenue_efficiency(curve, u):
    """exp(-(u - u_opt)^2 / (2 sigma^2)); scalar in, scalar out."""
    u = np.asarray(u, dtype=float)
    out = np.exp(-((u - curve.u_opt) ** 2) / (2.0 * curve.sigma ** 2))
    return float(out) if out.ndim == 0 else out


def server_revenue(curve, u, capacity):
    """Absolute revenue of one server: efficiency * B_e * unit price."""
    return revenue_efficiency(curve, u) * np.asarray(capacity, dtype=float) * curve.unit_price


@dataclass(frozen=True)
class OpsHistory:
    """Per server-tick operations samples used to locate ``u_opt``."""

    utilization: np.ndarray
    startup_latency: np.ndarray
    error_rate: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.utilization, dtype=float).ravel()
        lat = np.asarray(self.startup_latency, dtype=float).ravel()
        err = np.asarray(self.error_rate, dtype=float).ravel()
        if not (u.shape == lat.shape == err.shape):
            raise ValueError("ops history columns must have equal length")
        if u.size and (u.min() < 0.0 or u.max() > 1.0):
            raise ValueError("utilization samples must lie in [0, 1]")
        object.__setattr__(self, "utilization", u)
        object.__setattr__(self, "startup_latency", lat)
        object.__setattr__(self, "error_rate", err)

    def __len__(self):
        return self.utilization.size

    def concat(self, other):
        return OpsHistory(np.concatenate([self.utilization, other.utilization]),
                          np.concatenate([self.startup_latency, other.startup_latency]),
                          np.concatenate([self.error_rate, other.error_rate]))


def nearest_rank_percentile(values, percentile):
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if values.size == 0:
        raise EmptyHistory("percentile of an empty sample")
    rank = max(1, math.ceil(percentile / 100.0 * values.size))
    return float(values[rank - 1])


def utilization_at_percentile(utilization, metric, percentile=80.0, n_bins=20, threshold=None):
    """Lowest utilization bin whose mean ``metric`` exceeds the metric's percentile.

    Returns the bin's left edge, or 1.0 when no populated bin exceeds it.
    ``threshold`` overrides the percentile taken from ``metric`` itself.
    """
    if threshold is None:
        threshold = nearest_rank_percentile(metric, percentile)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, utilization, side="right") - 1, 0, n_bins - 1)
    sums = np.bincount(idx, weights=metric, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    hits = np.flatnonzero((counts > 0) & (means > threshold))
    return float(edges[hits[0]]) if hits.size else 1.0


def compute_u_opt(history, percentile=80.0, n_bins=20, floor=1.0 / 20, reference=None):
    """min(U_lat_p, U_err_p); clamped to ``[floor, 1]`` so the curve stays valid.

    With ``reference`` the percentiles come from that history instead of ``history``.
    """
    if len(history) == 0:
        raise EmptyHistory("cannot compute u_opt from an empty history")
    src = history if reference is None or len(reference) == 0 else reference
    lat_p = nearest_rank_percentile(src.startup_latency, percentile)
    err_p = nearest_rank_percentile(src.error_rate, percentile)
    u_lat = utilization_at_percentile(history.utilization, history.startup_latency, n_bins=n_bins, threshold=lat_p)
    u_err = utilization_at_percentile(history.utilization, history.error_rate, n_bins=n_bins, threshold=err_p)
    return float(min(max(min(u_lat, u_err), floor), 1.0))


class OptimalUtilization(BaseEstimator):
    """Estimator wrapper around :func:`compute_u_opt` for the refresh loop."""

    def __init__(self, percentile=80.0, n_bins=20, sigma=DEFAULT_SIGMA, unit_price=1.0):
        self.percentile = percentile
        self.n_bins = n_bins
        self.sigma = sigma
        self.unit_price = unit_price

    def fit(self, history, y=None, reference=None):
        self.u_opt_ = compute_u_opt(history, self.percentile, self.n_bins, reference=reference)
        self.curve_ = RevenueCurve(self.u_opt_, self.sigma, self.unit_price)
        return self

    def transform(self, utilization):
        check_is_fitted(self, "curve_")
        return revenue_efficiency(self.curve_, utilization)
