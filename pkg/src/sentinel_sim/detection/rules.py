"""Rule-based screening of telemetry windows by variance and correlation shifts."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..exceptions import ShapeMismatch


class Verdict(str, Enum):
    HEALTHY = "Healthy"
    FAULTY = "Faulty"
    AMBIGUOUS = "Ambiguous"


@dataclass(frozen=True, eq=False)
class RuleConfig:
    """Thresholds apply to values divided by ``scale`` (per dimension, default 1)."""

    baseline: np.ndarray
    theta_v: float = 0.4
    theta_r: float = 0.4
    beta: float = 0.5
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        base = np.asarray(getattr(self.baseline, "values", self.baseline), dtype=float)
        if base.ndim != 2:
            raise ShapeMismatch("baseline must be a T x N window")
        if self.theta_v <= 0 or self.theta_r <= 0:
            raise ValueError("thresholds must be > 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        scale = np.ones(base.shape[1]) if self.scale is None else np.broadcast_to(
            np.asarray(self.scale, dtype=float), (base.shape[1],)).copy()
        if np.any(scale <= 0):
            raise ValueError("scale must be > 0")
        object.__setattr__(self, "baseline", base)
        object.__setattr__(self, "scale", scale)

    @property
    def min_dims(self):
        return math.ceil(self.beta * self.baseline.shape[1] - 1e-12)


def variances(windows):
    """Population variance per dimension; windows (..., T, N)."""
    return np.var(windows, axis=-2)


def correlations(windows):
    """Pearson correlation matrices (..., N, N); zero-variance dims correlate 0 with the rest."""
    x = windows - windows.mean(axis=-2, keepdims=True)
    cov = np.einsum("...ti,...tj->...ij", x, x)
    sd = np.sqrt(np.einsum("...ii->...i", cov))
    denom = sd[..., :, None] * sd[..., None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 1e-12, cov / np.where(denom > 1e-12, denom, 1.0), 0.0)
    N = corr.shape[-1]
    eye = np.eye(N, dtype=bool)
    return np.where(eye, 1.0, corr)


def rule_statistics(windows, cfg: RuleConfig):
    """(count of dims with shifted variance, Frobenius correlation gap) per window."""
    w = np.asarray(getattr(windows, "values", windows), dtype=float)
    if w.shape[-2:] != cfg.baseline.shape:
        raise ShapeMismatch(f"window shape {w.shape[-2:]} != baseline {cfg.baseline.shape}")
    w = w / cfg.scale
    base = cfg.baseline / cfg.scale
    var_gap = np.abs(variances(w) - variances(base))
    n_dims = (var_gap > cfg.theta_v).sum(axis=-1)
    corr_gap = np.sqrt(((correlations(w) - correlations(base)) ** 2).sum(axis=(-2, -1)))
    return n_dims, corr_gap


def rule_check(window, cfg: RuleConfig):
    n_dims, corr_gap = rule_statistics(window, cfg)
    return _verdict(n_dims >= cfg.min_dims, corr_gap > cfg.theta_r)


def _verdict(c1, c2):
    if c1 and c2:
        return Verdict.FAULTY
    if not c1 and not c2:
        return Verdict.HEALTHY
    return Verdict.AMBIGUOUS


def rule_check_many(windows, cfgs):
    """Vectorized verdict codes for (B, T, N) windows with one config per window.

    Codes: 0 healthy, 1 faulty, 2 ambiguous.
    """
    windows = np.asarray(windows, dtype=float)
    if isinstance(cfgs, RuleConfig):
        cfgs = [cfgs] * len(windows)
    scale = np.stack([c.scale for c in cfgs])
    base = np.stack([c.baseline for c in cfgs])
    if windows.shape[1:] != base.shape[1:]:
        raise ShapeMismatch("window and baseline shapes differ")
    theta_v = np.array([c.theta_v for c in cfgs])
    theta_r = np.array([c.theta_r for c in cfgs])
    min_dims = np.array([c.min_dims for c in cfgs])
    w = windows / scale[:, None, :]
    b = base / scale[:, None, :]
    var_gap = np.abs(variances(w) - variances(b))
    c1 = (var_gap > theta_v[:, None]).sum(axis=-1) >= min_dims
    c2 = np.sqrt(((correlations(w) - correlations(b)) ** 2).sum(axis=(-2, -1))) > theta_r
    return np.where(c1 & c2, 1, np.where(~c1 & ~c2, 0, 2))


def window_distance(a, b):
    """L1 distance of variance vectors plus Frobenius distance of correlations."""
    return np.abs(variances(a) - variances(b)).sum(axis=-1) + np.sqrt(
        ((correlations(a) - correlations(b)) ** 2).sum(axis=(-2, -1)))


def medoid_window(windows, scale=None):
    """The window minimizing total distance to all others (ties: lowest index)."""
    w = np.asarray(windows, dtype=float)
    if scale is not None:
        w = w / np.asarray(scale, dtype=float)
    v = variances(w)
    c = correlations(w)
    dv = np.abs(v[:, None, :] - v[None, :, :]).sum(axis=-1)
    dc = np.sqrt(((c[:, None] - c[None, :]) ** 2).sum(axis=(-2, -1)))
    k = int(np.argmin((dv + dc).sum(axis=1)))
    return np.asarray(windows, dtype=float)[k]
