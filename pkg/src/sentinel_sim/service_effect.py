"""Request categorization, demand forecasting and effect estimation (A, S)."""
from __future__ import annotations

import json
from abc import ABC, abstractmethod

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .domain import EffectMatrices, RequestBatch
from .exceptions import InsufficientHistory, TooFewPoints, Unfitted


class RequestClusters(ClusterMixin, BaseEstimator):
    """K-means over request features with deterministic farthest-point seeding.

    The first centre is drawn with the seeded generator; each further centre is
    the point farthest from the chosen ones, ties broken by a seeded draw.
    Assignment ties go to the lowest cluster id.
    """

    def __init__(self, n_clusters=29, max_iter=100, seed=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        k = self.n_clusters
        if k < 1:
            raise ValueError("n_clusters must be >= 1")
        if len(np.unique(X, axis=0)) < k:
            raise TooFewPoints(f"need at least {k} distinct points")
        rng = np.random.default_rng(self.seed)
        centers = [X[rng.integers(len(X))]]
        closest = ((X - centers[0]) ** 2).sum(axis=1)
        for _ in range(1, k):
            far = np.flatnonzero(closest == closest.max())
            pick = X[far[rng.integers(far.size)]]
            centers.append(pick)
            closest = np.minimum(closest, ((X - pick) ** 2).sum(axis=1))
        centers = np.array(centers)
        labels = None
        for it in range(self.max_iter):
            new_labels = _nearest(X, centers)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    centers[j] = members.mean(axis=0)
        self.cluster_centers_ = centers
        self.labels_ = _nearest(X, centers)
        self.n_iter_ = it + 1
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return _nearest(check_array(X, dtype=float), self.cluster_centers_)

    @property
    def k(self):
        return self.n_clusters


def _nearest(X, centers):
    d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)  # first minimum = lowest id


def fit_clusters(features, k=29, seed=0):
    return RequestClusters(n_clusters=k, seed=seed).fit(features)


def assign_category(model, request):
    features = getattr(request, "features", request)
    return int(model.predict(np.asarray(features, dtype=float).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# forecasting


class ForecastModel(ABC):
    """History of per-tick (M x I) counts -> forecast for the next tick."""

    min_history = 1

    @abstractmethod
    def forecast(self, history):
        ...


class SeasonalNaiveForecaster(ForecastModel):
    """R(t+1-P) plus half the change in the trailing moving average versus a period ago."""

    def __init__(self, period=1440, alpha=0.5, window=30):
        self.period = period
        self.alpha = alpha
        self.window = window

    @property
    def min_history(self):
        return self.period

    def forecast(self, history):
        H = _as_counts(history)
        n = H.shape[0]
        P, w = self.period, self.window
        if n < P:
            raise InsufficientHistory(f"need {P} ticks of history, got {n}")
        t = n - 1
        base = H[t + 1 - P]
        lo_prev = t - P - w + 1
        if t - P < 0:
            trend = 0.0
        else:
            recent = H[t - w + 1:t + 1].mean(axis=0)
            past = H[max(0, lo_prev):t - P + 1].mean(axis=0)
            trend = recent - past
        return np.maximum(0.0, base + self.alpha * trend)


def _as_counts(history):
    if isinstance(history, np.ndarray):
        return history.astype(float)
    history = list(history)
    if history and isinstance(history[0], RequestBatch):
        return np.stack([b.counts for b in history]).astype(float)
    return np.asarray(history, dtype=float)


def forecast(model, history):
    return model.forecast(history)


# ---------------------------------------------------------------------------
# effect estimation


class EffectEstimator(BaseEstimator):
    """Smoothed conditional tables for per-request throughput and anomaly frequency.

    Cells are keyed by (server, region relation, category, peak). A cell's
    estimate shrinks towards its parent ``(count + alpha * parent) / (n + alpha)``
    along the chain cell -> drop server -> drop relation -> global, so unseen
    cells fall back to the nearest populated level.
    """

    def __init__(self, alpha=1.0, s_threshold=0.5):
        self.alpha = alpha
        self.s_threshold = s_threshold

    def fit(self, server, relation, category, peak, throughput, anomaly, E=None, I=None):
        server = np.asarray(server, dtype=np.int64)
        relation = np.asarray(relation, dtype=np.int64)
        category = np.asarray(category, dtype=np.int64)
        peak = np.asarray(peak, dtype=np.int64)
        throughput = np.asarray(throughput, dtype=float)
        anomaly = np.asarray(anomaly, dtype=float)
        E = int(E if E is not None else server.max(initial=-1) + 1)
        I = int(I if I is not None else category.max(initial=-1) + 1)
        shape = (E, 2, I, 2)
        n = np.zeros(shape)
        thr = np.zeros(shape)
        bad = np.zeros(shape)
        np.add.at(n, (server, relation, category, peak), 1.0)
        np.add.at(thr, (server, relation, category, peak), throughput)
        np.add.at(bad, (server, relation, category, peak), anomaly)
        self.counts_ = n
        self.throughput_sum_ = thr
        self.anomaly_sum_ = bad
        self.n_servers_, self.n_categories_ = E, I
        self._smooth()
        return self

    def _smooth(self):
        a = self.alpha
        n, thr, bad = self.counts_, self.throughput_sum_, self.anomaly_sum_

        def level(sum_, cnt, parent):
            with np.errstate(invalid="ignore", divide="ignore"):
                est = (sum_ + a * parent) / (cnt + a)
            return np.where(cnt + a > 0, est, parent)

        tables = {}
        for name, s in (("A", thr), ("p", bad)):
            total_n = n.sum()
            g = s.sum() / total_n if total_n > 0 else 0.0
            n_ri, s_ri = n.sum(axis=0), s.sum(axis=0)            # (rel, cat, peak)
            n_i, s_i = n_ri.sum(axis=0), s_ri.sum(axis=0)        # (cat, peak)
            lvl_i = level(s_i, n_i, g)
            lvl_ri = level(s_ri, n_ri, lvl_i[None])
            tables[name] = level(s, n, lvl_ri[None])
            tables[name + "_global"] = g
        self.A_table_ = np.maximum(tables["A"], 0.0)
        self.p_table_ = np.clip(tables["p"], 0.0, 1.0)
        self.global_A_ = float(tables["A_global"])
        self.global_p_ = float(tables["p_global"])

    def estimate(self, server_regions, peak, M):
        """EffectMatrices (E x M x I) for the requested peak flag."""
        if not hasattr(self, "A_table_"):
            raise Unfitted("effect estimator has not been fitted")
        server_regions = np.asarray(server_regions, dtype=np.int64)
        rel = (server_regions[:, None] != np.arange(M)[None, :]).astype(np.int64)   # (E, M)
        E = server_regions.size
        p_idx = int(bool(peak))
        A = self.A_table_[np.arange(E)[:, None], rel, :, p_idx]
        p = self.p_table_[np.arange(E)[:, None], rel, :, p_idx]
        S = (p < self.s_threshold).astype(np.int8)
        return EffectMatrices(A, S), p

    def to_json(self):
        check_is_fitted(self, "counts_")
        return json.dumps({
            "alpha": self.alpha, "s_threshold": self.s_threshold,
            "keys": ["server", "relation", "category", "peak"],
            "shape": list(self.counts_.shape),
            "counts": self.counts_.ravel().tolist(),
            "throughput_sum": self.throughput_sum_.ravel().tolist(),
            "anomaly_sum": self.anomaly_sum_.ravel().tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        est = cls(alpha=data["alpha"], s_threshold=data["s_threshold"])
        shape = tuple(data["shape"])
        est.counts_ = np.array(data["counts"]).reshape(shape)
        est.throughput_sum_ = np.array(data["throughput_sum"]).reshape(shape)
        est.anomaly_sum_ = np.array(data["anomaly_sum"]).reshape(shape)
        est.n_servers_, est.n_categories_ = shape[0], shape[2]
        est._smooth()
        return est


def estimate_effects(estimator, servers, tick=None, peak=False, M=None):
    """A and S for ``servers`` (list of Server or region array) at a peak or off-peak tick."""
    regions = np.array([getattr(s, "region", s) for s in servers], dtype=np.int64)
    M = int(M if M is not None else regions.max() + 1)
    return estimator.estimate(regions, peak, M)[0]
