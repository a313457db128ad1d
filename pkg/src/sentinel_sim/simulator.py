"""Seeded synthetic cloud-edge platform.

The world is fully determined by :class:`SimConfig`. Randomness is split into
independent streams keyed by ``(seed, stream, index)`` so that any tick, server
or day can be regenerated in isolation and every scheduler in an experiment
sees bitwise identical arrivals, outages and anomaly draws (common random
numbers). Ground-truth service anomalies are Bernoulli per placement with a
logit that is additive in a per-(server, region relation, category) base term,
a peak-hour term, an inter-region term and a server load-band term.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.special import expit

from .domain import (
    N_DIMS,
    LiveRequest,
    Region,
    ReliabilityClass,
    RequestBatch,
    ScheduleOutcome,
    Server,
    WorkloadWindow,
    validate_platform,
)
from .exceptions import InvalidConfig, UnknownRequest, UnknownServer
from .revenue import OpsHistory, RevenueCurve, revenue_efficiency

# random stream tags
_S_PLATFORM, _S_DEVICE, _S_TELEMETRY, _S_ARRIVALS, _S_OUTCOME, _S_TRUTH = range(6)

RELIABILITY_MULTIPLIERS = (0.3, 0.7, 1.3, 2.5)


class AnomalyKind(str, Enum):
    DEVICE = "Device"
    SERVICE = "Service"


@dataclass(frozen=True)
class AnomalyEvent:
    kind: AnomalyKind
    server_id: int
    start: int
    end: int
    scope: Optional[tuple] = None  # (region relation, category) for service events
    severity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        if self.end < self.start:
            raise ValueError("anomaly event ends before it starts")
        if (self.scope is not None) != (self.kind is AnomalyKind.SERVICE):
            raise ValueError("scope is required for service events and forbidden otherwise")

    def covers(self, tick):
        return self.start <= tick <= self.end

    def to_record(self):
        rec = asdict(self)
        rec["kind"] = self.kind.value
        rec["type"] = "AnomalyEvent"
        rec["scope"] = list(self.scope) if self.scope is not None else None
        return rec


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    E: int = 30
    M: int = 5
    I: int = 8
    days: int = 10
    ticks_per_day: int = 1440
    overall_anomaly_rate: float = 0.161
    device_anomaly_share: float = 0.306
    service_anomaly_share: float = 0.552
    # explicit device down-time fraction; derived from the shares when None
    device_tick_fraction: Optional[float] = None
    peak_hours: tuple = ((11.0, 14.0), (19.0, 23.0))
    diurnal_amplitude: float = 1.0
    inter_region_multiplier: float = 2.0
    peak_multiplier: float = 2.0
    n_dims: int = N_DIMS
    # peak-hour demand as a fraction of total fleet bandwidth
    load_factor: float = 0.45
    capacity_min: float = 10.0
    capacity_alpha: float = 1.2
    capacity_max_ratio: float = 20.0
    device_mean_duration: float = 60.0
    severity_range: tuple = (2.0, 20.0)
    bad_cell_fraction: float = 0.12
    bad_cell_boost: float = 4.5
    # (utilization threshold, logit increment) pairs
    load_bands: tuple = ((0.8, 1.0), (1.0, 2.0))
    fine_multiplier: float = 1.0
    unit_price: float = 1.0
    true_u_opt: float = 0.6
    true_sigma: float = 0.2
    latency_base: float = 800.0
    latency_knee: float = 0.6
    latency_slope: float = 6.0
    inter_region_throughput: float = 0.9

    def __post_init__(self):
        if self.E < 1 or self.M < 1 or self.I < 1:
            raise InvalidConfig("E, M and I must be >= 1")
        if self.M > self.E:
            raise InvalidConfig("need at least one server per region (M <= E)")
        if self.days < 1 or self.ticks_per_day < 1:
            raise InvalidConfig("days and ticks_per_day must be >= 1")
        if self.device_anomaly_share < 0 or self.service_anomaly_share < 0:
            raise InvalidConfig("anomaly shares must be >= 0")
        if self.device_anomaly_share + self.service_anomaly_share > 1 + 1e-12:
            raise InvalidConfig("anomaly shares must sum to <= 1")
        if not 0.0 <= self.overall_anomaly_rate <= 1.0:
            raise InvalidConfig("overall_anomaly_rate must lie in [0, 1]")
        if self.device_tick_fraction is not None and not 0.0 <= self.device_tick_fraction < 1.0:
            raise InvalidConfig("device_tick_fraction must lie in [0, 1)")
        if self.n_dims < 2:
            raise InvalidConfig("need at least two telemetry dimensions")
        object.__setattr__(self, "peak_hours", tuple(tuple(map(float, p)) for p in self.peak_hours))
        object.__setattr__(self, "load_bands", tuple(tuple(map(float, b)) for b in self.load_bands))
        object.__setattr__(self, "severity_range", tuple(map(float, self.severity_range)))

    @property
    def horizon(self):
        return self.days * self.ticks_per_day

    @property
    def injected_shares(self):
        """Device and service shares renormalized over the two injected kinds."""
        total = self.device_anomaly_share + self.service_anomaly_share
        if total == 0:
            return 0.0, 0.0
        return self.device_anomaly_share / total, self.service_anomaly_share / total

    @property
    def device_rate(self):
        if self.device_tick_fraction is not None:
            return self.device_tick_fraction
        return self.overall_anomaly_rate * self.injected_shares[0]

    @property
    def service_rate(self):
        """Service-anomaly probability per placement that did not hit a device outage."""
        s = self.overall_anomaly_rate * self.injected_shares[1]
        return s / max(1e-12, 1.0 - self.device_rate)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**data)


def _rng(config, stream, *index):
    return np.random.default_rng([config.seed, stream, *index])


def diurnal_shape(hour):
    """Two-peak daily demand curve (midday and evening), trough before dawn."""
    hour = np.asarray(hour, dtype=float)

    def bump(center, width):
        d = np.abs(hour - center)
        d = np.minimum(d, 24.0 - d)
        return np.exp(-(d ** 2) / (2 * width ** 2))

    return 0.35 + 1.0 * bump(12.5, 1.2) + 1.3 * bump(21.0, 1.3)


# ---------------------------------------------------------------------------
# platform


def generate_platform(config):
    """Servers across regions on a ring-with-chords topology.

    Capacities are truncated Pareto (heavy tailed, >= one order of magnitude
    spread); reliability classes are balanced and independent of capacity.
    """
    if config.E < 1:
        raise InvalidConfig("E must be >= 1")
    rng = _rng(config, _S_PLATFORM)
    M, E = config.M, config.E
    neighbors = {m: set() for m in range(M)}
    for m in range(M):
        if M > 1:
            for nb in ((m + 1) % M, (m - 1) % M):
                if nb != m:
                    neighbors[m].add(nb)
    weights = rng.dirichlet(np.full(M, 4.0))
    shifts = rng.uniform(-30.0, 30.0, size=M)
    regions = [Region(m, frozenset(neighbors[m]), (float(weights[m]), float(shifts[m]))) for m in range(M)]

    # every region gets at least one server
    region_of = np.concatenate([np.arange(M), rng.integers(0, M, size=E - M)])
    rng.shuffle(region_of)
    raw = config.capacity_min * (1.0 - rng.random(E)) ** (-1.0 / config.capacity_alpha)
    caps = np.clip(raw, config.capacity_min, config.capacity_min * config.capacity_max_ratio)
    # force the spread to span an order of magnitude
    order = np.argsort(caps)
    caps[order[0]] = config.capacity_min
    caps[order[-1]] = max(caps[order[-1]], config.capacity_min * min(10.0, config.capacity_max_ratio))
    caps = np.round(caps, 1)
    classes = np.resize(np.arange(len(ReliabilityClass)), E)
    rng.shuffle(classes)
    servers = []
    for e in range(E):
        profile = tuple(float(v) for v in rng.uniform(0.5, 2.0, size=config.n_dims))
        servers.append(Server(e, int(region_of[e]), float(caps[e]), profile, ReliabilityClass(int(classes[e]))))
    return servers, regions


def category_catalog(config):
    """True request types: (content code, platform code, nominal bitrate) centroids."""
    rng = _rng(config, _S_TRUTH, 0)
    n_content = max(1, math.ceil(math.sqrt(config.I)) + 1)
    centroids = []
    for i in range(config.I):
        content = i % n_content
        platform = i // n_content
        bitrate = 2.0 + 1.0 * content + 1.5 * platform + rng.uniform(-0.3, 0.3)
        centroids.append((float(content), float(platform), float(round(bitrate, 3))))
    return np.array(centroids)


# ---------------------------------------------------------------------------
# device events and telemetry


def downtime_fractions(config, platform, weights=None):
    """Per-server down fraction proportional to the reliability multiplier.

    Scaled so the ``weights``-weighted mean hits the device rate; uniform
    weights (the default) make it a fraction of server-ticks. When
    ``device_tick_fraction`` is set it always means server-ticks.
    """
    mults = np.array([RELIABILITY_MULTIPLIERS[int(s.reliability_class)] for s in platform.servers])
    target = config.device_rate
    if target <= 0:
        return np.zeros(len(mults))
    if weights is None or config.device_tick_fraction is not None:
        weights = np.ones(len(mults))
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    return np.clip(target * mults / float(weights @ mults), 0.0, 0.6)


def generate_device_events(config, platform, weights=None):
    """Alternating up/down renewal process per server; geometric durations."""
    events = []
    fractions = downtime_fractions(config, platform, weights)
    lo, hi = config.severity_range
    for s, frac in zip(platform.servers, fractions):
        if frac <= 0:
            continue
        rng = _rng(config, _S_DEVICE, s.id)
        mean_down = config.device_mean_duration
        mean_up = mean_down * (1.0 - frac) / frac
        t = 0
        down = rng.random() < frac
        while t < config.horizon:
            mean = mean_down if down else mean_up
            length = int(rng.geometric(1.0 / max(mean, 1.0)))
            if down:
                severity = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
                events.append(AnomalyEvent(AnomalyKind.DEVICE, s.id, t, min(t + length, config.horizon) - 1,
                                           severity=severity))
            t += length
            down = not down
    return events


def device_down_mask(config, E, events):
    mask = np.zeros((config.horizon, E), dtype=bool)
    for ev in events:
        if ev.kind is AnomalyKind.DEVICE:
            mask[ev.start:ev.end + 1, ev.server_id] = True
    return mask


@dataclass(frozen=True)
class TelemetryModel:
    level_range: tuple = (0.2, 0.45)
    amplitude_range: tuple = (0.12, 0.22)
    shared_sd: float = 0.03
    shared_ar: float = 0.8
    idio_sd: float = 0.008


def _server_telemetry_params(config, server, model):
    rng = _rng(config, _S_TELEMETRY, server.id, 10 ** 6)
    N = config.n_dims
    level = rng.uniform(*model.level_range, size=N)
    amp = rng.uniform(*model.amplitude_range, size=N)
    return level, amp


def generate_telemetry(config, server, tick_range, anomaly_events=(), regions=None, model=TelemetryModel()):
    """Telemetry matrix (len(tick_range) x N), values clipped to [0, 1].

    Healthy ticks follow a shared diurnal curve plus a shared AR(1) factor, so
    dimensions co-move. Inside a device event each dimension gets independent
    noise with variance ``severity`` times the healthy fluctuation variance.
    Every day is generated from its own stream, so slices are reproducible.
    """
    ticks = np.asarray(list(tick_range), dtype=np.int64)
    N = config.n_dims
    if ticks.size == 0:
        return np.zeros((0, N))
    P = config.ticks_per_day
    level, amp = _server_telemetry_params(config, server, model)
    shift = 0.0
    if regions is not None:
        shift = regions[server.region].demand_profile[1]
    days = np.unique(ticks // P)
    out = np.empty((ticks.size, N))
    local_var = model.shared_sd ** 2 + model.idio_sd ** 2
    for day in days:
        rng = _rng(config, _S_TELEMETRY, server.id, int(day))
        t_day = np.arange(day * P, (day + 1) * P)
        hour = ((t_day % P) + shift) / P * 24.0
        d = diurnal_shape(hour)
        d = (d - 0.35) / 2.0
        shared = np.empty(P)
        innov = rng.standard_normal(P + 50) * model.shared_sd * math.sqrt(1 - model.shared_ar ** 2)
        acc = 0.0
        for k in range(50):
            acc = model.shared_ar * acc + innov[k]
        ar = model.shared_ar
        for k in range(P):
            acc = ar * acc + innov[k + 50]
            shared[k] = acc
        idio = rng.standard_normal((P, N)) * model.idio_sd
        anom = rng.standard_normal((P, N))
        block = level[None, :] + amp[None, :] * d[:, None] + shared[:, None] + idio
        for ev in anomaly_events:
            if ev.kind is not AnomalyKind.DEVICE or ev.server_id != server.id:
                continue
            lo = max(ev.start, day * P)
            hi = min(ev.end, (day + 1) * P - 1)
            if lo > hi:
                continue
            sl = slice(lo - day * P, hi - day * P + 1)
            base = level[None, :] + amp[None, :] * d[sl, None]
            block[sl] = base + anom[sl] * math.sqrt(ev.severity * local_var)
        sel = (ticks // P) == day
        out[sel] = block[ticks[sel] - day * P]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# the world


@dataclass
class TickArrivals:
    """Arrivals of one tick as parallel arrays (index = position in the tick)."""

    tick: int
    ids: np.ndarray
    region: np.ndarray
    true_type: np.ndarray
    features: np.ndarray
    nominal: np.ndarray

    def __len__(self):
        return self.ids.size

    def to_requests(self):
        return [LiveRequest(int(self.ids[k]), int(self.region[k]), tuple(self.features[k]), self.tick,
                            float(self.nominal[k])) for k in range(len(self))]


@dataclass
class TickResult:
    """Full adjudication of one tick; :meth:`outcome` condenses it."""

    tick: int
    assignment: np.ndarray
    placed: np.ndarray
    device_fail: np.ndarray
    service_fail: np.ndarray
    throughput: np.ndarray
    placement_revenue: np.ndarray
    utilization: np.ndarray
    server_revenue: np.ndarray
    revenue: float
    raw_revenue: float
    raw_server_revenue: np.ndarray
    ids: np.ndarray
    latency: np.ndarray
    error_rate: np.ndarray

    def outcome(self, decision_time=0.0):
        placed = np.flatnonzero(self.placed)
        return ScheduleOutcome(
            tick=self.tick,
            placements=tuple(zip(self.ids[placed].tolist(), self.assignment[placed].tolist())),
            device_anomaly_count=int(self.device_fail.sum()),
            service_anomaly_count=int(self.service_fail.sum()),
            utilization=self.utilization,
            revenue=float(self.revenue),
            decision_time=float(decision_time),
            dropped=tuple(self.ids[~self.placed].tolist()),
            raw_revenue=float(self.raw_revenue),
        )


class World:
    """Deterministic platform state for one :class:`SimConfig`."""

    def __init__(self, config: SimConfig, telemetry_model: TelemetryModel = TelemetryModel()):
        self.config = config
        self.telemetry_model = telemetry_model
        servers, regions = generate_platform(config)
        self.platform = validate_platform(servers, regions)
        self.categories = category_catalog(config)
        self.curve = RevenueCurve(config.true_u_opt, config.true_sigma, config.unit_price)
        self._build_truth()
        self._arrival_rate = self._calibrate_arrival_rate()
        sample = self._origin_sample()
        self.bad = self._draw_bad_cells(sample)
        self.events = generate_device_events(config, self.platform,
                                             np.bincount(sample[0], minlength=self.platform.E))
        self.down = device_down_mask(config, self.platform.E, self.events)
        self.base_offset = self._calibrate_service_offset(sample)

    # -- ground truth -------------------------------------------------------

    def _build_truth(self):
        cfg, plat = self.config, self.platform
        E, M, I = plat.E, plat.M, cfg.I
        rng = _rng(cfg, _S_TRUTH, 1)
        srv_region = plat.server_regions
        # relation[e, m] = 1 when the request region differs from the server region
        self.relation = (srv_region[:, None] != np.arange(M)[None, :]).astype(np.int64)
        self.efficiency = rng.uniform(0.75, 1.0, size=E)
        self._truth_rng = rng
        rel_factor = np.where(self.relation == 1, cfg.inter_region_throughput, 1.0)
        self.throughput_factor = self.efficiency[:, None] * rel_factor  # (E, M)
        self.type_mix = rng.dirichlet(np.full(I, 3.0))
        region_w = np.array([r.demand_profile[0] for r in plat.regions])
        self.region_mix = region_w / region_w.sum()
        self.log_peak = math.log(cfg.peak_multiplier)
        self.log_inter = math.log(cfg.inter_region_multiplier)

    def _origin_sample(self, stride=5):
        """Placements Origin makes on every ``stride``-th tick of the first day.

        Returns parallel arrays (server, region, type, peak, utilization of the
        server after the tick). Origin ignores anomalies, so this needs no
        ground truth and anchors the injected rates to what Origin experiences.
        """
        from .baselines import origin

        cols = [[] for _ in range(5)]
        for t in range(0, self.config.ticks_per_day, stride):
            arr = self.arrivals(t)
            if not len(arr):
                continue
            srv = origin(arr.region, arr.nominal, self.platform)
            load = np.bincount(srv, weights=arr.nominal * self.throughput_factor[srv, arr.region],
                               minlength=self.platform.E)
            util = load / self.platform.capacities
            for c, v in zip(cols, (srv, arr.region, arr.true_type, np.full(srv.size, self.is_peak(t)), util[srv])):
                c.append(v)
        return tuple(np.concatenate(c) for c in cols)

    def _draw_bad_cells(self, sample):
        """Chronically bad (server, relation, type) cells.

        Cells Origin uses are taken in random order until they carry
        ``bad_cell_fraction`` of its calibration traffic; cells it never uses
        turn bad independently with the same probability.
        """
        cfg = self.config
        E, I = self.platform.E, cfg.I
        rng = self._truth_rng
        srv, region, ttype = sample[:3]
        weight = np.zeros((E, 2, I))
        if srv.size:
            np.add.at(weight, (srv, self.relation[srv, region], ttype), 1.0)
        flat = weight.ravel()
        bad = rng.random(flat.size) < cfg.bad_cell_fraction
        used = np.flatnonzero(flat > 0)
        bad[used] = False
        if used.size and cfg.bad_cell_fraction > 0:
            order = rng.permutation(used)
            share = np.cumsum(flat[order]) / flat.sum()
            n_bad = int(np.searchsorted(share, cfg.bad_cell_fraction)) + 1
            bad[order[:n_bad]] = True
        return bad.reshape(E, 2, I)

    def _calibrate_service_offset(self, sample):
        """Bisect the base logit so Origin's placements hit the target service rate."""
        target = self.config.service_rate
        srv, region, ttype, peak, util = sample
        if target <= 0 or srv.size == 0:
            return -50.0
        rel = self.relation[srv, region]
        fixed = (self.config.bad_cell_boost * self.bad[srv, rel, ttype] + rel * self.log_inter
                 + peak * self.log_peak)
        for threshold, inc in self.config.load_bands:
            fixed = fixed + np.where(util > threshold, inc, 0.0)

        def rate(offset):
            return float(expit(offset + fixed).mean())

        lo, hi = -20.0, 10.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if rate(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def _calibrate_arrival_rate(self):
        hours = np.linspace(0, 24, 24 * 60, endpoint=False)
        peak_shape = diurnal_shape(hours).max()
        mean_bitrate = float(self.type_mix @ self.categories[:, 2])
        per_request = mean_bitrate * float(self.efficiency.mean())
        return self.config.load_factor * self.platform.capacities.sum() / (peak_shape * per_request)

    def service_logit(self, servers, regions, types, tick, utilization):
        rel = self.relation[servers, regions]
        logit = self.base_offset + self.config.bad_cell_boost * self.bad[servers, rel, types]
        logit = logit + rel * self.log_inter
        if self.is_peak(tick):
            logit = logit + self.log_peak
        band = np.zeros_like(utilization)
        for threshold, inc in self.config.load_bands:
            band = band + np.where(utilization > threshold, inc, 0.0)
        return logit + band[servers]

    def service_probability(self, servers, regions, types, tick, utilization=None):
        if utilization is None:
            utilization = np.zeros(self.platform.E)
        if self.config.service_rate <= 0:
            return np.zeros(np.shape(servers))
        return expit(self.service_logit(np.asarray(servers), np.asarray(regions), np.asarray(types),
                                        tick, utilization))

    def service_events(self):
        """Persistent bad (server, relation, category) cells as service events."""
        events = []
        for e, rel, i in zip(*np.nonzero(self.bad)):
            events.append(AnomalyEvent(AnomalyKind.SERVICE, int(e), 0, self.config.horizon - 1,
                                       scope=(int(rel), int(i)), severity=float(self.config.bad_cell_boost)))
        return events

    # -- time ------------------------------------------------------------------

    def hour_of(self, tick):
        P = self.config.ticks_per_day
        return (np.asarray(tick) % P) / P * 24.0

    def is_peak_hour(self, hour):
        hour = np.asarray(hour, dtype=float)
        out = np.zeros(hour.shape, dtype=bool)
        for lo, hi in self.config.peak_hours:
            out |= (hour >= lo) & (hour < hi)
        return out

    def is_peak(self, tick):
        return bool(self.is_peak_hour(self.hour_of(tick)))

    def time_period(self, tick):
        """0: first peak, 1: between peaks, 2: second peak, 3: rest of the day."""
        hour = float(self.hour_of(tick))
        (a0, a1), (b0, b1) = self.config.peak_hours[:2]
        if a0 <= hour < a1:
            return 0
        if a1 <= hour < b0:
            return 1
        if b0 <= hour < b1:
            return 2
        return 3

    # -- arrivals --------------------------------------------------------------

    def expected_arrivals(self, tick):
        """Mean arrivals per (region, type) at ``tick`` (M x I)."""
        P = self.config.ticks_per_day
        shifts = np.array([r.demand_profile[1] for r in self.platform.regions])
        hour = ((tick % P) + shifts) / P * 24.0
        base = diurnal_shape(hour)
        amp = self.config.diurnal_amplitude
        shape = (1 - amp) * diurnal_shape(np.linspace(0, 24, 97)).mean() + amp * base
        lam = self._arrival_rate * shape * self.region_mix
        return lam[:, None] * self.type_mix[None, :]

    def arrivals(self, tick) -> TickArrivals:
        rng = _rng(self.config, _S_ARRIVALS, int(tick))
        counts = rng.poisson(self.expected_arrivals(tick))
        region, ttype = np.nonzero(counts)
        reps = counts[region, ttype]
        region = np.repeat(region, reps)
        ttype = np.repeat(ttype, reps)
        n = region.size
        perm = rng.permutation(n)
        region, ttype = region[perm], ttype[perm]
        feats = self.categories[ttype].copy()
        feats[:, 2] = np.maximum(0.5, feats[:, 2] + rng.normal(0.0, 0.25, size=n))
        ids = tick * 100_000 + np.arange(n, dtype=np.int64)
        return TickArrivals(int(tick), ids, region.astype(np.int64), ttype.astype(np.int64), feats,
                            feats[:, 2].copy())

    def request_batch(self, tick):
        arr = self.arrivals(tick)
        counts = np.zeros((self.platform.M, self.config.I), dtype=np.int64)
        np.add.at(counts, (arr.region, arr.true_type), 1)
        return RequestBatch(int(tick), counts), arr

    # -- telemetry -------------------------------------------------------------

    @cached_property
    def telemetry(self):
        """Telemetry cube (horizon x E x N), float32."""
        cfg = self.config
        cube = np.empty((cfg.horizon, self.platform.E, cfg.n_dims), dtype=np.float32)
        for s in self.platform.servers:
            cube[:, s.id, :] = generate_telemetry(cfg, s, range(cfg.horizon), self.events,
                                                  self.platform.regions, self.telemetry_model)
        return cube

    def window(self, server_id, end_tick, T=12):
        """Window of the ``T`` ticks strictly before ``end_tick``."""
        start = end_tick - T
        if start < 0:
            raise ValueError("not enough telemetry before end_tick")
        return WorkloadWindow(server_id, start, self.telemetry[start:end_tick, server_id, :].astype(float))

    def windows_at(self, end_tick, T=12):
        """All servers' windows ending before ``end_tick`` as an (E, T, N) array."""
        return np.ascontiguousarray(self.telemetry[end_tick - T:end_tick].transpose(1, 0, 2), dtype=float)

    # -- adjudication ----------------------------------------------------------

    def adjudicate(self, arrivals: TickArrivals, assignment) -> TickResult:
        """Settle one tick. ``assignment[k]`` is the server of arrival ``k`` or -1."""
        cfg, plat = self.config, self.platform
        t = arrivals.tick
        E = plat.E
        n = len(arrivals)
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (n,):
            raise UnknownRequest("assignment length does not match arrivals")
        if np.any(assignment >= E) or np.any(assignment < -1):
            raise UnknownServer("assignment references an unknown server")
        rng = _rng(cfg, _S_OUTCOME, int(t))
        u_draw = rng.random((n, E))
        noise = np.exp(0.05 * rng.standard_normal((n, E)))
        placed = assignment >= 0
        idx = np.flatnonzero(placed)
        srv = assignment[idx]
        caps = plat.capacities
        thr = np.zeros(n)
        thr[idx] = (arrivals.nominal[idx] * self.throughput_factor[srv, arrivals.region[idx]]
                    * noise[idx, srv])
        device_fail = np.zeros(n, dtype=bool)
        device_fail[idx] = self.down[t, srv]
        live = placed & ~device_fail
        load = np.bincount(assignment[live], weights=thr[live], minlength=E)
        util = load / caps
        service_fail = np.zeros(n, dtype=bool)
        if idx.size:
            live_idx = np.flatnonzero(live)
            p = self.service_probability(assignment[live_idx], arrivals.region[live_idx],
                                         arrivals.true_type[live_idx], t, util)
            service_fail[live_idx] = u_draw[live_idx, assignment[live_idx]] < p
        gross = np.where(load > 0, revenue_efficiency(self.curve, util) * caps * cfg.unit_price, 0.0)
        share = np.zeros(n)
        share[live] = thr[live] / load[assignment[live]]
        placement_rev = np.zeros(n)
        placement_rev[live] = gross[assignment[live]] * share[live] * np.where(
            service_fail[live], 1.0 - cfg.fine_multiplier, 1.0)
        server_rev = np.bincount(assignment[live], weights=placement_rev[live], minlength=E)
        raw_load = np.bincount(srv, weights=thr[idx], minlength=E)
        raw_server = np.where(raw_load > 0, revenue_efficiency(self.curve, raw_load / caps) * caps
                              * cfg.unit_price, 0.0)
        raw = float(raw_server.sum())
        # ops samples for servers that carried traffic
        active = load > 0
        placed_per = np.bincount(assignment[live], minlength=E)
        svc_per = np.bincount(assignment[service_fail], minlength=E)
        lat_noise = np.exp(0.05 * rng.standard_normal(E))
        latency = cfg.latency_base * (1.0 + cfg.latency_slope * np.maximum(0.0, util - cfg.latency_knee)) * lat_noise
        err = np.divide(svc_per, placed_per, out=np.zeros(E), where=placed_per > 0)
        return TickResult(
            tick=t, assignment=assignment, placed=placed, device_fail=device_fail, service_fail=service_fail,
            throughput=thr, placement_revenue=placement_rev, utilization=util, server_revenue=server_rev,
            revenue=float(server_rev.sum()), raw_revenue=raw, raw_server_revenue=raw_server, ids=arrivals.ids,
            latency=np.where(active, latency, np.nan), error_rate=np.where(active, err, np.nan),
        )

    def ops_history(self, results):
        util, lat, err = [], [], []
        for r in results:
            active = ~np.isnan(r.latency)
            util.append(np.clip(r.utilization[active], 0.0, 1.0))
            lat.append(r.latency[active])
            err.append(r.error_rate[active])
        if not util:
            return OpsHistory(np.zeros(0), np.zeros(0), np.zeros(0))
        return OpsHistory(np.concatenate(util), np.concatenate(lat), np.concatenate(err))


def generate_requests(config, tick, world=None):
    """Batch counts plus the individual requests for ``tick``."""
    world = world or World(config)
    batch, arrivals = world.request_batch(tick)
    return batch, arrivals.to_requests()


def adjudicate(placements, tick, world, arrivals=None):
    """Settle ``placements`` (pairs of request id, server id) for ``tick``.

    Requests that arrived but are absent from ``placements`` count as dropped.
    """
    arrivals = arrivals if arrivals is not None else world.arrivals(tick)
    position = {int(r): k for k, r in enumerate(arrivals.ids)}
    assignment = np.full(len(arrivals), -1, dtype=np.int64)
    for req, srv in placements:
        if int(req) not in position:
            raise UnknownRequest(f"request {req} did not arrive at tick {tick}")
        if not 0 <= int(srv) < world.platform.E:
            raise UnknownServer(f"server {srv} does not exist")
        assignment[position[int(req)]] = int(srv)
    return world.adjudicate(arrivals, assignment).outcome()
