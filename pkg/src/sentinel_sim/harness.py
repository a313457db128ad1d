"""Experiment harness: training phase, per-tick evaluation loop, reports and comparisons.

The first ``train_days`` of the horizon are served by Origin with some random
exploration so that every (server, relation, category) cell gets observed;
the learned components are fitted on that history. Every scheduler then
replays the remaining days against the same arrival and ground-truth streams.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines
from .detection.detector import build_detector
from .exceptions import ConservationViolation, InvalidConfig, SentinelError, StreamMismatch, TickFailure
from .postscheduler import (BandwidthLedger, Components, DayLog, fallback_arrays, match_arrays,
                            refresh_components, remaining_bandwidth)
from .prescheduler import PlannerConfig, StrategyPool, build_secants, pre_schedule
from .revenue import OpsHistory, OptimalUtilization, RevenueCurve
from .service_effect import EffectEstimator, SeasonalNaiveForecaster, fit_clusters
from .simulator import SimConfig, World

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEDULER_NAMES = baselines.SCHEDULERS + ("sentinel-inline",)
TIME_PERIODS = ("peak_1", "between_peaks", "peak_2", "off_peak")
PEAK_PERIODS = (0, 2)
DAILY_FIELDS = ("scheduler", "day", "arrivals", "placed", "dropped", "device_anomalies", "service_anomalies",
                "anomaly_frequency", "device_frequency", "service_frequency", "revenue", "raw_revenue",
                "mean_utilization", "loaded_server_ticks")
SLICE_FIELDS = ("scheduler", "axis", "slice", "arrivals", "placed", "anomalies", "revenue", "raw_revenue")
TIMING_FIELDS = ("scheduler", "day", "ticks", "pre_seconds", "post_seconds", "mean_pre_ms", "mean_post_ms")


def _planner_default():
    # one LP per tick: the consolidation pass recovers most of what branching buys
    return PlannerConfig(max_nodes=1)


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    schedulers: tuple = baselines.SCHEDULERS
    train_days: int = 5
    test_days: int = 5
    out_dir: Optional[str] = None
    window: int = 12
    exploration: float = 0.2
    refresh: bool = True
    refresh_days: int = 5
    detector_model: bool = True
    detector_epochs: int = 15
    detector_windows: int = 1500
    sigma: float = 0.2
    utilization_bins: int = 12
    slices: bool = True
    planner: PlannerConfig = field(default_factory=_planner_default)

    def __post_init__(self):
        if self.test_days < 1:
            raise InvalidConfig("test_days must be >= 1")
        if self.train_days < 1:
            raise InvalidConfig("train_days must be >= 1 (the forecaster needs a day of history)")
        scheds = tuple(self.schedulers) if not isinstance(self.schedulers, str) else (self.schedulers,)
        if not scheds:
            raise InvalidConfig("at least one scheduler is required")
        unknown = [s for s in scheds if s not in SCHEDULER_NAMES]
        if unknown:
            raise InvalidConfig(f"unknown scheduler(s) {unknown}; choose from {SCHEDULER_NAMES}")
        object.__setattr__(self, "schedulers", scheds)
        if not 0.0 <= self.exploration <= 1.0:
            raise InvalidConfig("exploration must lie in [0, 1]")
        if self.window < 2:
            raise InvalidConfig("window must be >= 2")
        if self.sim.days != self.train_days + self.test_days:
            object.__setattr__(self, "sim", dataclasses.replace(self.sim, days=self.train_days + self.test_days))

    @property
    def train_ticks(self):
        return self.train_days * self.sim.ticks_per_day

    # -- flat key namespace (config files, env overrides) ---------------------

    @classmethod
    def keys(cls):
        sim = [f.name for f in dataclasses.fields(SimConfig) if f.name != "days"]
        own = [f.name for f in dataclasses.fields(cls) if f.name not in ("sim", "planner")]
        planner = ["planner_" + f.name for f in dataclasses.fields(PlannerConfig)]
        return sim + own + planner

    def to_flat(self):
        out = {k: v for k, v in self.sim.to_dict().items() if k != "days"}
        for f in dataclasses.fields(self):
            if f.name not in ("sim", "planner"):
                out[f.name] = getattr(self, f.name)
        for f in dataclasses.fields(PlannerConfig):
            out["planner_" + f.name] = getattr(self.planner, f.name)
        return _jsonable(out)

    @classmethod
    def from_flat(cls, data):
        data = dict(data)
        sim_names = {f.name for f in dataclasses.fields(SimConfig)}
        own_names = {f.name for f in dataclasses.fields(cls)} - {"sim", "planner"}
        planner_names = {f.name for f in dataclasses.fields(PlannerConfig)}
        sim_kw, own_kw, planner_kw = {}, {}, {}
        for key, value in data.items():
            if key in own_names:
                own_kw[key] = value
            elif key in sim_names:
                sim_kw[key] = value
            elif key.startswith("planner_") and key[8:] in planner_names:
                planner_kw[key[8:]] = value
            else:
                raise InvalidConfig(f"unknown config key {key!r}")
        for key in ("schedulers",):
            if key in own_kw and isinstance(own_kw[key], str):
                own_kw[key] = tuple(s.strip() for s in own_kw[key].split(",") if s.strip())
            elif key in own_kw:
                own_kw[key] = tuple(own_kw[key])
        train = int(own_kw.get("train_days", 5))
        test = int(own_kw.get("test_days", 5))
        sim_kw["days"] = train + test
        try:
            sim = SimConfig.from_dict(sim_kw)
            planner = PlannerConfig(**{**dataclasses.asdict(_planner_default()), **planner_kw})
            return cls(sim=sim, planner=planner, **own_kw)
        except InvalidConfig:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# report


@dataclass
class Report:
    """Plot-ready results of one experiment. Timings live apart from the deterministic part."""

    config: dict
    stream_hash: str
    schedulers: tuple
    daily: list
    slices: list
    timings: list = field(default_factory=list)
    utilization_hist: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def totals(self, scheduler):
        rows = [r for r in self.daily if r["scheduler"] == scheduler]
        if not rows:
            raise KeyError(scheduler)
        s = {k: sum(r[k] for r in rows) for k in ("arrivals", "placed", "dropped", "device_anomalies",
                                                   "service_anomalies", "revenue", "raw_revenue",
                                                   "loaded_server_ticks")}
        util_sum = sum(r["mean_utilization"] * r["loaded_server_ticks"] for r in rows)
        placed = max(s["placed"], 1)
        s["anomaly_frequency"] = (s["device_anomalies"] + s["service_anomalies"]) / placed
        s["device_frequency"] = s["device_anomalies"] / placed
        s["service_frequency"] = s["service_anomalies"] / placed
        s["mean_utilization"] = util_sum / s["loaded_server_ticks"] if s["loaded_server_ticks"] else 0.0
        return s

    def summary(self):
        return {
            "schema_version": self.schema_version,
            "stream_hash": self.stream_hash,
            "schedulers": list(self.schedulers),
            "config": self.config,
            "totals": {s: self.totals(s) for s in self.schedulers},
            "utilization_hist": self.utilization_hist,
            "counters": self.counters,
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "report.csv", DAILY_FIELDS, self.daily, self)
        _write_csv(out / "slices.csv", SLICE_FIELDS, self.slices, self)
        _write_csv(out / "timings.csv", TIMING_FIELDS, self.timings, self)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_file():
            path = path.parent
        summary = json.loads((path / "summary.json").read_text())
        if summary.get("schema_version") != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported report schema {summary.get('schema_version')}")
        timings = _read_csv(path / "timings.csv") if (path / "timings.csv").exists() else []
        return cls(config=summary["config"], stream_hash=summary["stream_hash"],
                   schedulers=tuple(summary["schedulers"]), daily=_read_csv(path / "report.csv"),
                   slices=_read_csv(path / "slices.csv"), timings=timings,
                   utilization_hist=summary.get("utilization_hist", {}), counters=summary.get("counters", {}))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, fields, rows, report):
    buf = io.StringIO()
    buf.write(f"# schema_version={report.schema_version} stream_hash={report.stream_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    Path(path).write_text(buf.getvalue())


def _parse(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _read_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(lines)]


# ---------------------------------------------------------------------------
# accumulation


class _Tally:
    """Per-scheduler running sums; one row per test day."""

    def __init__(self, name, n_days, first_day, classes, n_bins):
        self.name = name
        self.first_day = first_day
        self.classes = np.asarray(classes)
        self.n_classes = int(self.classes.max()) + 1
        d = n_days
        z = lambda *shape: np.zeros(shape)  # noqa: E731
        self.arrivals, self.placed, self.dropped = z(d), z(d), z(d)
        self.dev, self.svc, self.rev, self.raw = z(d), z(d), z(d), z(d)
        self.util_sum, self.util_n = z(d), z(d)
        self.edges = np.append(np.linspace(0.0, 1.2, n_bins), np.inf)
        self.hist = np.zeros(n_bins, dtype=np.int64)
        self.pre, self.post, self.ticks = z(d), z(d), z(d)
        keys = ("arrivals", "placed", "anomalies", "revenue", "raw_revenue")
        self.cls = {k: z(self.n_classes) for k in keys}
        self.per = {k: z(len(TIME_PERIODS)) for k in keys}
        self.hasher = hashlib.sha256()

    def see_stream(self, arrivals, down_row):
        h = self.hasher
        h.update(np.int64(arrivals.tick).tobytes())
        for a in (arrivals.ids, arrivals.region, arrivals.true_type, arrivals.features, arrivals.nominal):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.ascontiguousarray(down_row).tobytes())

    def add(self, day, period, result, pre=0.0, post=0.0):
        n = result.assignment.size
        placed = int(result.placed.sum())
        dropped = n - placed
        dev = int(result.device_fail.sum())
        svc = int(result.service_fail.sum())
        self.arrivals[day] += n
        self.placed[day] += placed
        self.dropped[day] += dropped
        self.dev[day] += dev
        self.svc[day] += svc
        self.rev[day] += result.revenue
        self.raw[day] += result.raw_revenue
        loaded = np.bincount(result.assignment[result.placed], minlength=result.utilization.size) > 0
        u = result.utilization[loaded]
        self.util_sum[day] += u.sum()
        self.util_n[day] += u.size
        self.hist += np.histogram(u, bins=self.edges)[0]
        self.pre[day] += pre
        self.post[day] += post
        self.ticks[day] += 1
        srv = result.assignment[result.placed]
        cls = self.classes[srv]
        bad = (result.device_fail | result.service_fail)[result.placed]
        k = self.n_classes
        self.cls["placed"] += np.bincount(cls, minlength=k)
        # a server class only ever sees the requests routed to it
        self.cls["arrivals"] += np.bincount(cls, minlength=k)
        self.cls["anomalies"] += np.bincount(cls, weights=bad, minlength=k)
        self.cls["revenue"] += np.bincount(self.classes, weights=result.server_revenue, minlength=k)
        self.cls["raw_revenue"] += np.bincount(self.classes, weights=result.raw_server_revenue, minlength=k)
        self.per["arrivals"][period] += n
        self.per["placed"][period] += placed
        self.per["anomalies"][period] += dev + svc
        self.per["revenue"][period] += result.revenue
        self.per["raw_revenue"][period] += result.raw_revenue

    def daily_rows(self):
        rows = []
        for d in range(self.arrivals.size):
            placed = max(self.placed[d], 1.0)
            rows.append({
                "scheduler": self.name, "day": self.first_day + d,
                "arrivals": int(self.arrivals[d]), "placed": int(self.placed[d]), "dropped": int(self.dropped[d]),
                "device_anomalies": int(self.dev[d]), "service_anomalies": int(self.svc[d]),
                "anomaly_frequency": float((self.dev[d] + self.svc[d]) / placed),
                "device_frequency": float(self.dev[d] / placed), "service_frequency": float(self.svc[d] / placed),
                "revenue": float(self.rev[d]), "raw_revenue": float(self.raw[d]),
                "mean_utilization": float(self.util_sum[d] / self.util_n[d]) if self.util_n[d] else 0.0,
                "loaded_server_ticks": int(self.util_n[d]),
            })
        return rows

    def slice_rows(self):
        rows = []
        for c in range(self.n_classes):
            rows.append({"scheduler": self.name, "axis": "reliability_cluster", "slice": str(c),
                         **{k: _num(v[c]) for k, v in self.cls.items()}})
        for p, label in enumerate(TIME_PERIODS):
            rows.append({"scheduler": self.name, "axis": "time_period", "slice": label,
                         **{k: _num(v[p]) for k, v in self.per.items()}})
        return rows

    def timing_rows(self):
        rows = []
        for d in range(self.arrivals.size):
            t = max(self.ticks[d], 1.0)
            rows.append({"scheduler": self.name, "day": self.first_day + d, "ticks": int(self.ticks[d]),
                         "pre_seconds": float(self.pre[d]), "post_seconds": float(self.post[d]),
                         "mean_pre_ms": float(1e3 * self.pre[d] / t), "mean_post_ms": float(1e3 * self.post[d] / t)})
        return rows


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


# ---------------------------------------------------------------------------
# training phase


@dataclass
class TrainingHistory:
    logs: list                 # one DayLog per training day
    counts_features: list      # per tick (region, features) for category counts
    ops: OpsHistory


def _day_log(parts, ops_parts):
    cols = {k: np.concatenate([p[k] for p in parts]) if parts else np.zeros(0)
            for k in ("features", "server", "relation", "peak", "throughput", "service_fail", "device_fail")}
    if parts:
        cols["features"] = cols["features"].reshape(-1, parts[0]["features"].shape[1])
    ops = OpsHistory(*(np.concatenate([o[i] for o in ops_parts]) if ops_parts else np.zeros(0) for i in range(3)))
    return DayLog(ops=ops, **{k: cols[k] for k in cols})


def _observation(world, arrivals, result):
    idx = np.flatnonzero(result.placed)
    srv = result.assignment[idx]
    return {
        "features": arrivals.features[idx],
        "server": srv,
        "relation": world.relation[srv, arrivals.region[idx]],
        "peak": np.full(idx.size, int(world.is_peak(arrivals.tick)), dtype=np.int64),
        "throughput": result.throughput[idx],
        "service_fail": result.service_fail[idx],
        "device_fail": result.device_fail[idx],
    }


def _ops_sample(result):
    active = ~np.isnan(result.latency)
    return (np.clip(result.utilization[active], 0.0, 1.0), result.latency[active], result.error_rate[active])


def collect_history(world, ticks, exploration=0.2, seed=0):
    """Serve ``ticks`` with Origin, re-routing each request to a random server with probability ``exploration``."""
    P = world.config.ticks_per_day
    rng = np.random.default_rng([int(seed), 0x5EED])
    plat = world.platform
    logs, parts, ops_parts = [], [], []
    arrivals_log = []
    for t in ticks:
        arr = world.arrivals(t)
        assign = baselines.origin(arr.region, arr.nominal, plat)
        flip = rng.random(len(arr)) < exploration
        assign[flip] = rng.integers(0, plat.E, size=int(flip.sum()))
        res = world.adjudicate(arr, assign)
        parts.append(_observation(world, arr, res))
        ops_parts.append(_ops_sample(res))
        arrivals_log.append((arr.region, arr.features))
        if (t + 1) % P == 0:
            logs.append(_day_log(parts, ops_parts))
            parts, ops_parts = [], []
    if parts:
        logs.append(_day_log(parts, ops_parts))
    ops = logs[0].ops
    for lg in logs[1:]:
        ops = ops.concat(lg.ops)
    return TrainingHistory(logs, arrivals_log, ops)


def fit_components(world, history, config: ExperimentConfig):
    """Clusters, effect tables, u_opt and detector from the training history."""
    sim = config.sim
    log_ = DayLog.concat(history.logs)
    rng = np.random.default_rng([sim.seed, 0xC1])
    feats = log_.features
    sample = feats if len(feats) <= 20_000 else feats[np.sort(rng.choice(len(feats), 20_000, replace=False))]
    clusters = fit_clusters(sample, sim.I, seed=sim.seed)
    cats = clusters.predict(feats)
    keep = ~log_.device_fail
    estimator = EffectEstimator().fit(log_.server[keep], log_.relation[keep], cats[keep], log_.peak[keep],
                                      log_.throughput[keep], log_.service_fail[keep], E=world.platform.E, I=sim.I)
    curve = OptimalUtilization(sigma=config.sigma, unit_price=sim.unit_price).fit(history.ops).curve_
    detector = None
    if "sentinel" in config.schedulers or "sentinel-inline" in config.schedulers:
        detector, _ = build_detector(
            world.telemetry, world.down, world.platform.reliability, range(config.train_ticks), T=config.window,
            model_kwargs=dict(epochs=config.detector_epochs), n_train_windows=config.detector_windows,
            seed=sim.seed, model=config.detector_model)
    return Components(clusters, estimator, curve, detector, reference_ops=history.ops)


def category_counts(world, clusters, arrivals_log):
    """(ticks x M x k) counts of arrivals per region and category."""
    M, k = world.platform.M, clusters.n_clusters
    out = np.zeros((len(arrivals_log), M, k))
    for t, (region, feats) in enumerate(arrivals_log):
        if region.size:
            np.add.at(out[t], (region, clusters.predict(feats)), 1.0)
    return out


# ---------------------------------------------------------------------------
# schedulers


class SentinelRunner:
    """The proactive pipeline: detect and plan before arrivals, match and fall back after."""

    def __init__(self, world, components, counts, config: ExperimentConfig, inline=False):
        self.world = world
        self.config = config
        self.inline = inline
        self.components = components
        self.forecaster = SeasonalNaiveForecaster(period=config.sim.ticks_per_day)
        self.counts = np.zeros((config.sim.horizon,) + counts.shape[1:])
        self.counts[:counts.shape[0]] = counts
        self.pool = StrategyPool()
        self.ledger = BandwidthLedger()
        self.days = deque(maxlen=config.refresh_days)
        self._parts, self._ops = [], []
        self._effects = {}
        self._secants = build_secants(components.curve, config.planner.segments)
        self.partial_ticks = 0

    def seed_days(self, logs):
        for lg in logs[-self.config.refresh_days:]:
            self.days.append(lg)

    def _effects_for(self, peak):
        if peak not in self._effects:
            plat = self.world.platform
            self._effects[peak] = self.components.estimator.estimate(plat.server_regions, peak, plat.M)[0]
        return self._effects[peak]

    def prepare(self, t):
        comp = self.components
        det = comp.detector
        if det is not None:
            d, _ = det.detect(self.world.windows_at(t, self.config.window))
        else:
            d = np.ones(self.world.platform.E, dtype=np.int8)
        span = self.forecaster.period + self.forecaster.window + 1
        R_hat = self.forecaster.forecast(self.counts[max(0, t - span):t])
        effects = self._effects_for(self.world.is_peak(t))
        ps = pre_schedule(t, R_hat, effects, d, self.world.platform.capacities, comp.curve, self.config.planner,
                          self.pool, self._secants)
        self.partial_ticks += int(ps.partial)
        return d, effects

    def place(self, t, arrivals, d, effects):
        plat = self.world.platform
        cats = self.components.clusters.predict(arrivals.features) if len(arrivals) else np.zeros(0, dtype=np.int64)
        ps = self.pool.get(t)
        assign, used = match_arrays(arrivals.region, cats, ps, tick=t)
        miss = np.flatnonzero(assign < 0)
        if miss.size:
            A = np.asarray(effects.A)
            remain = remaining_bandwidth(plat.capacities, used, A, self.ledger)
            demand = A[:, arrivals.region[miss], cats[miss]].T
            assign[miss] = fallback_arrays(arrivals.region[miss], demand, d, remain, plat.hops,
                                           plat.server_regions)
        self.pool.pop()
        return assign, cats

    def observe(self, t, arrivals, cats, result):
        self.counts[t] = 0.0
        if len(arrivals):
            np.add.at(self.counts[t], (arrivals.region, cats), 1.0)
        self._parts.append(_observation(self.world, arrivals, result))
        self._ops.append(_ops_sample(result))
        P = self.config.sim.ticks_per_day
        if (t + 1) % P == 0:
            self.days.append(_day_log(self._parts, self._ops))
            self._parts, self._ops = [], []
            if self.config.refresh and t + 1 < self.config.sim.horizon:
                self.refresh(t + 1)

    def refresh(self, t):
        lo = max(0, t - self.config.refresh_days * self.config.sim.ticks_per_day)
        fresh = refresh_components(self.components, list(self.days), self.world.telemetry[lo:t],
                                   self.world.platform.reliability, self.world.platform.E, self.config.window,
                                   seed=self.config.sim.seed + t)
        # atomic swap between ticks
        self.components = fresh
        self._effects = {}
        self._secants = build_secants(fresh.curve, self.config.planner.segments)

    def step(self, t, arrivals):
        """Returns (assignment, categories, pre seconds, post seconds)."""
        if self.inline:
            t0 = time.perf_counter()
            d, effects = self.prepare(t)
            assign, cats = self.place(t, arrivals, d, effects)
            return assign, cats, 0.0, time.perf_counter() - t0
        t0 = time.perf_counter()
        d, effects = self.prepare(t)
        t1 = time.perf_counter()
        assign, cats = self.place(t, arrivals, d, effects)
        return assign, cats, t1 - t0, time.perf_counter() - t1


def _baseline_step(name, arrivals, components, world):
    plat = world.platform
    if name == "origin":
        return baselines.origin(arrivals.region, arrivals.nominal, plat)
    if name == "gp":
        return baselines.gp(arrivals.region, arrivals.nominal, plat)
    cats = components.clusters.predict(arrivals.features) if len(arrivals) else np.zeros(0, dtype=np.int64)
    A = components.estimator.estimate(plat.server_regions, world.is_peak(arrivals.tick), plat.M)[0].A
    if name == "greedy":
        return baselines.greedy(arrivals.region, cats, A, plat)
    if name == "mf":
        return baselines.max_flow(arrivals.region, cats, arrivals.nominal, A, plat)
    raise InvalidConfig(f"unknown scheduler {name!r}")


def check_conservation(arrivals, assignment, tick, scheduler):
    placed = int((assignment >= 0).sum())
    dropped = int((assignment < 0).sum())
    if assignment.shape != (len(arrivals),) or placed + dropped != len(arrivals):
        raise ConservationViolation(f"{scheduler} at tick {tick}: {placed} placed + {dropped} dropped "
                                    f"!= {len(arrivals)} arrivals")


# ---------------------------------------------------------------------------
# experiment


def run_experiment(config: ExperimentConfig, world: Optional[World] = None, progress=None):
    """Train on the first split, evaluate every scheduler on the second, return a :class:`Report`."""
    world = world or World(config.sim)
    sim = config.sim
    P = sim.ticks_per_day
    train_end = config.train_ticks
    test = range(train_end, sim.horizon)
    history = collect_history(world, range(train_end), config.exploration, sim.seed)
    components = fit_components(world, history, config)
    counts = category_counts(world, components.clusters, history.counts_features)
    classes = world.platform.reliability
    tallies = {}
    counters = {}
    for name in config.schedulers:
        tally = _Tally(name, config.test_days, config.train_days, classes, config.utilization_bins)
        runner = None
        if name.startswith("sentinel"):
            runner = SentinelRunner(world, copy.deepcopy(components), counts, config, inline=name.endswith("inline"))
            runner.seed_days(history.logs)
        for t in test:
            arr = world.arrivals(t)
            tally.see_stream(arr, world.down[t])
            try:
                if runner is not None:
                    assign, cats, pre, post = runner.step(t, arr)
                else:
                    t0 = time.perf_counter()
                    assign = _baseline_step(name, arr, components, world)
                    pre, post = 0.0, time.perf_counter() - t0
                check_conservation(arr, assign, t, name)
                res = world.adjudicate(arr, assign)
                if runner is not None:
                    runner.observe(t, arr, cats, res)
            except ConservationViolation:
                raise
            except SentinelError as exc:
                raise TickFailure(t, name, exc) from exc
            tally.add(t // P - config.train_days, world.time_period(t), res, pre, post)
            if progress is not None and (t + 1) % P == 0:
                progress(name, t // P)
        tallies[name] = tally
        if runner is not None:
            det = runner.components.detector
            counters[name] = {
                "model_calls": int(det.model_calls) if det else 0,
                "ambiguous_windows": int(det.ambiguous_seen) if det else 0,
                "bandwidth_clamps": int(runner.ledger.clamp_warnings),
                "partial_strategies": int(runner.partial_ticks),
                "final_u_opt": float(runner.components.curve.u_opt),
                "refreshes": int(runner.components.version),
            }
    hashes = {n: t.hasher.hexdigest() for n, t in tallies.items()}
    if len(set(hashes.values())) > 1:
        raise StreamMismatch(f"schedulers saw different streams: {hashes}")
    flat = config.to_flat()
    flat.pop("out_dir", None)
    stream = hashlib.sha256((next(iter(hashes.values())) + json.dumps(
        {k: v for k, v in sim.to_dict().items()}, sort_keys=True, default=str)).encode()).hexdigest()
    report = Report(
        config=flat, stream_hash=stream, schedulers=tuple(config.schedulers),
        daily=[r for t in tallies.values() for r in t.daily_rows()],
        slices=[r for t in tallies.values() for r in t.slice_rows()] if config.slices else [],
        timings=[r for t in tallies.values() for r in t.timing_rows()],
        utilization_hist={n: {"edges": [float(e) for e in t.edges[:-1]], "counts": t.hist.tolist()}
                          for n, t in tallies.items()},
        counters={**counters, "trained_u_opt": float(components.curve.u_opt)},
    )
    if config.out_dir:
        report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# comparison and slicing

COMPARED = ("anomaly_frequency", "device_frequency", "service_frequency", "revenue", "raw_revenue",
            "mean_utilization", "dropped")


@dataclass
class Comparison:
    rows: list          # scheduler, metric, value, reference, delta
    summary: str

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("report", "scheduler", "metric", "value", "reference", "delta"))
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in ("report", "scheduler", "metric", "value", "reference", "delta")])
        return buf.getvalue()


def _delta(value, ref):
    if ref == 0:
        return 0.0 if value == 0 else float(value - ref)
    return float((value - ref) / abs(ref))


def compare(reports):
    """Relative deltas of every scheduler against Origin, plus against the first report's same scheduler.

    All reports must come from the same streams (same stream hash).
    """
    reports = list(reports)
    if len(reports) < 1:
        raise InvalidConfig("nothing to compare")
    hashes = {r.stream_hash for r in reports}
    if len(hashes) > 1:
        raise StreamMismatch("reports were produced from different arrival or anomaly streams")
    pooled = {}
    for r in reports:
        for s in r.schedulers:
            pooled.setdefault(s, r.totals(s))
    ref_name = "origin" if "origin" in pooled else next(iter(pooled))
    ref = pooled[ref_name]
    rows, lines = [], []
    for idx, r in enumerate(reports):
        for s in r.schedulers:
            tot = r.totals(s)
            first = reports[0].totals(s) if s in reports[0].schedulers else tot
            for m in COMPARED:
                rows.append({"report": idx, "scheduler": s, "metric": m, "value": float(tot[m]),
                             "reference": ref_name, "delta": _delta(tot[m], ref[m])})
                rows.append({"report": idx, "scheduler": s, "metric": m, "value": float(tot[m]),
                             "reference": "report0", "delta": _delta(tot[m], first[m])})
    for s, tot in pooled.items():
        lines.append(f"{s:>16}: anomaly frequency {tot['anomaly_frequency']:.4f} "
                     f"({_delta(tot['anomaly_frequency'], ref['anomaly_frequency']):+.1%} vs {ref_name}), "
                     f"revenue {tot['revenue']:.1f} ({_delta(tot['revenue'], ref['revenue']):+.1%}), "
                     f"mean utilization {tot['mean_utilization']:.3f}")
    return Comparison(rows, "\n".join(lines))


def slice_robustness(report, axis):
    """{scheduler: {slice: metrics}} for axis ``reliability_cluster`` or ``time_period``."""
    if axis not in ("reliability_cluster", "time_period"):
        raise InvalidConfig(f"unknown slice axis {axis!r}")
    out = {}
    for r in report.slices:
        if r["axis"] != axis:
            continue
        out.setdefault(r["scheduler"], {})[str(r["slice"])] = {
            k: r[k] for k in ("arrivals", "placed", "anomalies", "revenue", "raw_revenue")}
    return out


def pool_slices(reports, axis):
    """Slice metrics summed over several reports (e.g. one per seed)."""
    out = {}
    for rep in reports:
        for sched, slices in slice_robustness(rep, axis).items():
            for key, metrics in slices.items():
                acc = out.setdefault(sched, {}).setdefault(key, dict.fromkeys(metrics, 0))
                for m, v in metrics.items():
                    acc[m] += v
    return out


def revenue_advantage(report, axis, scheduler="sentinel", reference="origin", kind="retention"):
    """Per-slice advantage of ``scheduler`` over ``reference``.

    ``kind="relative"`` compares realized revenue directly. ``kind="retention"``
    compares the share of anomaly-free revenue each scheduler actually kept
    (realized / raw), which separates robustness to failures from differences
    in where the two schedulers put their load. ``report`` may be a list of
    reports, whose slices are pooled first.
    """
    sl = pool_slices(report if isinstance(report, (list, tuple)) else [report], axis)
    a, b = sl[scheduler], sl[reference]
    if kind == "relative":
        return {k: _delta(a[k]["revenue"], b[k]["revenue"]) for k in a}
    if kind == "retention":
        keep = lambda m: m["revenue"] / m["raw_revenue"] if m["raw_revenue"] > 0 else 1.0  # noqa: E731
        return {k: float(keep(a[k]) - keep(b[k])) for k in a}
    raise InvalidConfig(f"unknown advantage kind {kind!r}")


def env_overrides(environ=None, prefix="SENTINEL_SIM_"):
    """Config keys taken from ``SENTINEL_SIM_<KEY>`` variables (values parsed as JSON when possible)."""
    environ = os.environ if environ is None else environ
    keys = {k.upper(): k for k in ExperimentConfig.keys()}
    out = {}
    for var, raw in environ.items():
        if not var.startswith(prefix):
            continue
        name = var[len(prefix):]
        if name not in keys:
            raise InvalidConfig(f"environment variable {var} does not name a config key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[keys[name]] = value
    return out


__all__ = ["ExperimentConfig", "Report", "Comparison", "run_experiment", "compare", "slice_robustness",
           "revenue_advantage", "pool_slices", "collect_history", "fit_components", "SentinelRunner", "env_overrides",
           "check_conservation", "TIME_PERIODS", "SCHEDULER_NAMES"]
