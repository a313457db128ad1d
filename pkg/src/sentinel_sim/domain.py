"""Shared domain types.

Indices are 0-based throughout: server ``e`` in ``[0, E)``, region ``m`` in
``[0, M)``, category ``i`` in ``[0, I)``. One tick is one minute.

Every type is immutable after construction (arrays are copied and flagged
read-only) and converts to and from a flat JSON record whose field names match
the attribute names, see :func:`to_record` / :func:`from_record`.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Iterable, Iterator, Optional

import numpy as np

from .exceptions import DanglingRegion, EmptyPlatform, ShapeMismatch

N_DIMS = 4
TELEMETRY_DIMS = ("upload_bandwidth", "memory", "cpu", "disk")


class ReliabilityClass(IntEnum):
    STABLE = 0
    NORMAL = 1
    UNSTABLE = 2
    FLAKY = 3


def _frozen_array(value, dtype=float, ndim=None, name="array"):
    arr = np.array(value, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Server:
    id: int
    region: int
    bandwidth_capacity: float
    hardware_profile: tuple
    reliability_class: ReliabilityClass = ReliabilityClass.STABLE

    def __post_init__(self):
        if not self.bandwidth_capacity > 0:
            raise ValueError(f"server {self.id}: bandwidth_capacity must be > 0")
        if self.region < 0:
            raise ValueError(f"server {self.id}: negative region index")
        profile = tuple(float(v) for v in self.hardware_profile)
        if not profile or any(v <= 0 for v in profile):
            raise ValueError(f"server {self.id}: hardware_profile entries must be > 0")
        object.__setattr__(self, "hardware_profile", profile)
        object.__setattr__(self, "reliability_class", ReliabilityClass(self.reliability_class))


@dataclass(frozen=True, eq=False)
class Region:
    id: int
    neighbors: frozenset = frozenset()
    # (relative demand weight, phase shift in minutes)
    demand_profile: tuple = (1.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "neighbors", frozenset(int(n) for n in self.neighbors))
        object.__setattr__(self, "demand_profile", tuple(float(v) for v in self.demand_profile))
        if self.id in self.neighbors:
            raise ValueError(f"region {self.id} lists itself as a neighbor")


@dataclass(frozen=True, eq=False)
class RequestCategory:
    id: int
    centroid: tuple

    def __post_init__(self):
        object.__setattr__(self, "centroid", tuple(float(v) for v in self.centroid))


@dataclass(frozen=True, eq=False)
class LiveRequest:
    id: int
    region: int
    features: tuple
    arrival_tick: int
    nominal_throughput: float
    category: Optional[int] = None

    def __post_init__(self):
        if not self.nominal_throughput > 0:
            raise ValueError(f"request {self.id}: nominal_throughput must be > 0")
        if self.arrival_tick < 0:
            raise ValueError(f"request {self.id}: arrival_tick must be >= 0")
        object.__setattr__(self, "features", tuple(float(v) for v in self.features))


@dataclass(frozen=True, eq=False)
class WorkloadWindow:
    """T x N telemetry slice, each value a fraction of capacity."""

    server_id: int
    start_tick: int
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, ndim=2, name="values")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("telemetry values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    @property
    def ticks(self):
        return range(self.start_tick, self.start_tick + self.T)


@dataclass(frozen=True, eq=False)
class RequestBatch:
    tick: int
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ShapeMismatch(f"counts must be M x I, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("request counts must be non-negative")
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ValueError("request counts must be integers")
        object.__setattr__(self, "counts", _frozen_array(counts, dtype=np.int64, ndim=2))


@dataclass(frozen=True, eq=False)
class EffectMatrices:
    """Revenue matrix ``A`` (Mbps per request) and serviceability mask ``S``."""

    A: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        A = _frozen_array(self.A, ndim=3, name="A")
        S = _frozen_array(self.S, dtype=np.int8, ndim=3, name="S")
        if A.shape != S.shape:
            raise ShapeMismatch(f"A {A.shape} and S {S.shape} differ")
        if np.any(A < 0):
            raise ValueError("A must be non-negative")
        if not np.isin(S, (0, 1)).all():
            raise ValueError("S must be binary")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "S", S)

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True, eq=False)
class DeviceAvailability:
    d: np.ndarray

    def __post_init__(self):
        d = _frozen_array(self.d, dtype=np.int8, ndim=1, name="d")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("availability vector must be binary")
        object.__setattr__(self, "d", d)

    @classmethod
    def all_available(cls, E):
        return cls(np.ones(E, dtype=np.int8))


@dataclass(frozen=True, eq=False)
class PreSchedule:
    x: np.ndarray
    collapsed: np.ndarray
    built_for_tick: int
    # per-(m, i) forecast demand the strategy could not place
    residual: Optional[np.ndarray] = None
    partial: bool = False

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 3:
            raise ShapeMismatch(f"x must be E x M x I, got {x.shape}")
        if np.any(x < 0) or not np.all(np.equal(np.mod(x, 1), 0)):
            raise ValueError("x must be a non-negative integer tensor")
        collapsed = _frozen_array(self.collapsed, ndim=2, name="collapsed")
        if collapsed.shape != (x.shape[0], x.shape[2]):
            raise ShapeMismatch("collapsed must be E x I")
        if np.any(collapsed < -1e-9):
            raise ValueError("collapsed strategy must be non-negative")
        object.__setattr__(self, "x", _frozen_array(x, dtype=np.int64))
        object.__setattr__(self, "collapsed", collapsed)
        if self.residual is not None:
            object.__setattr__(self, "residual", _frozen_array(self.residual, dtype=np.int64, ndim=2))

    def implied_utilization(self, A, capacities):
        """Per-server planned utilization ``sum_{m,i} x * A / B_e``."""
        return np.einsum("emi,emi->e", self.x, np.asarray(A, dtype=float)) / np.asarray(capacities, dtype=float)

    def check_capacity(self, A, capacities, limit=1.0, tol=1e-9):
        util = self.implied_utilization(A, capacities)
        if np.any(util > limit + tol):
            raise ValueError(f"strategy exceeds utilization {limit}: max {util.max():.4f}")
        return util


@dataclass(frozen=True, eq=False)
class ScheduleOutcome:
    tick: int
    placements: tuple
    device_anomaly_count: int
    service_anomaly_count: int
    utilization: np.ndarray
    revenue: float
    decision_time: float = 0.0
    dropped: tuple = ()
    raw_revenue: float = 0.0

    def __post_init__(self):
        placements = tuple((int(r), int(e)) for r, e in self.placements)
        ids = [r for r, _ in placements] + [int(r) for r in self.dropped]
        if len(ids) != len(set(ids)):
            raise ValueError("a request appears more than once in the outcome")
        util = _frozen_array(self.utilization, ndim=1, name="utilization")
        if np.any(util < 0):
            raise ValueError("utilization must be non-negative")
        object.__setattr__(self, "placements", placements)
        object.__setattr__(self, "dropped", tuple(int(r) for r in self.dropped))
        object.__setattr__(self, "utilization", util)


@dataclass(frozen=True, eq=False)
class Platform:
    """Validated platform descriptor with derived lookup arrays."""

    servers: tuple
    regions: tuple
    hops: np.ndarray = field(repr=False)

    @property
    def E(self):
        return len(self.servers)

    @property
    def M(self):
        return len(self.regions)

    @property
    def capacities(self):
        return np.array([s.bandwidth_capacity for s in self.servers], dtype=float)

    @property
    def server_regions(self):
        return np.array([s.region for s in self.servers], dtype=np.int64)

    @property
    def reliability(self):
        return np.array([int(s.reliability_class) for s in self.servers], dtype=np.int64)

    def distance(self, region_a, region_b):
        return int(self.hops[region_a, region_b])


def _hop_matrix(regions):
    M = len(regions)
    hops = np.full((M, M), M + 1, dtype=np.int64)
    for src in range(M):
        hops[src, src] = 0
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            for nb in sorted(regions[cur].neighbors):
                if hops[src, nb] > hops[src, cur] + 1:
                    hops[src, nb] = hops[src, cur] + 1
                    queue.append(nb)
    return hops


def validate_platform(servers, regions):
    """Check referential integrity and build a :class:`Platform`.

    Unreachable region pairs get distance ``M + 1``.
    """
    servers = tuple(servers)
    regions = tuple(sorted(regions, key=lambda r: r.id))
    if not servers or not regions:
        raise EmptyPlatform("platform needs at least one server and one region")
    ids = [r.id for r in regions]
    if ids != list(range(len(regions))):
        raise DanglingRegion(f"region ids must be 0..M-1, got {ids}")
    M = len(regions)
    for r in regions:
        bad = [n for n in r.neighbors if not 0 <= n < M]
        if bad:
            raise DanglingRegion(f"region {r.id} references unknown neighbors {bad}")
        for n in r.neighbors:
            if r.id not in regions[n].neighbors:
                raise ValueError(f"adjacency {r.id}-{n} is not symmetric")
    for s in servers:
        if not 0 <= s.region < M:
            raise DanglingRegion(f"server {s.id} references region {s.region} of {M}")
    server_ids = [s.id for s in servers]
    if server_ids != list(range(len(servers))):
        raise ValueError("server ids must be 0..E-1 in order")
    return Platform(servers=servers, regions=regions, hops=_frozen_array(_hop_matrix(regions), dtype=np.int64))


# ---------------------------------------------------------------------------
# line-delimited JSON records

_TYPES = {
    cls.__name__: cls
    for cls in (Server, Region, RequestCategory, LiveRequest, WorkloadWindow, RequestBatch,
                EffectMatrices, DeviceAvailability, PreSchedule, ScheduleOutcome)
}


def _encode(value):
    if isinstance(value, np.ndarray):
        return {"dtype": value.dtype.str, "shape": list(value.shape), "data": value.ravel().tolist()}
    if isinstance(value, (frozenset, set)):
        return sorted(value)
    if isinstance(value, IntEnum):
        return int(value)
    if isinstance(value, tuple):
        return [_encode(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value):
    if isinstance(value, dict) and set(value) == {"dtype", "shape", "data"}:
        return np.array(value["data"], dtype=np.dtype(value["dtype"])).reshape(value["shape"])
    return value


def to_record(obj):
    """Flatten a domain object into a JSON-able dict tagged with its type."""
    record = {"type": type(obj).__name__}
    for f in fields(obj):
        record[f.name] = _encode(getattr(obj, f.name))
    return record


def from_record(record):
    record = dict(record)
    kind = record.pop("type")
    if kind == "AnomalyEvent":
        from .simulator import AnomalyEvent

        scope = record.get("scope")
        return AnomalyEvent(**{**record, "scope": tuple(scope) if scope is not None else None})
    cls = _TYPES[kind]
    kwargs = {k: _decode(v) for k, v in record.items()}
    if cls is ScheduleOutcome:
        kwargs["placements"] = tuple(tuple(p) for p in kwargs["placements"])
    return cls(**kwargs)


def write_jsonl(path, objects: Iterable):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objects:
            if isinstance(obj, dict):
                record = obj
            elif hasattr(obj, "to_record"):
                record = obj.to_record()
            else:
                record = to_record(obj)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path, raw=False) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                record = json.loads(line)
                yield record if raw else from_record(record)
