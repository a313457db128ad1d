import numpy as np
import pytest

from sentinel_sim.baselines import origin
from sentinel_sim.domain import N_DIMS
from sentinel_sim.exceptions import InvalidConfig, UnknownRequest, UnknownServer
from sentinel_sim.simulator import (AnomalyEvent, AnomalyKind, SimConfig, TickArrivals, World, adjudicate,
                                    device_down_mask, generate_platform, generate_requests, generate_telemetry)


@pytest.fixture(scope="module")
def small_world():
    return World(SimConfig(seed=1, E=10, M=2, I=4, days=3))


def test_platform_properties():
    servers, regions = generate_platform(SimConfig(seed=1, E=10, M=2))
    assert len(servers) == 10
    assert {s.region for s in servers} == {0, 1}
    caps = [s.bandwidth_capacity for s in servers]
    assert max(caps) / min(caps) >= 10


def test_platform_is_deterministic():
    a, _ = generate_platform(SimConfig(seed=4))
    b, _ = generate_platform(SimConfig(seed=4))
    assert [(s.region, s.bandwidth_capacity, s.hardware_profile) for s in a] == \
           [(s.region, s.bandwidth_capacity, s.hardware_profile) for s in b]


@pytest.mark.parametrize("kwargs", [dict(E=0), dict(E=3, M=5), dict(days=0),
                                    dict(device_anomaly_share=0.7, service_anomaly_share=0.5),
                                    dict(overall_anomaly_rate=1.5)])
def test_invalid_config(kwargs):
    with pytest.raises(InvalidConfig):
        SimConfig(**kwargs)


def test_unknown_config_key():
    with pytest.raises(InvalidConfig):
        SimConfig.from_dict({"servers": 3})


def test_failure_frequency_increases_with_class():
    world = World(SimConfig(seed=2, days=3))
    down = world.down.mean(axis=0)
    cls = world.platform.reliability
    means = [down[cls == c].mean() for c in range(4)]
    assert all(b > a for a, b in zip(means, means[1:]))


# -- telemetry -------------------------------------------------------------

def test_healthy_dimensions_co_move(small_world):
    s = small_world.platform.servers[0]
    tel = generate_telemetry(small_world.config, s, range(1440))
    assert np.corrcoef(tel[:, 1], tel[:, 3])[0, 1] > 0.5


def test_device_event_inflates_variance(small_world):
    cfg = small_world.config
    s = small_world.platform.servers[0]
    ev = AnomalyEvent(AnomalyKind.DEVICE, s.id, 600, 719, severity=10.0)
    healthy = generate_telemetry(cfg, s, range(600, 720))
    broken = generate_telemetry(cfg, s, range(600, 720), [ev])
    # detrended fluctuation variance, per dimension
    resid = lambda x: x - np.convolve(x, np.ones(15) / 15, mode="same")
    hv = np.array([resid(healthy[:, n])[10:-10].var() for n in range(N_DIMS)])
    bv = np.array([resid(broken[:, n])[10:-10].var() for n in range(N_DIMS)])
    assert np.all(bv >= 5 * hv)


def test_empty_tick_range(small_world):
    assert generate_telemetry(small_world.config, small_world.platform.servers[0], range(0)).shape == (0, N_DIMS)


def test_telemetry_slices_are_consistent(small_world):
    cfg, s = small_world.config, small_world.platform.servers[2]
    full = generate_telemetry(cfg, s, range(1400, 1500))
    part = generate_telemetry(cfg, s, range(1450, 1460))
    assert np.array_equal(full[50:60], part)


# -- requests --------------------------------------------------------------

def test_batch_matches_request_list(small_world):
    batch, requests = generate_requests(small_world.config, 700, small_world)
    assert batch.counts.sum() == len(requests)
    assert len({r.id for r in requests}) == len(requests)


def test_same_tick_same_batch(small_world):
    a, _ = generate_requests(small_world.config, 123, small_world)
    b, _ = generate_requests(small_world.config, 123, World(small_world.config))
    assert np.array_equal(a.counts, b.counts)


def test_two_daily_peaks(small_world):
    per_hour = np.array([sum(len(small_world.arrivals(d * 1440 + h * 60 + k)) for d in range(2) for k in range(0, 60, 5))
                         for h in range(24)])
    peak = per_hour[[12, 13, 20, 21]].mean()
    trough = per_hour[[3, 4, 5]].mean()
    assert peak > 2 * trough
    assert per_hour[16] < per_hour[12] and per_hour[16] < per_hour[21]


# -- adjudication ----------------------------------------------------------

def one_request(world, tick, region=0, nominal=5.0):
    feats = np.array([[0.0, 0.0, nominal]])
    return TickArrivals(tick, np.array([tick * 100_000]), np.array([region]), np.array([0]), feats,
                        np.array([nominal]))


def test_request_on_downed_server(small_world):
    t, e = next((t, e) for t in range(small_world.config.horizon) for e in range(10) if small_world.down[t, e])
    res = small_world.adjudicate(one_request(small_world, t), np.array([e]))
    assert res.device_fail.sum() == 1
    assert res.revenue == 0.0
    assert res.outcome().device_anomaly_count == 1


def test_utilization_is_throughput_over_capacity():
    world = World(SimConfig(seed=3, E=4, M=1, I=2, days=1, overall_anomaly_rate=0.0))
    world.throughput_factor = np.ones_like(world.throughput_factor)
    e = int(np.argmin(np.abs(world.platform.capacities - 100)))
    res = world.adjudicate(one_request(world, 10), np.array([e]))
    assert res.utilization[e] == pytest.approx(res.throughput[0] / world.platform.capacities[e])
    assert res.throughput[0] == pytest.approx(5.0, rel=0.25)


def test_replay_is_identical(small_world):
    arr = small_world.arrivals(800)
    assign = origin(arr.region, arr.nominal, small_world.platform)
    a = small_world.adjudicate(arr, assign)
    b = World(small_world.config).adjudicate(small_world.arrivals(800), assign)
    assert np.array_equal(a.service_fail, b.service_fail)
    assert a.revenue == b.revenue


def test_unknown_request_and_server(small_world):
    arr = small_world.arrivals(50)
    with pytest.raises(UnknownRequest):
        adjudicate([(-7, 0)], 50, small_world, arr)
    with pytest.raises(UnknownServer):
        adjudicate([(int(arr.ids[0]), 99)], 50, small_world, arr)


def test_zero_anomaly_rate_means_no_anomalies():
    world = World(SimConfig(seed=0, E=8, M=2, I=3, days=1, overall_anomaly_rate=0.0))
    assert not world.down.any()
    for t in range(600, 700, 10):
        arr = world.arrivals(t)
        res = world.adjudicate(arr, origin(arr.region, arr.nominal, world.platform))
        assert res.service_fail.sum() == 0 and res.device_fail.sum() == 0


def test_down_mask_matches_events(small_world):
    mask = device_down_mask(small_world.config, 10, small_world.events)
    assert np.array_equal(mask, small_world.down)


# -- calibration -----------------------------------------------------------

def test_origin_anomaly_rate_matches_configuration():
    cfg = SimConfig(seed=0, days=3)
    world = World(cfg)
    placed = failed = 0
    for t in range(1440, 3 * 1440, 4):
        arr = world.arrivals(t)
        res = world.adjudicate(arr, origin(arr.region, arr.nominal, world.platform))
        placed += int(res.placed.sum())
        failed += int(res.device_fail.sum() + res.service_fail.sum())
    assert failed / placed == pytest.approx(cfg.overall_anomaly_rate, rel=0.10)


def test_service_anomalies_favour_inter_region_and_peak():
    world = World(SimConfig(seed=5, E=12, M=3, I=4, days=3))
    rng = np.random.default_rng(0)
    fails = np.zeros((2, 2))
    totals = np.zeros((2, 2))
    for t in range(0, 3 * 1440, 7):
        arr = world.arrivals(t)
        assign = rng.integers(0, world.platform.E, len(arr))
        res = world.adjudicate(arr, assign)
        live = res.placed & ~res.device_fail
        rel = world.relation[assign, arr.region][live]
        pk = int(world.is_peak(t))
        for r in (0, 1):
            totals[r, pk] += (rel == r).sum()
            fails[r, pk] += res.service_fail[live][rel == r].sum()
    rate = fails / totals
    assert fails[1].sum() / totals[1].sum() > fails[0].sum() / totals[0].sum()
    assert fails[:, 1].sum() / totals[:, 1].sum() > fails[:, 0].sum() / totals[:, 0].sum()
    assert np.all(rate[1] > rate[0])
    assert np.all(rate[:, 1] > rate[:, 0])
