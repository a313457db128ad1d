import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sentinel_sim.domain import (DeviceAvailability, EffectMatrices, LiveRequest, PreSchedule, Region,
                                 RequestBatch, RequestCategory, ScheduleOutcome, Server, WorkloadWindow,
                                 from_record, read_jsonl, to_record, validate_platform, write_jsonl)
from sentinel_sim.exceptions import DanglingRegion, EmptyPlatform, ShapeMismatch
from sentinel_sim.simulator import AnomalyEvent, AnomalyKind


def server(i, region=0, cap=100.0):
    return Server(i, region, cap, (1.0, 1.0, 1.0, 1.0))


def test_two_servers_one_region():
    plat = validate_platform([server(0), server(1)], [Region(0)])
    assert (plat.E, plat.M) == (2, 1)


def test_dangling_region():
    regions = [Region(0, {1}), Region(1, {0, 2}), Region(2, {1})]
    with pytest.raises(DanglingRegion):
        validate_platform([server(0, region=5)], regions)


def test_empty_platform():
    with pytest.raises(EmptyPlatform):
        validate_platform([], [Region(0)])


def test_hop_distances_on_a_path():
    regions = [Region(0, {1}), Region(1, {0, 2}), Region(2, {1})]
    plat = validate_platform([server(0)], regions)
    assert plat.distance(0, 2) == 2
    assert plat.distance(1, 1) == 0


def test_asymmetric_adjacency_rejected():
    with pytest.raises(ValueError):
        validate_platform([server(0)], [Region(0, {1}), Region(1)])


@pytest.mark.parametrize("bad", [
    lambda: Server(0, 0, 0.0, (1, 1, 1, 1)),
    lambda: Server(0, 0, 10.0, (1, 0, 1, 1)),
    lambda: LiveRequest(0, 0, (1.0,), 0, 0.0),
    lambda: LiveRequest(0, 0, (1.0,), -1, 2.0),
    lambda: WorkloadWindow(0, 0, np.full((3, 4), 1.5)),
    lambda: RequestBatch(0, np.array([[1, -1]])),
    lambda: EffectMatrices(np.ones((1, 1, 2)), np.array([[[1, 2]]])),
    lambda: DeviceAvailability(np.array([0, 2])),
])
def test_invalid_construction(bad):
    with pytest.raises(ValueError):
        bad()


def test_effect_shapes_must_match():
    with pytest.raises(ShapeMismatch):
        EffectMatrices(np.ones((2, 1, 1)), np.ones((1, 1, 1)))


def test_arrays_are_read_only():
    w = WorkloadWindow(0, 0, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        w.values[0, 0] = 0.5


def test_outcome_rejects_duplicate_request():
    with pytest.raises(ValueError):
        ScheduleOutcome(0, [(1, 0), (1, 1)], 0, 0, np.zeros(2), 0.0)


def _roundtrip(obj, tmp_path):
    path = tmp_path / "rec.jsonl"
    write_jsonl(path, [obj])
    (back,) = list(read_jsonl(path))
    return back


SAMPLES = [
    server(3, region=1, cap=250.5),
    Region(2, {0, 1}, (0.7, 30.0)),
    RequestCategory(4, (1.0, 2.0, 3.5)),
    LiveRequest(9, 1, (0.1, 0.2, 4.0), 17, 4.25, category=2),
    WorkloadWindow(1, 40, np.linspace(0, 1, 48).reshape(12, 4)),
    RequestBatch(5, np.array([[1, 0, 3], [2, 2, 0]])),
    EffectMatrices(np.random.default_rng(0).random((2, 3, 2)), np.ones((2, 3, 2))),
    DeviceAvailability(np.array([1, 0, 1])),
    PreSchedule(np.ones((2, 1, 2)), np.full((2, 2), 0.5), 7),
    ScheduleOutcome(3, [(1, 0), (2, 1)], 1, 0, np.array([0.1, 0.0]), 12.5, 0.3, dropped=(4,)),
    AnomalyEvent(AnomalyKind.SERVICE, 2, 10, 20, scope=(1, 3), severity=2.0),
]


@pytest.mark.parametrize("obj", SAMPLES, ids=lambda o: type(o).__name__)
def test_jsonl_roundtrip(obj, tmp_path):
    back = _roundtrip(obj, tmp_path)
    assert type(back) is type(obj)
    record = (lambda o: o.to_record() if hasattr(o, "to_record") else to_record(o))
    assert record(back) == record(obj)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 2), elements=st.floats(0, 1e6, allow_subnormal=True)))
def test_matrix_roundtrip_is_bit_exact(A):
    em = EffectMatrices(A, np.ones_like(A))
    back = from_record(to_record(em))
    assert back.A.tobytes() == em.A.tobytes()
    assert back.A.dtype == em.A.dtype
