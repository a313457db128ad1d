import numpy as np
import pytest

from oracles import flow_dp
from sentinel_sim.baselines import gp, greedy, max_flow, origin
from sentinel_sim.domain import Region, Server, validate_platform


def platform(caps, regions_of, n_regions=1):
    servers = [Server(e, r, float(c), (1, 1, 1, 1)) for e, (c, r) in enumerate(zip(caps, regions_of))]
    nb = lambda m: {k for k in (m - 1, m + 1) if 0 <= k < n_regions}
    return validate_platform(servers, [Region(m, nb(m)) for m in range(n_regions)])


# -- origin ------------------------------------------------------------------

def test_origin_picks_larger_capacity():
    plat = platform([50, 80], [0, 0])
    assert origin(np.array([0]), np.array([10.0]), plat).tolist() == [1]


def test_origin_sequential_drain():
    plat = platform([75, 80], [0, 0])
    assert origin(np.array([0, 0]), np.array([10.0, 10.0]), plat).tolist() == [1, 0]


def test_origin_never_drops():
    # ignores availability and even exhausted bandwidth
    plat = platform([5], [0])
    assert origin(np.zeros(4, int), np.full(4, 10.0), plat).tolist() == [0, 0, 0, 0]


# -- gp ----------------------------------------------------------------------

def test_gp_same_region():
    plat = platform([10, 10], [1, 0], 2)
    assert gp(np.array([0]), np.array([1.0]), plat).tolist() == [1]


def test_gp_neighbour_when_full():
    plat = platform([10, 1], [1, 0], 2)
    assert gp(np.array([0, 0]), np.array([2.0, 2.0]), plat).tolist() == [1, 0]


def test_gp_tie_to_lower_id():
    plat = platform([10, 10, 10], [1, 1, 0], 2)
    assert gp(np.array([0, 0]), np.array([1.0, 20.0]), plat).tolist() == [2, 2]
    assert gp(np.array([1]), np.array([1.0]), plat).tolist() == [0]


# -- greedy ------------------------------------------------------------------

def test_greedy_argmax():
    plat = platform([100, 100, 100], [0, 0, 0])
    A = np.array([3.0, 9.0, 5.0]).reshape(3, 1, 1)
    assert greedy(np.array([0]), np.array([0]), A, plat).tolist() == [1]


def test_greedy_second_best_when_full():
    plat = platform([100, 5, 100], [0, 0, 0])
    A = np.array([3.0, 9.0, 5.0]).reshape(3, 1, 1)
    assert greedy(np.array([0]), np.array([0]), A, plat).tolist() == [2]


def test_greedy_uses_full_capacity():
    plat = platform([10], [0])
    A = np.full((1, 1, 1), 5.0)
    assert greedy(np.zeros(3, int), np.zeros(3, int), A, plat).tolist() == [0, 0, -1]


def a_revenue(assign, regions, cats, A):
    ok = assign >= 0
    return A[assign[ok], regions[ok], cats[ok]].sum()


@pytest.mark.parametrize("seed", range(50))
def test_greedy_beats_gp_on_small_instances(seed):
    rng = np.random.default_rng(seed)
    E, M, I, n = 4, 2, 3, 12
    plat = platform(rng.uniform(10, 40, E), np.r_[0, 1, rng.integers(0, M, E - 2)], M)
    A = rng.uniform(1, 6, (E, M, I))
    regions, cats = rng.integers(0, M, n), rng.integers(0, I, n)
    nominal = np.array([A[:, m, i].mean() for m, i in zip(regions, cats)])
    g = a_revenue(greedy(regions, cats, A, plat), regions, cats, A)
    p = a_revenue(gp(regions, nominal, plat), regions, cats, A)
    assert g >= p - 1e-9


# -- max flow ------------------------------------------------------------------

def test_mf_zero_demand():
    plat = platform([10, 10], [0, 0])
    out = max_flow(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.ones((2, 1, 1)), plat)
    assert out.size == 0


def test_mf_bottleneck():
    plat = platform([4.0], [0])
    out = max_flow(np.zeros(7, int), np.zeros(7, int), np.ones(7), np.ones((1, 1, 1)), plat)
    assert (out >= 0).sum() == 4


def test_mf_routes_to_high_revenue_server():
    plat = platform([3, 3], [0, 0])
    A = np.array([1.0, 4.0]).reshape(2, 1, 1)
    out = max_flow(np.zeros(4, int), np.zeros(4, int), np.ones(4), A, plat)
    assert np.bincount(out, minlength=2).tolist() == [1, 3]


@pytest.mark.parametrize("seed", range(20))
def test_mf_flow_value_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    plat = platform(rng.integers(1, 6, 2), [0, 0])
    regions = np.zeros(rng.integers(1, 8), int)
    cats = rng.integers(0, 2, regions.size)
    A = rng.integers(1, 5, (2, 1, 2)).astype(float)
    out = max_flow(regions, cats, np.ones(regions.size), A, plat)
    supply = np.bincount(cats, minlength=2)
    flow, _ = flow_dp(supply, plat.capacities.astype(int), -A[:, 0, :].T, np.full((2, 2), 99))
    assert (out >= 0).sum() == flow
    load = np.bincount(out[out >= 0], minlength=2)
    assert np.all(load <= plat.capacities)


def test_baselines_conserve_requests():
    rng = np.random.default_rng(1)
    plat = platform(rng.uniform(5, 30, 5), rng.integers(0, 3, 5), 3)
    n = 40
    regions, cats = rng.integers(0, 3, n), rng.integers(0, 2, n)
    nominal = rng.uniform(0.5, 4, n)
    A = rng.uniform(0.5, 4, (5, 3, 2))
    for assign in (origin(regions, nominal, plat), gp(regions, nominal, plat), greedy(regions, cats, A, plat),
                   max_flow(regions, cats, nominal, A, plat)):
        assert assign.shape == (n,)
        assert (assign >= 0).sum() + (assign < 0).sum() == n
