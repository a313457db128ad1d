import numpy as np
import pytest

from sentinel_sim.domain import LiveRequest, RequestBatch
from sentinel_sim.exceptions import InsufficientHistory, TooFewPoints, Unfitted
from sentinel_sim.service_effect import (EffectEstimator, SeasonalNaiveForecaster, assign_category,
                                         estimate_effects, fit_clusters, forecast)


# -- clustering --------------------------------------------------------------

def test_single_cluster_is_the_mean():
    X = np.random.default_rng(0).normal(size=(50, 3))
    model = fit_clusters(X, k=1)
    assert np.allclose(model.cluster_centers_[0], X.mean(axis=0))


def test_separated_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 0.1, (40, 2))
    b = rng.normal(0, 0.1, (40, 2)) + [10.0, 10.0]
    model = fit_clusters(np.vstack([a, b]), k=2, seed=3)
    labels = model.labels_
    assert len(set(labels[:40])) == 1 and len(set(labels[40:])) == 1
    assert labels[0] != labels[-1]


def test_clustering_is_deterministic():
    X = np.random.default_rng(2).random((200, 3))
    assert np.array_equal(fit_clusters(X, 5, seed=7).cluster_centers_, fit_clusters(X, 5, seed=7).cluster_centers_)


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        fit_clusters(np.ones((10, 2)), k=2)


def _fixed_model(centers):
    model = fit_clusters(np.asarray(centers, dtype=float), k=len(centers))
    model.cluster_centers_ = np.asarray(centers, dtype=float)
    return model


def test_request_at_centroid():
    model = _fixed_model([[0, 0], [5, 5], [9, 0]])
    req = LiveRequest(0, 0, (5.0, 5.0), 0, 1.0)
    assert assign_category(model, req) == 1


def test_tie_goes_to_lower_id():
    centers = [[0, 0], [1, 0], [2, 0], [9, 9], [9, -9], [4, 0]]
    model = _fixed_model(centers)
    assert assign_category(model, (3.0, 0.0)) == 2


def test_translation_invariance():
    rng = np.random.default_rng(4)
    centers = rng.random((6, 3))
    shift = rng.normal(size=3) * 10
    for point in rng.random((20, 3)):
        a = assign_category(_fixed_model(centers), point)
        b = assign_category(_fixed_model(centers + shift), point + shift)
        assert a == b


# -- forecasting -------------------------------------------------------------

def test_periodic_history_is_a_fixed_point():
    P = 48
    day = np.random.default_rng(0).integers(0, 9, (P, 2, 3)).astype(float)
    hist = np.concatenate([day, day, day[:10]])
    f = SeasonalNaiveForecaster(period=P, window=6)
    assert np.allclose(f.forecast(hist), hist[len(hist) - P])


def test_zero_history():
    f = SeasonalNaiveForecaster(period=10, window=3)
    assert np.all(forecast(f, np.zeros((25, 2, 2))) == 0)


def test_level_shift_raises_forecast():
    P, w = 40, 5
    base = np.full((2 * P, 1, 1), 4.0)
    shifted = base.copy()
    shifted[-w:] += 10
    f = SeasonalNaiveForecaster(period=P, window=w)
    naive = shifted[len(shifted) - P]
    assert np.all(f.forecast(shifted) >= naive)
    assert f.forecast(shifted)[0, 0] == pytest.approx(naive[0, 0] + 0.5 * 10)


def test_accepts_request_batches():
    batches = [RequestBatch(t, np.full((1, 2), t % 3)) for t in range(6)]
    assert forecast(SeasonalNaiveForecaster(period=3, window=1), batches).tolist() == [[0.0, 0.0]]


def test_insufficient_history():
    with pytest.raises(InsufficientHistory):
        SeasonalNaiveForecaster(period=10).forecast(np.zeros((5, 1, 1)))


# -- effect estimation -------------------------------------------------------

def test_mean_throughput_without_smoothing():
    est = EffectEstimator(alpha=0.0).fit([0, 0], [0, 0], [0, 0], [0, 0], [4.0, 6.0], [0, 0], E=1, I=1)
    eff = estimate_effects(est, [0], peak=False, M=1)
    assert eff.A[0, 0, 0] == pytest.approx(5.0)


def test_mostly_anomalous_cell_is_unserviceable():
    n = 10
    est = EffectEstimator().fit(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.ones(n),
                                np.r_[np.ones(9), 0.0], E=1, I=1)
    assert estimate_effects(est, [0], M=1).S[0, 0, 0] == 0


def test_unseen_cell_backs_off_to_global_mean():
    est = EffectEstimator().fit([0, 0, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0], [2.0, 4.0, 6.0], [0, 0, 1], E=2, I=2)
    eff, p = est.estimate(np.array([0, 0]), peak=False, M=1)
    assert eff.A[0, 0, 1] == pytest.approx(4.0)
    assert p[1, 0, 1] == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(10))
def test_more_anomalies_never_restore_service(seed):
    rng = np.random.default_rng(seed)
    n = 60
    cols = [rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 2, n),
            rng.uniform(1, 5, n), (rng.random(n) < 0.5).astype(float)]
    cell = tuple(int(v) for v in rng.integers(0, 2, 4))
    extra = [np.r_[c, v] for c, v in zip(cols, cell + (3.0, 1.0))]
    before = EffectEstimator().fit(*cols, E=2, I=2)
    after = EffectEstimator().fit(*extra, E=2, I=2)
    for peak in (False, True):
        s0 = before.estimate(np.array([0, 1]), peak, 2)[0].S
        s1 = after.estimate(np.array([0, 1]), peak, 2)[0].S
        assert np.all(s1 <= s0)


def test_unfitted():
    with pytest.raises(Unfitted):
        EffectEstimator().estimate(np.array([0]), False, 1)


def test_json_roundtrip():
    est = EffectEstimator(alpha=2.0).fit([0, 1], [1, 0], [0, 1], [1, 0], [3.0, 5.0], [1, 0], E=2, I=2)
    back = EffectEstimator.from_json(est.to_json())
    assert np.array_equal(back.A_table_, est.A_table_)
    assert np.array_equal(back.p_table_, est.p_table_)


def test_sklearn_params():
    est = EffectEstimator(alpha=3.0)
    assert est.get_params() == {"alpha": 3.0, "s_threshold": 0.5}
