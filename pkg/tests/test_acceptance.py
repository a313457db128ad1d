"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import itertools
import time

import numpy as np
import pytest

from oracles import central_difference, exhaustive_plan, flow_dp, tiny_instance
from sentinel_sim.detection.detector import build_detector, f1_score
from sentinel_sim.detection.vgru import elbo_gradients, init_params, negative_elbo
from sentinel_sim.domain import EffectMatrices
from sentinel_sim.harness import ExperimentConfig, revenue_advantage, run_experiment
from sentinel_sim.optim.flow import bipartite_min_cost_flow
from sentinel_sim.prescheduler import PlannerConfig, build_secants, pre_schedule, strategy_value
from sentinel_sim.revenue import RevenueCurve, revenue_efficiency
from sentinel_sim.simulator import SimConfig, World

SEEDS = range(5)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE #{n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1 -----------------------------------------------------------------------

def test_1_metric_correctness(capsys):
    t0 = time.perf_counter()
    curve = RevenueCurve(0.6, 0.2)
    u = np.linspace(0.0, 1.2, 1000)
    got = revenue_efficiency(curve, u)
    want = np.array([np.exp(-(x - 0.6) ** 2 / (2 * 0.2 ** 2)) for x in u.tolist()])
    worst = float(np.abs(got - want).max())
    lo, hi = curve.half_max_points()
    # half maximum located by bisection, independently of the closed form
    def bisect(a, b):
        for _ in range(200):
            m = 0.5 * (a + b)
            if (revenue_efficiency(curve, m) - 0.5) * (revenue_efficiency(curve, a) - 0.5) <= 0:
                b = m
            else:
                a = m
        return 0.5 * (a + b)
    half_err = max(abs(lo - bisect(0.0, 0.6)), abs(hi - bisect(0.6, 1.2)),
                   abs(lo - (0.6 - 0.2 * np.sqrt(2 * np.log(2)))))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and half_err <= 1e-9 and seconds < 1.0
    verdict(capsys, 1, ok, f"max error {worst:.1e}, half-max error {half_err:.1e}, {seconds:.3f}s")


# -- 2 -----------------------------------------------------------------------

def test_2_detector_gradients(capsys):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for c in range(20):
        rng = np.random.default_rng(c)
        params = init_params(2, 4, 5, 3, 2, seed=c)
        for k in params:
            params[k] = params[k] + rng.normal(0.0, 0.1, params[k].shape)
        x = rng.normal(0.0, 1.0, (2, 4, 2))
        eps = rng.standard_normal((2, 4, 3))
        gum = -np.log(-np.log(rng.random((2, 4, 2))))
        lam = float(rng.uniform(0.5, 2.0))
        loss = lambda p: float(negative_elbo(p, x, eps, gum, lam, needs_grad=False)[0].value)  # noqa: E731
        _, grads = elbo_gradients(params, x, eps, gum, lam)
        for name in params:
            cells = list(np.ndindex(params[name].shape))
            for j in rng.choice(len(cells), size=min(4, len(cells)), replace=False):
                idx = cells[j]
                num = central_difference(loss, params, name, idx)
                ana = grads[name][idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
                checked += 1
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-4 and seconds < 30
    verdict(capsys, 2, ok, f"{checked} partials, worst relative error {worst:.1e}, {seconds:.1f}s")


# -- 3 -----------------------------------------------------------------------

def test_3_detector_efficacy(capsys):
    t0 = time.perf_counter()
    world = World(SimConfig(seed=0, E=30, days=3, device_tick_fraction=0.1))
    P, T = world.config.ticks_per_day, 12
    det, _ = build_detector(world.telemetry, world.down, world.platform.reliability, range(P), T=T, seed=0)
    tel = world.telemetry
    pred, truth = [], []
    for t in range(P + T, 3 * P + 1):
        d, _ = det.detect(np.ascontiguousarray(tel[t - T:t].transpose(1, 0, 2)))
        pred.append(d == 0)
        truth.append(world.down[t - 1])
    f1 = f1_score(np.array(pred), np.array(truth))
    seconds = time.perf_counter() - t0
    ok = f1 >= 0.8 and det.model_calls == det.ambiguous_seen and seconds < 600
    verdict(capsys, 3, ok, f"F1 {f1:.3f}, model calls {det.model_calls} = ambiguous {det.ambiguous_seen}, "
                           f"device ticks {world.down.mean():.3f}, {seconds:.0f}s")


# -- 4 -----------------------------------------------------------------------

def test_4_optimizer_oracle(capsys):
    t0 = time.perf_counter()
    curve = RevenueCurve(0.6, 0.2)
    rng = np.random.default_rng(0)
    n = within = exceed = broken = 0
    while n < 200:
        R, A, S, D, caps = tiny_instance(rng)
        best, _ = exhaustive_plan(R, A, S, D, caps, curve, 0.6)
        if best is None:
            continue
        n += 1
        ps = pre_schedule(0, R.astype(float), EffectMatrices(A, S), D, caps, curve, PlannerConfig(weighting="unit"))
        value = strategy_value(ps, A, caps, D.astype(float), curve)
        feasible = (np.array_equal(ps.x.sum(axis=0), R) and ps.x[D == 0].sum() == 0 and np.all(ps.x[S == 0] == 0)
                    and np.all(ps.implied_utilization(A, caps) <= 0.6 + 1e-9))
        broken += not feasible
        exceed += value > best + 1e-9
        within += value >= 0.9 * best
    seconds = time.perf_counter() - t0
    ok = within >= 0.9 * n and exceed == 0 and broken == 0 and seconds < 120
    verdict(capsys, 4, ok, f"{within}/{n} within 10%, {exceed} above optimum, {broken} infeasible, {seconds:.0f}s")


# -- 5 -----------------------------------------------------------------------

def dense_gap(curve, J):
    sec = build_secants(curve, J)
    u = np.linspace(0.0, curve.u_opt, 200_001)
    return float(np.abs(revenue_efficiency(curve, u) - np.interp(u, sec.breakpoints, sec.values)).max())


def test_5_secant_quality(capsys):
    t0 = time.perf_counter()
    gap = dense_gap(RevenueCurve(0.6, 0.2), 16)
    seconds = time.perf_counter() - t0
    verdict(capsys, "5a", gap <= 0.01 and seconds < 5, f"max gap {gap:.5f} at J=16, {seconds:.2f}s")


@pytest.mark.xfail(strict=True, reason="interpolation error is second order: doubling J quarters the gap")
def test_5_secant_gap_halves(capsys):
    curve = RevenueCurve(0.6, 0.2)
    ratio = dense_gap(curve, 32) / dense_gap(curve, 16)
    verdict(capsys, "5b", 0.4 <= ratio <= 0.6, f"gap(J=32)/gap(J=16) = {ratio:.3f}, target 0.5 +/- 20%")


# -- 6 -----------------------------------------------------------------------

def test_6_max_flow_oracle(capsys):
    t0 = time.perf_counter()
    n = bad = 0
    for P, E in itertools.product(range(1, 5), repeat=2):
        rng = np.random.default_rng(100 * P + E)
        for _ in range(64):
            supply = rng.integers(0, 6, P)
            cap = rng.integers(0, 6, E)
            cost = rng.integers(-5, 6, (P, E))
            arc = rng.integers(0, 6, (P, E))
            flow = bipartite_min_cost_flow(supply, cap, cost, arc)
            f_ref, c_ref = flow_dp(supply, cap, cost, arc)
            valid = (np.all(flow <= arc) and np.all(flow.sum(axis=1) <= supply) and np.all(flow.sum(axis=0) <= cap)
                     and np.all(flow >= 0))
            bad += not (valid and flow.sum() == f_ref and abs(float((flow * cost).sum()) - c_ref) < 1e-9)
            n += 1
    seconds = time.perf_counter() - t0
    verdict(capsys, 6, n >= 500 and bad == 0 and seconds < 60, f"{n - bad}/{n} instances match, {seconds:.1f}s")


# -- 7 and 9 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def default_runs():
    t0 = time.perf_counter()
    reports = [run_experiment(ExperimentConfig(sim=SimConfig(seed=s))) for s in SEEDS]
    return reports, time.perf_counter() - t0


def test_7_end_to_end(capsys, default_runs):
    reports, seconds = default_runs
    base = ("origin", "gp", "greedy", "mf")
    pooled = {}
    for s in ("sentinel",) + base:
        bad = sum(r.totals(s)["device_anomalies"] + r.totals(s)["service_anomalies"] for r in reports)
        pooled[s] = bad / sum(r.totals(s)["placed"] for r in reports)
    ratio = pooled["sentinel"] / min(pooled[s] for s in base)
    lines, ok = [], ratio <= 0.5
    for seed, r in zip(SEEDS, reports):
        t = {s: r.totals(s) for s in r.schedulers}
        sen = t["sentinel"]
        u_opt = r.counters["trained_u_opt"]
        checks = {
            "beats origin/gp/mf": all(sen["revenue"] > t[s]["revenue"] for s in ("origin", "gp", "mf")),
            "beats greedy realized": sen["revenue"] > t["greedy"]["revenue"],
            "within 15% of greedy raw": sen["revenue"] >= 0.85 * t["greedy"]["raw_revenue"],
            "utilization cap": sen["mean_utilization"] <= u_opt + 0.05,
        }
        ok &= all(checks.values())
        best = min(t[s]["anomaly_frequency"] for s in base)
        lines.append(f"seed {seed}: anomaly {sen['anomaly_frequency']:.3f} vs best baseline {best:.3f}, revenue "
                     f"{sen['revenue']:.0f} vs origin {t['origin']['revenue']:.0f} / greedy raw "
                     f"{t['greedy']['raw_revenue']:.0f}, utilization {sen['mean_utilization']:.3f} "
                     f"(u_opt {u_opt:.2f}) {'' if all(checks.values()) else [k for k, v in checks.items() if not v]}")
    ok &= seconds < 30 * 60
    with capsys.disabled():
        print("\n" + "\n".join(lines))
    verdict(capsys, 7, ok, f"pooled anomaly ratio {ratio:.3f}, {seconds / 60:.1f} min for {len(reports)} seeds")


def test_9_robustness_slices(capsys, default_runs):
    reports, seconds = default_runs
    by_class = revenue_advantage(reports, "reliability_cluster")
    by_period = revenue_advantage(reports, "time_period")
    classes = sorted(by_class, key=int)
    adv = [by_class[c] for c in classes]
    monotone = all(b >= a for a, b in zip(adv, adv[1:]))
    peaks = by_period["peak_1"] > 0 and by_period["peak_2"] > 0
    ok = monotone and peaks and seconds < 30 * 60
    verdict(capsys, 9, ok, "retention advantage by class " + ", ".join(f"{c}: {v:+.3f}" for c, v in zip(classes, adv))
            + f"; peak_1 {by_period['peak_1']:+.3f}, peak_2 {by_period['peak_2']:+.3f}")


# -- 8 -----------------------------------------------------------------------

def test_8_proactive_timing(capsys):
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig(sim=SimConfig(seed=0), train_days=2, test_days=1,
                                          schedulers=("sentinel", "sentinel-inline")))
    rows = {r["scheduler"]: r for r in rep.timings}
    post = rows["sentinel"]["post_seconds"] / rows["sentinel"]["ticks"]
    inline = rows["sentinel-inline"]
    inline_post = inline["post_seconds"] / inline["ticks"]
    inline_total = inline["pre_seconds"] + inline["post_seconds"]
    seconds = time.perf_counter() - t0
    ok = post <= 0.7 * inline_post and inline_total >= 3 * rows["sentinel"]["post_seconds"] and seconds < 600
    verdict(capsys, 8, ok, f"post per tick {1e3 * post:.2f} ms vs inline {1e3 * inline_post:.2f} ms "
                           f"(ratio {post / inline_post:.3f}), inline total / post = "
                           f"{inline_total / rows['sentinel']['post_seconds']:.1f}x, {seconds:.0f}s")


# -- 10 ----------------------------------------------------------------------

def test_10_determinism_and_conservation(capsys, tmp_path, default_runs):
    sim = SimConfig(seed=4, E=8, M=3, I=4, ticks_per_day=360)
    cfg = dict(train_days=1, test_days=2, detector_epochs=3, detector_windows=300,
               schedulers=("sentinel", "origin", "gp", "greedy", "mf", "sentinel-inline"))
    run_experiment(ExperimentConfig(sim=sim, out_dir=str(tmp_path / "a"), **cfg))
    run_experiment(ExperimentConfig(sim=sim, out_dir=str(tmp_path / "b"), **cfg))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("report.csv", "slices.csv", "summary.json"))
    # per-tick conservation is enforced inside run_experiment; totals must agree too
    reports, _ = default_runs
    conserved = all(r.totals(s)["placed"] + r.totals(s)["dropped"] == r.totals(s)["arrivals"]
                    for r in reports for s in r.schedulers)
    verdict(capsys, 10, same and conserved, f"byte-identical rerun: {same}, totals conserved: {conserved}")
