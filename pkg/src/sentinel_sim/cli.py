"""``sentinel-sim`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
Every configuration key can be overridden through ``SENTINEL_SIM_<KEY>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .domain import (DeviceAvailability, EffectMatrices, RequestBatch, WorkloadWindow, from_record, read_jsonl,
                     to_record, write_jsonl)
from .exceptions import ConfigError, SentinelError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("sentinel_sim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def load_config(path=None, environ=None, overrides=None):
    """Config file (JSON, flat keys), then environment, then explicit overrides."""
    from .harness import ExperimentConfig, env_overrides

    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update(env_overrides(environ))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_flat(data)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    from .harness import run_experiment

    overrides = {"seed": args.seed, "out_dir": args.out}
    if args.scheduler:
        overrides["schedulers"] = tuple(args.scheduler)
    config = load_config(args.config, overrides=overrides)
    if config.out_dir is None:
        config = dataclasses.replace(config, out_dir="report")
    report = run_experiment(config, progress=lambda s, d: log.info("%s: day %d done", s, d))
    for s in report.schedulers:
        t = report.totals(s)
        print(f"{s:>16}  anomaly {t['anomaly_frequency']:.4f}  revenue {t['revenue']:.1f}  "
              f"utilization {t['mean_utilization']:.3f}  dropped {t['dropped']}")
    print(f"report written to {config.out_dir}")
    return EXIT_OK


def cmd_compare(args):
    from .harness import Report, compare

    reports = []
    for p in args.reports:
        try:
            reports.append(Report.load(p))
        except FileNotFoundError as exc:
            raise ConfigError(f"no report at {p}") from exc
    result = compare(reports)
    print(result.summary)
    if args.out:
        Path(args.out).write_text(result.to_csv())
    return EXIT_OK


def _sim_config(args):
    from .simulator import SimConfig

    data = load_config(args.config).sim.to_dict()
    changes = {"seed": args.seed, "E": args.servers, "M": args.regions, "I": args.categories, "days": args.days}
    data.update({k: v for k, v in changes.items() if v is not None})
    return SimConfig.from_dict(data)


def cmd_simgen(args):
    from .simulator import World

    cfg = _sim_config(args)
    world = World(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    P = cfg.ticks_per_day
    write_jsonl(out / "servers.jsonl", world.platform.servers)
    write_jsonl(out / "regions.jsonl", world.platform.regions)
    tel = world.telemetry
    write_jsonl(out / "telemetry.jsonl", (WorkloadWindow(e, d * P, tel[d * P:(d + 1) * P, e].astype(float))
                                          for d in range(cfg.days) for e in range(world.platform.E)))
    batches, requests = [], []
    for t in range(cfg.horizon):
        batch, arr = world.request_batch(t)
        batches.append(batch)
        requests.extend(arr.to_requests())
    write_jsonl(out / "batches.jsonl", batches)
    write_jsonl(out / "requests.jsonl", requests)
    write_jsonl(out / "events.jsonl", list(world.events) + world.service_events())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, default=list) + "\n")
    print(f"{world.platform.E} servers, {len(requests)} requests, {len(world.events)} device events -> {out}")
    return EXIT_OK


def _telemetry_cube(path):
    windows = [w for w in read_jsonl(path) if isinstance(w, WorkloadWindow)]
    if not windows:
        raise ConfigError(f"no telemetry windows in {path}")
    E = max(w.server_id for w in windows) + 1
    end = max(w.start_tick + w.T for w in windows)
    cube = np.zeros((end, E, windows[0].N))
    for w in windows:
        cube[w.start_tick:w.start_tick + w.T, w.server_id] = w.values
    return cube


def cmd_detect(args):
    from .detection.detector import build_detector, f1_score
    from .simulator import AnomalyEvent

    cube = _telemetry_cube(args.telemetry)
    ticks, E = cube.shape[:2]
    servers = {s.id: s for s in read_jsonl(args.servers)} if args.servers else {}
    classes = np.array([int(servers[e].reliability_class) if e in servers else 0 for e in range(E)])
    down = np.zeros((ticks, E), dtype=bool)
    events = [ev for ev in read_jsonl(args.events)] if args.events else []
    for ev in events:
        if isinstance(ev, AnomalyEvent) and ev.kind.value == "Device":
            down[ev.start:ev.end + 1, ev.server_id] = True
    train = int(args.train_ticks or ticks // 2)
    if not args.window <= train < ticks:
        raise ConfigError("train-ticks must leave room for both training and evaluation windows")
    detector, _ = build_detector(cube, down, classes, range(train), T=args.window, seed=args.seed,
                                 model_kwargs=dict(epochs=args.epochs))
    records, pred, truth = [], [], []
    for t in range(train, ticks, args.stride):
        d, _ = detector.detect(np.ascontiguousarray(cube[t - args.window:t].transpose(1, 0, 2)))
        records.append({"tick": t, "availability": to_record(DeviceAvailability(d))})
        pred.append(d == 0)
        truth.append(down[t - 1])
    if args.out:
        write_jsonl(args.out, records)
    msg = f"{len(records)} ticks, model calls {detector.model_calls} (ambiguous {detector.ambiguous_seen})"
    if events:
        msg += f", F1 {f1_score(np.concatenate(pred), np.concatenate(truth)):.3f}"
    print(msg)
    return EXIT_OK


def cmd_effects(args):
    from .harness import collect_history, fit_components
    from .simulator import World

    config = load_config(args.config, overrides={"seed": args.seed, "train_days": args.train_days,
                                                 "test_days": 1, "schedulers": ("origin",)})
    world = World(config.sim)
    history = collect_history(world, range(config.train_ticks), config.exploration, config.sim.seed)
    comp = fit_components(world, history, config)
    tick = config.train_ticks if args.tick is None else args.tick
    plat = world.platform
    effects, p = comp.estimator.estimate(plat.server_regions, world.is_peak(tick), plat.M)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "effects.jsonl", [effects])
    (out / "estimator.json").write_text(comp.estimator.to_json() + "\n")
    print(f"A {effects.A.shape}, serviceable share {effects.S.mean():.3f}, peak={world.is_peak(tick)} -> {out}")
    return EXIT_OK


def _single(path, kind):
    for rec in read_jsonl(path, raw=True):
        if rec.get("type") == kind.__name__:
            return from_record(rec)
        if "availability" in rec and kind is DeviceAvailability:
            return from_record(rec["availability"])
        if kind is RequestBatch and "forecast" in rec:
            return np.asarray(rec["forecast"], dtype=float)
    raise ConfigError(f"no {kind.__name__} record in {path}")


def cmd_presched(args):
    from .prescheduler import PlannerConfig, build_secants, pre_schedule
    from .revenue import RevenueCurve

    forecast = _single(args.forecast, RequestBatch)
    R_hat = forecast.counts.astype(float) if isinstance(forecast, RequestBatch) else forecast
    effects = _single(args.effects, EffectMatrices)
    avail = _single(args.availability, DeviceAvailability) if args.availability else \
        DeviceAvailability.all_available(effects.shape[0])
    servers = sorted(read_jsonl(args.servers), key=lambda s: s.id)
    caps = np.array([s.bandwidth_capacity for s in servers], dtype=float)
    curve = RevenueCurve(args.u_opt, args.sigma)
    planner = PlannerConfig(segments=args.segments, max_nodes=args.max_nodes)
    tick = args.tick if args.tick is not None else getattr(forecast, "tick", 0)
    ps = pre_schedule(tick, R_hat, effects, avail, caps, curve, planner, secants=build_secants(curve, args.segments))
    write_jsonl(args.out, [ps])
    print(f"planned {int(ps.x.sum())} of {R_hat.sum():.1f} forecast requests, partial={ps.partial} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="sentinel-sim", description="Proactive anomaly-aware live-stream scheduling simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment and write a report")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--scheduler", action="append", help="repeatable; default: all five")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare reports produced from the same streams")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="write the comparison table as CSV")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("simgen", help="write a synthetic platform, telemetry, requests and ground truth")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--servers", type=int)
    g.add_argument("--regions", type=int)
    g.add_argument("--categories", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_simgen)

    d = sub.add_parser("detect", help="train the two-stage detector and label later ticks")
    d.add_argument("--telemetry", required=True)
    d.add_argument("--servers")
    d.add_argument("--events")
    d.add_argument("--train-ticks", type=int)
    d.add_argument("--window", type=int, default=12)
    d.add_argument("--stride", type=int, default=1)
    d.add_argument("--epochs", type=int, default=15)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("effects", help="fit the effect estimator on simulated history and emit A and S")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--train-days", type=int)
    e.add_argument("--tick", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_effects)

    s = sub.add_parser("presched", help="build one pre-schedule from forecast, effects and availability files")
    s.add_argument("--forecast", required=True)
    s.add_argument("--effects", required=True)
    s.add_argument("--servers", required=True)
    s.add_argument("--availability")
    s.add_argument("--tick", type=int)
    s.add_argument("--segments", type=int, default=16)
    s.add_argument("--max-nodes", type=int, default=32)
    s.add_argument("--u-opt", type=float, default=0.6)
    s.add_argument("--sigma", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0, help="accepted for symmetry; the closed-form collapse is deterministic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_presched)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"sentinel-sim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sentinel-sim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SentinelError, ValueError, OSError, KeyError) as exc:
        print(f"sentinel-sim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
