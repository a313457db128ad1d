"""Two-stage device detection: rules first, learned model only for ambiguous windows."""
from __future__ import annotations

import numpy as np

from ..domain import DeviceAvailability
from .rules import RuleConfig, Verdict, medoid_window, rule_check_many
from .vgru import MixtureVGRU


class TwoStageDetector:
    """Holds per-server rule configs and a shared learned model.

    ``model_calls`` counts windows sent to the learned model; it always equals
    the number of Ambiguous rule outcomes.
    """

    def __init__(self, rule_configs, model=None):
        self.rule_configs = list(rule_configs)
        self.model = model
        self.model_calls = 0
        self.ambiguous_seen = 0

    def detect(self, windows):
        """Availability vector and rule codes for (E, T, N) windows (one per server)."""
        windows = np.asarray(windows, dtype=float)
        codes = rule_check_many(windows, self.rule_configs)
        d = np.ones(len(windows), dtype=np.int8)
        d[codes == 1] = 0
        amb = np.flatnonzero(codes == 2)
        self.ambiguous_seen += amb.size
        if amb.size:
            if self.model is None:
                d[amb] = 0
            else:
                self.model_calls += amb.size
                d[amb[self.model.predict(windows[amb])]] = 0
        return d, codes


def detect_all(servers, windows, rule_cfgs, model, detector=None):
    """DeviceAvailability for one window per server."""
    if isinstance(rule_cfgs, RuleConfig):
        rule_cfgs = [rule_cfgs] * len(servers)
    det = detector or TwoStageDetector(rule_cfgs, model)
    vals = np.stack([np.asarray(getattr(w, "values", w), dtype=float) for w in windows])
    d, _ = det.detect(vals)
    return DeviceAvailability(d)


def class_baselines(windows, classes, scales=None, max_windows=300, seed=0):
    """Medoid healthy window per reliability class; falls back to the pooled medoid."""
    windows = np.asarray(windows, dtype=float)
    classes = np.asarray(classes)
    rng = np.random.default_rng(seed)

    def medoid(sel, scale):
        if sel.size > max_windows:
            sel = np.sort(rng.choice(sel, size=max_windows, replace=False))
        return medoid_window(windows[sel], scale)

    out = {}
    pooled = medoid(np.arange(len(windows)), None if scales is None else np.mean(list(scales.values()), axis=0))
    for c in np.unique(classes):
        sel = np.flatnonzero(classes == c)
        out[int(c)] = medoid(sel, None if scales is None else scales.get(int(c)))
    out[None] = pooled
    return out


def telemetry_scales(telemetry, classes, healthy_mask):
    """Per reliability class, per dimension std of healthy telemetry (ticks x servers x N)."""
    scales = {}
    classes = np.asarray(classes)
    for c in np.unique(classes):
        cols = np.flatnonzero(classes == c)
        vals = telemetry[:, cols, :][healthy_mask[:, cols]]
        sd = vals.std(axis=0) if len(vals) else np.ones(telemetry.shape[-1])
        scales[int(c)] = np.where(sd > 1e-9, sd, 1.0)
    return scales


def build_detector(telemetry, down, classes, train_ticks, T=12, theta_v=0.4, theta_r=0.4, beta=0.5,
                   model_kwargs=None, n_train_windows=1500, stride=7, seed=0, model=True):
    """Fit scales, baselines and the learned model on ``train_ticks`` of telemetry.

    Training windows are the rule-Healthy ones; ``down`` (ticks x servers) is
    only used to pick healthy ticks for the standardization scale.
    """
    lo, hi = int(train_ticks[0]), int(train_ticks[-1]) + 1
    tel = np.asarray(telemetry[lo:hi], dtype=float)
    classes = np.asarray(classes)
    E = tel.shape[1]
    healthy = ~np.asarray(down[lo:hi], dtype=bool)
    scales = telemetry_scales(tel, classes, healthy)
    ends = np.arange(T, hi - lo + 1, stride)
    win = np.stack([tel[ends[:, None] - T + np.arange(T)[None, :], e] for e in range(E)], axis=1)  # (W, E, T, N)
    clean = np.stack([healthy[ends[:, None] - T + np.arange(T)[None, :], e].all(axis=1) for e in range(E)], axis=1)
    base_w = win[clean]
    base_c = np.broadcast_to(classes[None, :], clean.shape)[clean]
    baselines = class_baselines(base_w, base_c, scales, seed=seed)
    cfgs = [RuleConfig(baselines.get(int(classes[e]), baselines[None]), theta_v, theta_r, beta,
                       scales[int(classes[e])]) for e in range(E)]
    all_w = win.reshape(-1, T, tel.shape[2])
    all_cfg = [cfgs[e] for _ in range(len(ends)) for e in range(E)]
    codes = rule_check_many(all_w, all_cfg)
    train_w = all_w[codes == 0]
    rng = np.random.default_rng(seed)
    if len(train_w) > n_train_windows:
        train_w = train_w[np.sort(rng.choice(len(train_w), n_train_windows, replace=False))]
    vgru = None
    if model:
        kwargs = dict(seed=seed)
        kwargs.update(model_kwargs or {})
        vgru = MixtureVGRU(**kwargs).fit(train_w, scale=np.mean(list(scales.values()), axis=0))
        vgru.calibrate(train_w[: min(len(train_w), 400)])
    return TwoStageDetector(cfgs, vgru), train_w


def _windows(tel, T, stride):
    ends = np.arange(T, tel.shape[0] + 1, stride)
    return np.stack([tel[ends[:, None] - T + np.arange(T)[None, :], e] for e in range(tel.shape[1])], axis=1)


def refresh_baselines(detector, telemetry, classes, T=12, stride=7, seed=0):
    """New detector whose per-class baselines are medoids of the windows it now calls Healthy.

    The learned model and thresholds are shared with ``detector``; the usage
    counters carry over so they keep accumulating across refreshes.
    """
    tel = np.asarray(telemetry, dtype=float)
    classes = np.asarray(classes)
    E = tel.shape[1]
    if tel.shape[0] < T:
        return detector
    win = _windows(tel, T, stride)                      # (W, E, T, N)
    cfgs = detector.rule_configs
    flat = win.reshape(-1, T, tel.shape[2])
    codes = rule_check_many(flat, [cfgs[e] for _ in range(win.shape[0]) for e in range(E)])
    healthy = (codes == 0).reshape(win.shape[0], E)
    if not healthy.any():
        return detector
    scales = {int(classes[e]): cfgs[e].scale for e in range(E)}
    base_c = np.broadcast_to(classes[None, :], healthy.shape)[healthy]
    baselines = class_baselines(win[healthy], base_c, scales if all(v is not None for v in scales.values())
                                else None, seed=seed)
    new_cfgs = [RuleConfig(baselines.get(int(classes[e]), baselines[None]), c.theta_v, c.theta_r, c.beta, c.scale)
                for e, c in enumerate(cfgs)]
    fresh = TwoStageDetector(new_cfgs, detector.model)
    fresh.model_calls = detector.model_calls
    fresh.ambiguous_seen = detector.ambiguous_seen
    return fresh


def f1_score(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = float((pred & truth).sum())
    fp = float((pred & ~truth).sum())
    fn = float((~pred & truth).sum())
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


__all__ = ["TwoStageDetector", "detect_all", "build_detector", "refresh_baselines", "class_baselines", "telemetry_scales",
           "f1_score", "Verdict"]
