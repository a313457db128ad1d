"""Variational recurrent autoencoder with a Gaussian-mixture latent prior.

Per tick the model extracts convolutional features ``f_t`` from the window,
encodes ``(f_t, h_{t-1})`` into a Gaussian posterior over ``z_t``, draws a
relaxed one-hot component ``c_t`` by Gumbel-softmax from a categorical head,
decodes ``(z_t, h_{t-1})`` into a Gaussian over the telemetry slice (the mean
passes through a transposed convolution over time) and advances a GRU on
``[f_t, z_t]``. Training minimizes the negative ELBO

    sum_t  -log p(s_t | z_t)  +  KL(q(z_t) || N(c_t mu, c_t sigma))  +  KL(q(c_t) || Cat(pi))

with plain SGD and gradient-norm clipping while the Gumbel temperature is
annealed exponentially.
"""
from __future__ import annotations

import json
import math

import numpy as np
from sklearn.base import BaseEstimator

from ..exceptions import DivergedLoss, EmptyTrainingSet, UntrainedModel
from .tape import Tape, sigmoid, softplus

LOG_2PI = math.log(2.0 * math.pi)

PARAM_SHAPES = {
    # name: shape builder from dims (N, F, H, He, Hd, Z, K)
    "conv_W": lambda d: (3 * d["N"], d["F"]), "conv_b": lambda d: (d["F"],),
    "enc_Wf": lambda d: (d["F"], d["He"]), "enc_Wh": lambda d: (d["H"], d["He"]), "enc_b": lambda d: (d["He"],),
    "mu_W": lambda d: (d["He"], d["Z"]), "mu_b": lambda d: (d["Z"],),
    "sig_W": lambda d: (d["He"], d["Z"]), "sig_b": lambda d: (d["Z"],),
    "cat_Wf": lambda d: (d["F"], d["K"]), "cat_Wh": lambda d: (d["H"], d["K"]), "cat_b": lambda d: (d["K"],),
    "prior_mu": lambda d: (d["K"], d["Z"]), "prior_rho": lambda d: (d["K"], d["Z"]),
    "prior_logits": lambda d: (d["K"],),
    "dec_Wz": lambda d: (d["Z"], d["Hd"]), "dec_Wh": lambda d: (d["H"], d["Hd"]), "dec_b": lambda d: (d["Hd"],),
    "out_W": lambda d: (d["Hd"], d["F"]), "out_b": lambda d: (d["F"],),
    "ssig_W": lambda d: (d["Hd"], d["N"]), "ssig_b": lambda d: (d["N"],),
    "deconv_W": lambda d: (3 * d["F"], d["N"]), "deconv_b": lambda d: (d["N"],),
    "gru_Wx": lambda d: (d["F"] + d["Z"], 3 * d["H"]), "gru_Wh": lambda d: (d["H"], 3 * d["H"]),
    "gru_b": lambda d: (3 * d["H"],),
}


def init_params(n_dims, feature_dim, hidden_dim, latent_dim, n_components, seed=0):
    dims = dict(N=n_dims, F=feature_dim, H=hidden_dim, He=hidden_dim, Hd=hidden_dim, Z=latent_dim,
                K=n_components)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape_of in PARAM_SHAPES.items():
        shape = shape_of(dims)
        if name == "prior_mu":
            params[name] = rng.normal(0.0, 1.0, size=shape)
        elif name in ("prior_rho", "prior_logits") or name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return params


def _affine(tape, x, W, b):
    return tape.add(tape.matmul(x, W), b)


def negative_elbo(params, x, eps, gumbel, temperature, sigma_min=1e-3, learn_prior=True, tape=None,
                  needs_grad=True):
    """Mean negative ELBO over the batch plus per-(window, tick, dim) reconstruction NLL.

    ``x`` is (B, T, N); ``eps`` (B, T, Z) and ``gumbel`` (B, T, K) are the
    reparameterization noises. Returns (loss node, nll array, leaf dict, tape).
    """
    tape = tape or Tape()
    P = {k: tape.leaf(v, needs_grad and (learn_prior or k != "prior_logits")) for k, v in params.items()}
    B, T, N = x.shape
    H = params["gru_Wh"].shape[0]
    X = tape.const(x)
    feats = tape.tanh(_affine(tape, tape.time_context(X), P["conv_W"], P["conv_b"]))
    h = tape.const(np.zeros((B, H)))
    log_prior = tape.log_softmax(P["prior_logits"])
    sig_prior = tape.add_const(tape.softplus(P["prior_rho"]), sigma_min)
    ms, sigs, kls = [], [], []
    for t in range(T):
        f = tape.take(feats, t, axis=1)
        e = tape.tanh(tape.add(tape.add(tape.matmul(f, P["enc_Wf"]), tape.matmul(h, P["enc_Wh"])), P["enc_b"]))
        mu = _affine(tape, e, P["mu_W"], P["mu_b"])
        sig = tape.add_const(tape.softplus(_affine(tape, e, P["sig_W"], P["sig_b"])), sigma_min)
        logit = tape.add(tape.add(tape.matmul(f, P["cat_Wf"]), tape.matmul(h, P["cat_Wh"])), P["cat_b"])
        logq = tape.log_softmax(logit)
        q = tape.exp(logq)
        c = tape.softmax(tape.scale(tape.add(logq, tape.const(gumbel[:, t])), 1.0 / temperature))
        mup = tape.matmul(c, P["prior_mu"])
        sigp = tape.matmul(c, sig_prior)
        z = tape.add(mu, tape.mul(sig, tape.const(eps[:, t])))
        d = tape.tanh(tape.add(tape.add(tape.matmul(z, P["dec_Wz"]), tape.matmul(h, P["dec_Wh"])), P["dec_b"]))
        ms.append(_affine(tape, d, P["out_W"], P["out_b"]))
        sigs.append(tape.add_const(tape.softplus(_affine(tape, d, P["ssig_W"], P["ssig_b"])), sigma_min))
        # KL between diagonal Gaussians
        ratio = tape.div(tape.add(tape.square(sig), tape.square(tape.sub(mu, mup))),
                         tape.scale(tape.square(sigp), 2.0))
        klz = tape.add_const(tape.add(tape.sub(tape.log(sigp), tape.log(sig)), ratio), -0.5)
        klc = tape.mul(q, tape.sub(logq, log_prior))
        kls.append(tape.add(tape.sum(klz), tape.sum(klc)))
        h = _gru(tape, tape.concat([f, z]), h, P)
    M = tape.stack(ms, axis=1)
    mus = _affine(tape, tape.time_context(M), P["deconv_W"], P["deconv_b"])
    S = tape.stack(sigs, axis=1)
    resid = tape.div(tape.sub(X, mus), S)
    nll = tape.add_const(tape.add(tape.log(S), tape.scale(tape.square(resid), 0.5)), 0.5 * LOG_2PI)
    total = tape.sum(nll)
    for k in kls:
        total = tape.add(total, k)
    loss = tape.scale(total, 1.0 / B)
    return loss, nll.value, P, tape


def _gru(tape, xin, h, P):
    H = h.shape[1]
    gx = tape.add(tape.matmul(xin, P["gru_Wx"]), P["gru_b"])
    gh = tape.matmul(h, P["gru_Wh"])
    cols = lambda node, k: tape.take(node, np.arange(k * H, (k + 1) * H), axis=1)
    r = tape.sigmoid(tape.add(cols(gx, 0), cols(gh, 0)))
    u = tape.sigmoid(tape.add(cols(gx, 1), cols(gh, 1)))
    n = tape.tanh(tape.add(cols(gx, 2), tape.mul(r, cols(gh, 2))))
    # h' = n + u * (h - n)
    return tape.add(n, tape.mul(u, tape.sub(h, n)))


def elbo_gradients(params, x, eps, gumbel, temperature, sigma_min=1e-3, learn_prior=True):
    loss, _, P, tape = negative_elbo(params, x, eps, gumbel, temperature, sigma_min, learn_prior)
    tape.backward(loss)
    return float(loss.value), {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in P.items()}


# ---------------------------------------------------------------------------
# single-step views used by the library API


def encode(params, features, h_prev, sigma_min=1e-3):
    """Posterior (mu_z, sigma_z) from tick features and the previous hidden state."""
    e = np.tanh(features @ params["enc_Wf"] + h_prev @ params["enc_Wh"] + params["enc_b"])
    mu = e @ params["mu_W"] + params["mu_b"]
    sig = softplus(e @ params["sig_W"] + params["sig_b"]) + sigma_min
    return mu, sig


def decode(params, z, h_prev, sigma_min=1e-3):
    """(mu_s, sigma_s, reconstruction) for one tick; the centre tap of the transposed convolution."""
    d = np.tanh(z @ params["dec_Wz"] + h_prev @ params["dec_Wh"] + params["dec_b"])
    m = d @ params["out_W"] + params["out_b"]
    F = m.shape[-1]
    mu_s = m @ params["deconv_W"][F:2 * F] + params["deconv_b"]
    sig_s = softplus(d @ params["ssig_W"] + params["ssig_b"]) + sigma_min
    return mu_s, sig_s, mu_s


def categorical_probs(params, features, h_prev):
    logit = features @ params["cat_Wf"] + h_prev @ params["cat_Wh"] + params["cat_b"]
    logit = logit - logit.max(axis=-1, keepdims=True)
    p = np.exp(logit)
    return p / p.sum(axis=-1, keepdims=True)


def gumbel_softmax(probs, temperature, uniform):
    """Relaxed one-hot sample from ``probs`` using K standard-uniform draws."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    u = np.clip(np.asarray(uniform, dtype=float), 1e-300, 1.0 - 1e-16)
    g = -np.log(-np.log(u))
    y = (np.log(np.clip(probs, 1e-300, None)) + g) / temperature
    y = y - y.max(axis=-1, keepdims=True)
    c = np.exp(y)
    return c / c.sum(axis=-1, keepdims=True)


def sample_categorical(params, features, h_prev, temperature, uniform):
    return gumbel_softmax(categorical_probs(params, features, h_prev), temperature, uniform)


def prior_mixture(params, c, sigma_min=1e-3):
    """Component-weighted prior (mu, sigma) for z; exact component parameters for one-hot c."""
    sig = softplus(params["prior_rho"]) + sigma_min
    return c @ params["prior_mu"], c @ sig


def mixture_prior_density(params, z, sigma_min=1e-3):
    """Marginal prior density sum_k pi_k N(z; mu_k, sigma_k) for points z (..., Z)."""
    logits = params["prior_logits"] - params["prior_logits"].max()
    pi = np.exp(logits) / np.exp(logits).sum()
    sig = softplus(params["prior_rho"]) + sigma_min
    z = np.asarray(z, dtype=float)[..., None, :]
    comp = np.exp(-0.5 * ((z - params["prior_mu"]) / sig) ** 2) / (np.sqrt(2 * np.pi) * sig)
    return (pi * comp.prod(axis=-1)).sum(axis=-1)


# ---------------------------------------------------------------------------
# estimator


class MixtureVGRU(BaseEstimator):
    def __init__(self, n_components=3, latent_dim=3, hidden_dim=16, feature_dim=8, epochs=20, batch_size=32,
                 learning_rate=1e-2, clip=5.0, temp_start=5.0, temp_end=0.1, threshold=0.3, learn_prior=True,
                 center="window", sigma_min=1e-3, seed=0):
        self.n_components = n_components
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip = clip
        self.temp_start = temp_start
        self.temp_end = temp_end
        self.threshold = threshold
        self.learn_prior = learn_prior
        self.center = center
        self.sigma_min = sigma_min
        self.seed = seed

    # -- preprocessing --------------------------------------------------------

    def _prepare(self, windows):
        w = np.asarray(getattr(windows, "values", windows), dtype=float)
        if w.ndim == 2:
            w = w[None]
        if self.center == "window":
            w = w - w.mean(axis=1, keepdims=True)
        else:
            w = w - self.loc_
        return w / self.scale_

    def temperatures(self, epochs=None):
        epochs = self.epochs if epochs is None else epochs
        if epochs <= 1:
            return np.array([self.temp_start] * max(epochs, 0))[:epochs] if epochs < 1 else np.array([self.temp_end])
        k = np.arange(epochs) / (epochs - 1)
        return self.temp_start * (self.temp_end / self.temp_start) ** k

    def fit(self, windows, y=None, scale=None):
        w = np.asarray(getattr(windows, "values", windows), dtype=float)
        if w.ndim != 3 or len(w) == 0:
            raise EmptyTrainingSet("no healthy windows to train on")
        if self.n_components < 2:
            raise ValueError("need at least two mixture components")
        B, T, N = w.shape
        self.loc_ = w.reshape(-1, N).mean(axis=0)
        if scale is None:
            sd = (w - w.mean(axis=1, keepdims=True) if self.center == "window" else w - self.loc_).reshape(-1, N).std(axis=0)
            scale = np.where(sd > 1e-12, sd, 1.0)
        self.scale_ = np.asarray(scale, dtype=float)
        self.params_ = init_params(N, self.feature_dim, self.hidden_dim, self.latent_dim, self.n_components, self.seed)
        self.temperature_ = self.temp_start
        self.loss_trace_ = []
        return self.partial_fit(windows, epochs=self.epochs)

    def partial_fit(self, windows, epochs=1):
        x_all = self._prepare(windows)
        rng = np.random.default_rng([self.seed, 1, len(self.loss_trace_)])
        temps = self.temperatures(epochs)
        for epoch in range(epochs):
            lam = float(temps[epoch])
            order = rng.permutation(len(x_all))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                xb = x_all[order[start:start + self.batch_size]]
                Bb, T, _ = xb.shape
                eps = rng.standard_normal((Bb, T, self.latent_dim))
                gum = -np.log(-np.log(np.clip(rng.random((Bb, T, self.n_components)), 1e-300, 1 - 1e-16)))
                loss, grads = elbo_gradients(self.params_, xb, eps, gum, lam, self.sigma_min, self.learn_prior)
                if not np.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss} in epoch {len(self.loss_trace_)}")
                norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
                factor = min(1.0, self.clip / norm) if norm > 0 else 1.0
                for k, g in grads.items():
                    self.params_[k] -= self.learning_rate * factor * g
                total += loss * Bb
            self.temperature_ = lam
            self.loss_trace_.append(total / len(x_all))
        return self

    # -- scoring --------------------------------------------------------------

    def _check(self):
        if not hasattr(self, "params_"):
            raise UntrainedModel("model has not been trained")

    def tick_scores(self, windows):
        """Mean over dimensions of -log p(s | z) per tick, with z at its posterior mean."""
        self._check()
        x = self._prepare(windows)
        B, T, _ = x.shape
        _, nll, _, _ = negative_elbo(self.params_, x, np.zeros((B, T, self.latent_dim)),
                                     np.zeros((B, T, self.n_components)), self.temperature_, self.sigma_min,
                                     self.learn_prior, needs_grad=False)
        return nll.mean(axis=-1)

    def raw_scores(self, windows):
        return self.tick_scores(windows).max(axis=-1)

    def calibrate(self, healthy_windows, inflation=10.0):
        """Min-max calibration between healthy scores and the same windows with inflated variance."""
        w = np.asarray(getattr(healthy_windows, "values", healthy_windows), dtype=float)
        lo = float(np.median(self.raw_scores(w)))
        hi = float(np.median(self.raw_scores(inflate_variance(w, inflation))))
        self.calibration_ = (lo, max(hi, lo + 1e-9))
        return self

    def decision_function(self, windows):
        self._check()
        raw = self.raw_scores(windows)
        lo, hi = getattr(self, "calibration_", (0.0, 1.0))
        return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)

    def predict(self, windows):
        return self.decision_function(windows) > self.threshold

    # -- persistence ----------------------------------------------------------

    def to_json(self):
        self._check()
        return json.dumps({
            "format": "mixture-vgru", "version": 1,
            "hyper": self.get_params(),
            "loc": self.loc_.tolist(), "scale": self.scale_.tolist(),
            "temperature": self.temperature_, "calibration": list(getattr(self, "calibration_", (0.0, 1.0))),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params_.items()},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        model = cls(**data["hyper"])
        model.loc_ = np.array(data["loc"])
        model.scale_ = np.array(data["scale"])
        model.temperature_ = data["temperature"]
        model.calibration_ = tuple(data["calibration"])
        model.params_ = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in data["params"].items()}
        model.loss_trace_ = []
        return model


def inflate_variance(windows, factor):
    """Scale each window's deviations from its own mean so variance grows by ``factor``."""
    w = np.asarray(windows, dtype=float)
    m = w.mean(axis=-2, keepdims=True)
    return np.clip(m + math.sqrt(factor) * (w - m), 0.0, 1.0)


def train(model, healthy_windows, epochs=None, seed=None):
    if seed is not None:
        model.set_params(seed=seed)
    if epochs is not None:
        model.set_params(epochs=epochs)
    return model.fit(healthy_windows)


def anomaly_score(model, window):
    """Calibrated window score (max over ticks); flag with ``score > model.threshold``."""
    return model.decision_function(window)
