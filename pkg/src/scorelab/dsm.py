"""Denoising score matching: per-time score models, risks and an SGD trainer."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import relu
from .errors import ConfigError, DomainError, NumericalError
from .relu import ReluNet

log = logging.getLogger(__name__)

PARAMETRIZATION = "ou_residual"
PATH_STEPS = 8


def _sigma2(t):
    return -np.expm1(-2 * t)


class ScoreModel:
    """Per-time networks phi_k with s_t(x) = (-x + e^{-t} phi_t(x)) / (1 - e^{-2t}).

    ``nets`` may be ReluNets or any callable exposing ``path_norm()``
    (for example a constructed score network).
    """

    def __init__(self, times, nets, K=None, parametrization=PARAMETRIZATION, meta=None):
        times = [float(t) for t in times]
        if len(times) != len(nets) or not times:
            raise ConfigError("need one network per time")
        if any(t <= 0 for t in times):
            raise ConfigError("all times must be positive")
        self.times = tuple(times)
        self.nets = tuple(nets)
        self.K = K
        self.parametrization = parametrization
        self.meta = dict(meta or {})
        self.dim = self.nets[0].in_dim
        if K is not None:
            for t, net in zip(self.times, self.nets):
                if net.path_norm() > K * (1 + 1e-9):
                    raise ConfigError(f"network at t={t} exceeds the path-norm budget {K}")

    def index(self, t):
        for k, tk in enumerate(self.times):
            if np.isclose(tk, t, rtol=1e-12, atol=0.0):
                return k
        raise ConfigError(f"time {t} is not in the model", times=self.times)

    def phi(self, t, x):
        return self.nets[self.index(t)](x)

    def score(self, t, x):
        x = np.asarray(x, dtype=float)
        return (-x + np.exp(-t) * self.phi(t, x)) / _sigma2(t)

    __call__ = score

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"scoremodel 1 {self.parametrization}\n")
            fh.write("times " + " ".join(float(t).hex() for t in self.times) + "\n")
            fh.write(f"budget {'none' if self.K is None else float(self.K).hex()}\n")
            for net in self.nets:
                if not isinstance(net, ReluNet):
                    net = net.to_relunet()
                fh.write(relu.to_text(net))

    @classmethod
    def load(cls, path):
        with open(path, encoding="ascii") as fh:
            lines = fh.read().splitlines()
        head = lines[0].split()
        if head[:2] != ["scoremodel", "1"]:
            raise DomainError("not a score model file")
        times = [float.fromhex(v) for v in lines[1].split()[1:]]
        kv = lines[2].split()[1]
        K = None if kv == "none" else float.fromhex(kv)
        starts = [i for i, ln in enumerate(lines) if ln.startswith("relunet ")] + [len(lines)]
        nets = [relu.from_text("\n".join(lines[a:b])) for a, b in zip(starts, starts[1:])]
        return cls(times, nets, K=K, parametrization=head[2])


@dataclass
class RiskConfig:
    t: float
    n_inner: int = 1
    S: float = None
    R: float = None
    seed: int = 0

    def __post_init__(self):
        if not self.t > 0:
            raise ConfigError("risk time must be positive")
        if int(self.n_inner) < 1:
            raise ConfigError("n_inner must be at least 1")
        if (self.S is None) != (self.R is None):
            raise ConfigError("truncation needs both S and R")
        if self.S is not None and not (0 <= self.S < self.R):
            raise ConfigError(f"truncation needs 0 <= S < R, got S={self.S}, R={self.R}")

    @property
    def truncated(self):
        return self.S is not None


def _paths(x0, t, n_inner, rng, steps=PATH_STEPS):
    """Exact OU paths from each x0 over ``steps`` equal sub-intervals.

    Returns X_t of shape (N, n_inner, d) and the running max of |X_s| at the
    sub-interval endpoints, shape (N, n_inner).
    """
    N, d = x0.shape
    noise = rng.standard_normal((N, n_inner, steps, d))
    h = t / steps
    a, sd = np.exp(-h), np.sqrt(_sigma2(h))
    x = np.broadcast_to(x0[:, None, :], (N, n_inner, d)).copy()
    peak = np.linalg.norm(x, axis=2)
    for k in range(steps):
        x = a * x + sd * noise[:, :, k, :]
        peak = np.maximum(peak, np.linalg.norm(x, axis=2))
    return x, peak


def _losses(score_fn, t, x0, cfg, truncated):
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[0] == 0:
        raise DomainError("empty data")
    rng = np.random.default_rng(cfg.seed)
    xt, peak = _paths(x0, t, int(cfg.n_inner), rng)
    N, n_in, d = xt.shape
    flat = xt.reshape(-1, d)
    psi = -(flat - np.exp(-t) * np.repeat(x0, n_in, axis=0)) / _sigma2(t)
    diff = score_fn(t, flat) - psi
    loss = np.einsum("nd,nd->n", diff, diff).reshape(N, n_in)
    if truncated:
        keep = (np.linalg.norm(x0, axis=1) <= cfg.S)[:, None] & (peak <= cfg.R + np.linalg.norm(x0, axis=1)[:, None])
        loss = loss * keep
    return loss.mean(axis=1), xt, psi


def _score_fn(model):
    if isinstance(model, ScoreModel):
        return model.score
    return model


def loss_at(model, t, x0, cfg):
    """Monte Carlo estimate of E[ |s(X_t) - Psi_t(X_t | x0)|^2 | X_0 = x0 ]."""
    if isinstance(model, ScoreModel):
        model.index(t)
    loss, _, _ = _losses(_score_fn(model), t, np.atleast_2d(x0), cfg, cfg.truncated)
    return float(loss[0])


def empirical_risk(model, t, data, cfg):
    """Mean of the per-point denoising loss over the rows of ``data``."""
    if isinstance(model, ScoreModel):
        model.index(t)
    loss, _, _ = _losses(_score_fn(model), t, data, cfg, False)
    return float(loss.mean())


def truncated_risk(model, t, data, cfg):
    """Risk restricted to |X_0| <= S and paths with sup |X_s| <= R + |X_0| (checked at sub-steps)."""
    if not cfg.truncated:
        raise ConfigError("truncated_risk needs S and R")
    if isinstance(model, ScoreModel):
        model.index(t)
    loss, _, _ = _losses(_score_fn(model), t, data, cfg, True)
    return float(loss.mean())


@dataclass
class RiskDecomposition:
    risk_difference: float
    score_error: float
    cross_term: float
    cross_stderr: float

    @property
    def algebraic_residual(self):
        return self.risk_difference - self.score_error - self.cross_term


def risk_decomposition(model, oracle, t, data, cfg):
    """Split risk(s) - risk(oracle) on shared draws into the squared score
    error and the cross term 2 <s - s*, s* - Psi>, whose mean is zero.
    """
    s_fn, o_fn = _score_fn(model), _score_fn(oracle)
    rng = np.random.default_rng(cfg.seed)
    x0 = np.atleast_2d(np.asarray(data, dtype=float))
    xt, _ = _paths(x0, t, int(cfg.n_inner), rng)
    d = x0.shape[1]
    flat = xt.reshape(-1, d)
    psi = -(flat - np.exp(-t) * np.repeat(x0, int(cfg.n_inner), axis=0)) / _sigma2(t)
    s, o = s_fn(t, flat), o_fn(t, flat)
    risk_s = np.einsum("nd,nd->n", s - psi, s - psi).mean()
    risk_o = np.einsum("nd,nd->n", o - psi, o - psi).mean()
    err = np.einsum("nd,nd->n", s - o, s - o).mean()
    cross = 2 * np.einsum("nd,nd->n", s - o, o - psi)
    return RiskDecomposition(float(risk_s - risk_o), float(err), float(cross.mean()),
                             float(cross.std(ddof=1) / np.sqrt(cross.size)))


# training

def init_layers(dims, rng):
    """Hidden layers uniform in +-1/sqrt(fan_in); output layer zero."""
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if k == len(dims) - 2:
            layers.append([np.zeros((fan_out, fan_in)), np.zeros(fan_out)])
        else:
            lim = 1.0 / np.sqrt(fan_in)
            layers.append([rng.uniform(-lim, lim, (fan_out, fan_in)), rng.uniform(-lim, lim, fan_out)])
    return layers


def layers_path_norm(layers):
    return ReluNet.from_layers(layers).path_norm()


def dsm_loss_and_grad(layers, x0, xt, t):
    """Mean over the batch of |s(x_t) - Psi|^2 = e^{-2t}/s2^2 |phi(x_t) - x0|^2 and its gradient."""
    coef = np.exp(-2 * t) / _sigma2(t) ** 2
    out, cache = relu.mlp_forward(layers, xt)
    r = out - x0
    n = x0.shape[0]
    loss = coef * np.einsum("nd,nd->", r, r) / n
    grads = relu.mlp_backward(layers, cache, 2 * coef * r / n)
    return float(loss), grads


def gradient_check(layers, x0, xt, t, h=1e-5):
    """Largest relative gap between analytic and central-difference gradients."""
    _, grads = dsm_loss_and_grad(layers, x0, xt, t)
    worst = 0.0
    for (W, b), (gW, gb) in zip(layers, grads):
        for P, G in ((W, gW), (b, gb)):
            num = np.empty_like(P)
            for idx in np.ndindex(P.shape):
                keep = P[idx]
                P[idx] = keep + h
                up, _ = dsm_loss_and_grad(layers, x0, xt, t)
                P[idx] = keep - h
                down, _ = dsm_loss_and_grad(layers, x0, xt, t)
                P[idx] = keep
                num[idx] = (up - down) / (2 * h)
            scale = max(np.abs(num).max(), np.abs(G).max(), 1e-12)
            worst = max(worst, float(np.abs(num - G).max() / scale))
    return worst


@dataclass
class TrainConfig:
    L: int = 3
    width: int = 32
    K: float = None
    steps: int = 5000
    lr: float = 0.05
    batch: int = 256
    log_every: int = 50
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.L < 2 or self.width < 1 or self.steps < 1 or self.batch < 1 or not self.lr > 0:
            raise ConfigError("invalid training configuration")
        if self.K is not None and not self.K > 0:
            raise ConfigError("path-norm budget K must be positive")


def _train_one(t, data, cfg, rng):
    N, d = data.shape
    dims = [d] + [cfg.width] * (cfg.L - 1) + [d]
    layers = init_layers(dims, rng)
    coef = np.exp(-2 * t) / _sigma2(t) ** 2
    # SGD on the risk is SGD on |phi - x0|^2 with step lr; rescale accordingly
    base = cfg.lr / coef
    a, sd = np.exp(-t), np.sqrt(_sigma2(t))
    rows = []
    initial = None
    for step in range(cfg.steps):
        idx = rng.integers(0, N, cfg.batch)
        x0 = data[idx]
        xt = a * x0 + sd * rng.standard_normal(x0.shape)
        loss, grads = dsm_loss_and_grad(layers, x0, xt, t)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or loss > cfg.divergence_factor * initial:
            raise NumericalError(f"training diverged at step {step} (t={t})", t=t, step=step,
                                 loss=loss, initial=initial, trace=rows[-10:])
        lr = base * 0.5 * (1 + np.cos(np.pi * step / cfg.steps))
        gnorm = 0.0
        for (W, b), (gW, gb) in zip(layers, grads):
            W -= lr * gW
            b -= lr * gb
            gnorm += float((gW**2).sum() + (gb**2).sum())
        pn = None
        if cfg.K is not None:
            pn = layers_path_norm(layers)
            if pn > cfg.K:
                layers[-1][0] *= cfg.K / pn
                layers[-1][1] *= cfg.K / pn
                pn = cfg.K
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append({"t": t, "step": step, "risk": loss,
                         "path_norm": pn if pn is not None else layers_path_norm(layers),
                         "grad_norm": np.sqrt(gnorm)})
    net = ReluNet.from_layers([(W.copy(), b.copy()) for W, b in layers])
    if cfg.K is not None:
        phi0 = float(np.abs(net(np.zeros(d))).max())
        if phi0 > cfg.K:
            log.warning("|phi(0)| = %.4g exceeds K = %.4g at t=%g", phi0, cfg.K, t)
    return net, rows


def train(spec, times, data, arch=None, opt=None, seed=0):
    """Fit one network per time by minibatch SGD with fresh noise each step.

    ``arch`` keys: L, width, K. ``opt`` keys: steps, lr, batch, log_every.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise DomainError("empty training data")
    if spec is not None and data.shape[1] != spec.dim:
        raise DomainError("data dimension does not match the target")
    cfg = TrainConfig(**{**(arch or {}), **(opt or {})})
    nets, telemetry = [], []
    for k, t in enumerate(times):
        if not t > 0:
            raise ConfigError("training times must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        net, rows = _train_one(float(t), data, cfg, rng)
        nets.append(net)
        telemetry.extend(rows)
        log.info("trained t=%g: final batch risk %.5g, path norm %.4g", t, rows[-1]["risk"],
                 net.path_norm())
    return ScoreModel(times, nets, K=cfg.K, meta={"telemetry": telemetry, "seed": seed})


TELEMETRY_COLUMNS = ("t", "step", "risk", "path_norm", "grad_norm")


def write_telemetry(model, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TELEMETRY_COLUMNS)
        w.writeheader()
        for row in model.meta.get("telemetry", []):
            out = {k: repr(float(row[k])) for k in TELEMETRY_COLUMNS}
            out["step"] = int(row["step"])
            w.writerow(out)
