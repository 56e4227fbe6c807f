"""Reverse-time sampling with the exponential integrator and early stopping."""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericalError
from .score import ScoreQuadrature, mixture_score_oracle, true_score
from .targets import GAUSSIAN_MIXTURE, STANDARD_GAUSSIAN, c_assumption, c_mixture

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerSchedule:
    """Reverse-time grid 0 = tau_0 < ... < tau_M = T - t0; the score at step k is taken at T - tau_k."""

    T: float
    t0: float
    steps: tuple

    def __post_init__(self):
        tau = np.asarray(self.steps, dtype=float)
        if tau.size < 2:
            raise ConfigError("schedule needs M >= 1")
        if tau[0] != 0.0 or np.any(np.diff(tau) <= 0):
            raise ConfigError("reverse-time grid must start at 0 and increase strictly")
        if not self.t0 > 0 or abs(self.T - tau[-1] - self.t0) > 1e-12 * max(1.0, self.T):
            raise ConfigError("grid must end at T - t0 with t0 > 0")

    @property
    def M(self):
        return len(self.steps) - 1

    @property
    def kappa(self):
        return float(np.diff(self.steps).max())

    @classmethod
    def uniform(cls, T, t0, M):
        return cls(float(T), float(t0), tuple(float(v) for v in np.linspace(0.0, T - t0, int(M) + 1)))

    @classmethod
    def geometric(cls, T, t0, M, ratio=0.9):
        """Steps shrinking geometrically toward the early-stop time."""
        w = ratio ** np.arange(int(M))
        tau = np.concatenate([[0.0], np.cumsum(w) / w.sum() * (T - t0)])
        tau[-1] = T - t0
        return cls(float(T), float(t0), tuple(float(v) for v in tau))


def ei_step(y, s_val, dt, noise):
    """Exact solution over dt of dY = (Y + 2 s) dt + sqrt(2) dB with s frozen."""
    if not dt > 0:
        raise DomainError(f"step size must be positive, got {dt}")
    g = np.expm1(dt)
    return (g + 1) * y + 2 * g * s_val + np.sqrt(np.expm1(2 * dt)) * noise


def oracle_source(spec, quadrature=None):
    """Exact score of p_t for the target, as a callable (t, x) -> score."""
    if spec.form == STANDARD_GAUSSIAN:
        return lambda t, x: -np.asarray(x, dtype=float)
    if spec.form == GAUSSIAN_MIXTURE:
        return lambda t, x: mixture_score_oracle(spec, t, x)
    q = quadrature or ScoreQuadrature(spec)
    return lambda t, x: true_score(q, t, x)


def sample(score_source, sched, n, seed, dim):
    """Run n trajectories from N(0, I) through the schedule; returns an (n, dim) array."""
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((int(n), dim))
    tau = np.asarray(sched.steps)
    for k in range(sched.M):
        s_val = np.asarray(score_source(sched.T - tau[k], y), dtype=float)
        y = ei_step(y, s_val, tau[k + 1] - tau[k], rng.standard_normal(y.shape))
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite sampler state at step {k}", step=k)
    return y


def default_schedule(eps, d, alpha, beta, M_beta_f, c_variant="assumption"):
    """Horizon, early-stop time and step count from the accuracy target.

    T = max(1, (log(1/d) + 2 d log(1+2 alpha) + 2 (1-c) log(1/eps)) / 2),
    t0 = max(1e-4, eps^2 / M_beta^2), M = ceil(d T / eps).
    """
    if not 0 < eps <= 1:
        raise ConfigError("eps must lie in (0, 1]")
    c = c_assumption(alpha, beta) if c_variant == "assumption" else c_mixture(alpha, beta)
    T = max(1.0, 0.5 * (np.log(1.0 / d) + 2 * d * np.log1p(2 * alpha) + 2 * (1 - c) * np.log(1.0 / eps)))
    t0 = max(1e-4, eps**2 / M_beta_f**2) if M_beta_f > 0 else 1e-4
    t0 = min(t0, 0.5 * T)
    M = max(1, int(np.ceil(d * T / eps)))
    log.info("default schedule: T=%.4g t0=%.3g M=%d (d T eps = %.3g)", T, t0, M, d * T * eps)
    return SamplerSchedule.uniform(T, t0, M)


def format_samples(samples, sched, seed, source_id):
    """Samples CSV text: commented metadata header, column names, one row per sample."""
    samples = np.atleast_2d(samples)
    lines = [f"# schedule T={sched.T!r} t0={sched.t0!r} M={sched.M} kappa={sched.kappa!r}",
             f"# seed={seed}", f"# score_source={source_id}",
             ",".join(f"x{j}" for j in range(samples.shape[1]))]
    lines += [",".join(repr(float(v)) for v in row) for row in samples]
    return "\n".join(lines) + "\n"


def write_samples(path, samples, sched, seed, source_id):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_samples(samples, sched, seed, source_id))


def read_samples(path):
    meta = {}
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for item in ln[1:].split():
                key, _, val = item.partition("=")
                meta[key] = val
        elif ln and not ln.startswith("x"):
            body.append([float(v) for v in ln.split(",")])
    return np.array(body), meta
