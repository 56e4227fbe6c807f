"""Verification metrics: score error, M_beta, short-time KL, histogram TV and
empirical Rademacher complexity."""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import relu
from .dsm import ScoreModel, init_layers
from .errors import ConfigError, NumericalError
from .ou import forward_sample, log_marginal_density
from .score import ScoreQuadrature, gauss_hermite_nodes, true_score

LEDGER_COLUMNS = ("name", "value", "stderr", "n", "seed", "config_hash")


def config_hash(config):
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    name: str
    value: float
    stderr: float
    n: int
    seed: object
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalError(f"metric {self.name} is not finite", value=self.value)
        if not self.stderr >= 0:
            raise NumericalError(f"metric {self.name} has a negative standard error")

    def row(self):
        return {"name": self.name, "value": repr(float(self.value)),
                "stderr": repr(float(self.stderr)), "n": self.n, "seed": self.seed,
                "config_hash": config_hash(self.config)}


def append_reports(path, reports):
    """Append rows to a CSV results ledger, writing the header for a new file."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS)
        if new:
            w.writeheader()
        for rep in reports:
            w.writerow(rep.row())


# score error

def _as_score_fn(s_hat):
    if isinstance(s_hat, ScoreModel):
        return s_hat.score
    if hasattr(s_hat, "score") and hasattr(s_hat, "t"):
        return lambda t, x: s_hat.score(x)
    return s_hat


def score_l2_error(s_hat, spec, t, n, seed, quadrature=None):
    """E_{p_t} |s_hat - grad log p_t|^2 with relative versions in ``extra``.

    ``extra["relative"]`` divides by E|grad log p_t|^2; ``extra["relative_rms"]``
    is its square root, the relative L2(p_t) error.
    """
    if not t > 0:
        raise ConfigError("t must be positive")
    fn = _as_score_fn(s_hat)
    _, xt = forward_sample(spec, t, n, seed)
    q = quadrature or ScoreQuadrature(spec)
    exact = true_score(q, t, xt)
    diff = np.asarray(fn(t, xt), dtype=float) - exact
    err = np.einsum("nd,nd->n", diff, diff)
    ref = np.einsum("nd,nd->n", exact, exact)
    value = float(err.mean())
    se = float(err.std(ddof=1) / np.sqrt(n))
    denom = float(ref.mean())
    rel = value / denom
    # delta method for the ratio of means
    cov = np.cov(err, ref)
    rel_se = float(np.sqrt(max(cov[0, 0] - 2 * rel * cov[0, 1] + rel**2 * cov[1, 1], 0.0) / n) / denom)
    return MetricReport("score_l2_error", value, se, n, seed,
                        {"t": t, "target": spec.to_dict()},
                        {"relative": rel, "relative_stderr": rel_se,
                         "relative_rms": float(np.sqrt(rel)), "reference": denom})


# M_beta

def _gaussian_expectation(fn, dim, method, n, seed):
    if method == "gauss_hermite":
        order = n or (64 if dim <= 2 else 24)
        X, w = gauss_hermite_nodes(order, dim)
        value = float(w @ fn(X))
        Xh, wh = gauss_hermite_nodes(max(8, order // 2), dim)
        return value, abs(value - float(wh @ fn(Xh))), X.shape[0]
    if method == "monte_carlo":
        if n is None or seed is None:
            raise ConfigError("Monte Carlo estimates need n and seed")
        X = np.random.default_rng(seed).standard_normal((int(n), dim))
        v = fn(X)
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n)), int(n)
    raise ConfigError(f"unknown method {method!r}")


def m_beta(spec, beta=None, n=None, seed=None, method="gauss_hermite"):
    """M_beta(f) = E_gamma |grad f(x / (1 - 2 beta))|^2.

    The Gauss-Hermite error estimate is the gap to the half-order rule.
    """
    b = spec.beta if beta is None else beta
    fn = lambda X: np.einsum("nd,nd->n", *(2 * [spec.grad_f(X / (1 - 2 * b))]))
    value, se, size = _gaussian_expectation(fn, spec.dim, method, n, seed)
    return MetricReport("m_beta", value, se, size, seed, {"beta": b, "method": method})


def m_beta_value(spec, beta=None, n=None, seed=None, method="gauss_hermite"):
    """E_gamma |f(x / (1 - 2 beta))|^2, the variant built on f itself."""
    b = spec.beta if beta is None else beta
    fn = lambda X: spec.f(X / (1 - 2 * b)) ** 2
    value, se, size = _gaussian_expectation(fn, spec.dim, method, n, seed)
    return MetricReport("m_beta_value", value, se, size, seed, {"beta": b, "method": method})


# short-time KL

def _density_grid(spec, n):
    """Composite Gauss-Legendre nodes and weights covering p_0 and p_t (d <= 2)."""
    from .targets import _box_radius
    L = _box_radius(spec) + 2.0
    panels = max(1, n // 8)
    x, w = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(-L, L, panels + 1)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    if spec.dim == 1:
        return pts[:, None], wts
    g = np.meshgrid(pts, pts, indexing="ij")
    gw = np.meshgrid(wts, wts, indexing="ij")
    return np.stack([g[0].ravel(), g[1].ravel()], axis=1), (gw[0] * gw[1]).ravel()


def kl_divergence_to_p0(spec, t, n=4000):
    """D_KL(p_t || p_0) by quadrature on densities (d <= 2)."""
    if spec.dim > 2:
        raise ConfigError("density-based KL is limited to d <= 2")
    X, w = _density_grid(spec, n if spec.dim == 1 else min(n, 400))
    lp_t = log_marginal_density(spec, t, X)
    lp_0 = spec.log_density(X)
    p_t = np.exp(lp_t)
    mass = float(w @ p_t)
    if abs(mass - 1) > 1e-6:
        raise NumericalError("quadrature grid misses part of p_t", mass=mass)
    return float(w @ (p_t * (lp_t - lp_0)))


@dataclass
class KLReport:
    passed: bool
    C: float
    m_beta: float
    slope: float
    rows: list


def kl_short_time_check(spec, t_grid, n=4000, C=10.0):
    """Check KL(p_t || p_0) <= C M_beta(f) t on a grid of small times."""
    mb = m_beta(spec).value
    rows = []
    for t in t_grid:
        kl = kl_divergence_to_p0(spec, t, n)
        rows.append({"t": t, "kl": kl, "bound": C * mb * t})
    ts = np.array([r["t"] for r in rows])
    kls = np.array([r["kl"] for r in rows])
    slope = float(ts @ kls / (ts @ ts))
    passed = all(r["kl"] <= r["bound"] * (1 + 1e-12) + 1e-14 for r in rows)
    return KLReport(passed, C, mb, slope, rows)


# total variation

def _bin_masses_1d(pdf, edges, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    pts = mid[:, None] + half[:, None] * x[None, :]
    vals = pdf(pts.reshape(-1, 1)).reshape(pts.shape)
    return (vals * w[None, :]).sum(axis=1) * half


def _bin_masses_2d(pdf, ex, ey, order=8):
    x, w = np.polynomial.legendre.leggauss(order)
    out = np.empty((ex.size - 1, ey.size - 1))
    my, hy = 0.5 * (ey[1:] + ey[:-1]), 0.5 * np.diff(ey)
    py = (my[:, None] + hy[:, None] * x[None, :]).ravel()
    wy = (hy[:, None] * w[None, :]).ravel()
    for i in range(ex.size - 1):
        mx, hx = 0.5 * (ex[i + 1] + ex[i]), 0.5 * (ex[i + 1] - ex[i])
        px = mx + hx * x
        P = np.stack(np.meshgrid(px, py, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = pdf(P).reshape(order, -1)
        cell = ((hx * w)[:, None] * vals * wy[None, :]).sum(axis=0)
        out[i] = cell.reshape(ey.size - 1, order).sum(axis=1)
    return out.ravel()


def _hist(samples, edges):
    samples = np.atleast_2d(samples)
    if samples.shape[1] == 1:
        counts, _ = np.histogram(samples[:, 0], bins=edges[0])
    else:
        counts, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=edges)
        counts = counts.ravel()
    return np.append(counts, samples.shape[0] - counts.sum()).astype(float)


def tv_histogram(samples_a, samples_b_or_density, bins=64, range_=(-6.0, 6.0), n_boot=200, seed=0,
                 min_coverage=0.999):
    """Histogram total variation 0.5 sum |p_a - p_b| over bins plus the out-of-range mass.

    The second argument is either samples or a normalized density callable
    taking an (n, d) array. Standard error from a multinomial bootstrap.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    if a.shape[0] == 1 and a.shape[1] > 2:
        a = a.T
    d = a.shape[1]
    if d > 2:
        raise ConfigError("histogram TV supports d <= 2")
    lo, hi = range_
    if not (hi > lo and bins >= 1):
        raise ConfigError("invalid histogram range or bin count")
    edges = [np.linspace(lo, hi, bins + 1)] * d
    ca = _hist(a, edges)
    pa = ca / ca.sum()
    rng = np.random.default_rng(seed)
    if callable(samples_b_or_density):
        pdf = samples_b_or_density
        inner = _bin_masses_1d(pdf, edges[0]) if d == 1 else _bin_masses_2d(pdf, edges[0], edges[1])
        cover = float(inner.sum())
        if cover < min_coverage:
            raise ConfigError(f"histogram range holds only {cover:.5f} of the density mass")
        pb = np.append(inner, max(0.0, 1.0 - cover))
        boot_b = None
    else:
        b = np.atleast_2d(np.asarray(samples_b_or_density, dtype=float))
        cb = _hist(b, edges)
        pb = cb / cb.sum()
        cover = 1.0 - pb[-1]
        boot_b = lambda: rng.multinomial(int(cb.sum()), pb) / cb.sum()
    if 1.0 - pa[-1] < min_coverage:
        raise ConfigError(f"histogram range holds only {1 - pa[-1]:.5f} of the samples")
    value = 0.5 * float(np.abs(pa - pb).sum())
    boots = []
    for _ in range(n_boot):
        qa = rng.multinomial(int(ca.sum()), pa) / ca.sum()
        qb = boot_b() if boot_b else pb
        boots.append(0.5 * np.abs(qa - qb).sum())
    return MetricReport("tv_histogram", value, float(np.std(boots, ddof=1)), int(ca.sum()), seed,
                        {"bins": bins, "range": list(range_)}, {"coverage": cover})


# Rademacher complexity

def rademacher_bound(points, L, K):
    points = np.atleast_2d(points)
    N, d = points.shape
    return float(np.abs(points).max() * 2**L * K * np.sqrt(2 * np.log(2 * d + 2) / N))


def _objective(layers, X, sigma):
    out, cache = relu.mlp_forward(layers, X)
    return float(sigma @ out[:, 0]) / X.shape[0], cache


def _project(layers, K):
    pn = relu.ReluNet.from_layers(layers).path_norm()
    if pn > 0:
        layers[-1][0] *= K / pn
        layers[-1][1] *= K / pn


def empirical_rademacher(net_class, points, n_draws=10, seed=0, restarts=20, steps=60, lr=0.5):
    """Lower-bound estimate of E_sigma sup_{pn <= K} (1/N) sum sigma_i phi(x_i).

    For each sign draw, projected gradient ascent from several random starts
    (output layer rescaled to path norm K after each step); the best value
    found is a lower bound on the supremum.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    N, d = X.shape
    if N < 10:
        raise ConfigError("need at least 10 points")
    L, K, width = int(net_class["L"]), float(net_class["K"]), int(net_class.get("width", 16))
    bound = rademacher_bound(X, L, K)
    rng = np.random.default_rng(seed)
    if K == 0:
        return MetricReport("rademacher", 0.0, 0.0, N, seed, dict(net_class), {"bound": bound})
    dims = [d] + [width] * (L - 1) + [1]
    sups = []
    for _ in range(n_draws):
        sigma = rng.choice([-1.0, 1.0], N)
        best = 0.0
        for _ in range(restarts):
            layers = init_layers(dims, rng)
            layers[-1][0] = rng.standard_normal(layers[-1][0].shape)
            _project(layers, K)
            for _ in range(steps):
                val, cache = _objective(layers, X, sigma)
                best = max(best, abs(val))
                direction = np.sign(val) if val != 0 else 1.0
                grads = relu.mlp_backward(layers, cache, direction * sigma[:, None] / N)
                for (W, b), (gW, gb) in zip(layers, grads):
                    W += lr * gW
                    b += lr * gb
                _project(layers, K)
            val, _ = _objective(layers, X, sigma)
            best = max(best, abs(val))
        sups.append(best)
    sups = np.array(sups)
    value = float(sups.mean())
    se = float(sups.std(ddof=1) / np.sqrt(len(sups))) if len(sups) > 1 else 0.0
    if value > bound:
        raise NumericalError("Rademacher estimate exceeds the theoretical bound",
                             estimate=value, bound=bound)
    return MetricReport("rademacher", value, se, N, seed, dict(net_class), {"bound": bound})
