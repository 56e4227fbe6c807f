"""Tilted target densities p0(x) proportional to exp(-|x|^2/2 + f(x)).

``f`` is the log-density of p0 relative to the standard Gaussian, so the
normalizer of exp(-|x|^2/2 + f) is (2 pi)^(d/2) for every mixture and the
standard Gaussian has f = 0. The normalizer is nevertheless always computed
numerically and never taken from user input.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import relu
from .errors import ConfigError, DomainError, NumericalError

log = logging.getLogger(__name__)

STANDARD_GAUSSIAN = "standard_gaussian"
GAUSSIAN_MIXTURE = "gaussian_mixture"
RELU_TILTED = "relu_tilted"
FORMS = (STANDARD_GAUSSIAN, GAUSSIAN_MIXTURE, RELU_TILTED)

MAX_COMPONENTS = 8
Z_IS_SAMPLES = 10**6
Z_IS_SEED = 0
ENVELOPE_MARGIN = 1e-3
MIN_ACCEPTANCE = 1e-4
PROPOSAL_BATCH = 10**5


def c_assumption(alpha, beta):
    """Gate constant 4(alpha+beta)/(1-beta); targets require it below 1."""
    return 4.0 * (alpha + beta) / (1.0 - beta)


def c_mixture(alpha, beta):
    """The variant 4(alpha+beta)/(1-2 beta) used in the mixture rate statements."""
    return 4.0 * (alpha + beta) / (1.0 - 2.0 * beta)


def mixture_growth_constants(variances, eps=0.0):
    """Tightest quadratic growth constants (alpha, beta) of a mixture's f.

    alpha = (1 - s_min + eps) / (2 s_min), beta = (s_max - 1 + eps) / (2 s_max)
    with s the component variances; valid beyond a radius depending on eps.
    """
    v = np.asarray(variances, dtype=float)
    s_min, s_max = v.min(), v.max()
    return (1.0 - s_min + eps) / (2.0 * s_min), (s_max - 1.0 + eps) / (2.0 * s_max)


@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    variance: float


@dataclass
class GrowthReport:
    passed: bool
    worst_margin: float
    violations: list
    n_points: int
    tightest: tuple = None


class TargetSpec:
    """A validated target distribution.

    Use the classmethods ``standard_gaussian``, ``gaussian_mixture`` and
    ``relu_tilted``. Construction enforces c_assumption(alpha, beta) < 1,
    0 <= beta < 1/2, alpha >= 0 and the growth bounds on a radial grid, then
    computes ``log_norm_Z``. ``validate=False`` skips the growth scan and is
    meant only for building deliberately bad specs in diagnostics.
    """

    def __init__(self, form, dim, alpha=0.0, beta=0.0, r_f=None, components=(), f_net=None,
                 validate=True):
        if form not in FORMS:
            raise ConfigError(f"unknown target form {form!r}")
        if int(dim) != dim or dim < 1:
            raise ConfigError(f"dimension must be a positive integer, got {dim}")
        self.form = form
        self.dim = int(dim)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.components = tuple(components)
        self.f_net = f_net
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {alpha}")
        if not 0.0 <= self.beta < 0.5:
            raise ConfigError(f"beta must lie in [0, 1/2), got {beta}")
        c = c_assumption(self.alpha, self.beta)
        if not c < 1.0:
            raise ConfigError(f"c(alpha, beta) = {c:.6g} must be < 1", alpha=alpha, beta=beta)
        if form == GAUSSIAN_MIXTURE:
            self._check_components()
        if form == RELU_TILTED:
            if f_net is None or f_net.in_dim != self.dim or f_net.out_dim != 1:
                raise ConfigError("relu_tilted needs a scalar network on R^dim")
        if r_f is None:
            r_f = scan_r_f(self) if validate else 0.0
        self.r_f = float(r_f)
        if self.r_f < 0:
            raise ConfigError(f"r_f must be non-negative, got {r_f}")
        if validate:
            report = growth_constants_check(self)
            if not report.passed:
                raise ConfigError("growth bounds violated outside r_f",
                                  worst_margin=report.worst_margin,
                                  witnesses=report.violations[:5])
        self.log_norm_Z = _compute_log_norm(self)
        ratio = np.exp(0.5 * self.dim * np.log(2 * np.pi) - self.log_norm_Z)
        log.info("target %s d=%d: (2 pi)^(d/2)/Z = %.6g", form, self.dim, ratio)

    def _check_components(self):
        comps = self.components
        if not 1 <= len(comps) <= MAX_COMPONENTS:
            raise ConfigError(f"mixtures need 1..{MAX_COMPONENTS} components, got {len(comps)}")
        w = np.array([c.weight for c in comps])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be a probability vector, sum={w.sum()!r}")
        for c in comps:
            if not c.variance > 0:
                raise ConfigError(f"component variances must be positive, got {c.variance}")
            if np.shape(c.mean) != (self.dim,):
                raise ConfigError(f"component mean must have shape ({self.dim},)")

    @classmethod
    def standard_gaussian(cls, dim, alpha=0.0, beta=0.0, r_f=0.0):
        return cls(STANDARD_GAUSSIAN, dim, alpha, beta, r_f)

    @classmethod
    def gaussian_mixture(cls, weights, means, variances, alpha, beta, r_f=None, validate=True):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if means.shape[0] != len(weights):
            means = means.T
        comps = [Component(float(w), np.array(m, dtype=float), float(v))
                 for w, m, v in zip(weights, means, variances)]
        return cls(GAUSSIAN_MIXTURE, means.shape[1], alpha, beta, r_f, comps, validate=validate)

    @classmethod
    def relu_tilted(cls, f_net, alpha, beta, r_f=None, validate=True):
        return cls(RELU_TILTED, f_net.in_dim, alpha, beta, r_f, f_net=f_net, validate=validate)

    # mixture arrays

    @property
    def weights(self):
        return np.array([c.weight for c in self.components])

    @property
    def means(self):
        return np.array([c.mean for c in self.components])

    @property
    def variances(self):
        return np.array([c.variance for c in self.components])

    def _mixture_log_parts(self, x):
        """log w_i + log N(x; mu_i, s_i I) for every component, shape (n, K)."""
        d = self.dim
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        v = self.variances
        return (np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * v)) - 0.5 * sq / v

    # core functions on batches

    def f(self, x):
        x = np.asarray(x, dtype=float)
        if self.form == STANDARD_GAUSSIAN:
            return np.zeros(x.shape[0])
        if self.form == GAUSSIAN_MIXTURE:
            return (logsumexp(self._mixture_log_parts(x), axis=1)
                    + 0.5 * np.einsum("nd,nd->n", x, x) + 0.5 * self.dim * np.log(2 * np.pi))
        return self.f_net(x)[:, 0]

    def grad_f(self, x):
        x = np.asarray(x, dtype=float)
        if self.form == STANDARD_GAUSSIAN:
            return np.zeros_like(x)
        if self.form == GAUSSIAN_MIXTURE:
            parts = self._mixture_log_parts(x)
            resp = np.exp(parts - logsumexp(parts, axis=1, keepdims=True))
            drift = (self.means[None, :, :] - x[:, None, :]) / self.variances[None, :, None]
            return x + np.einsum("nk,nkd->nd", resp, drift)
        return relu.input_gradient(self.f_net, x)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.einsum("nd,nd->n", x, x) + self.f(x) - self.log_norm_Z

    # serialization

    def to_dict(self):
        doc = {"form": self.form, "dim": self.dim, "alpha": self.alpha, "beta": self.beta,
               "r_f": self.r_f}
        if self.form == GAUSSIAN_MIXTURE:
            doc["components"] = [{"weight": c.weight, "mean": [float(v) for v in c.mean],
                                  "variance": c.variance} for c in self.components]
        if self.form == RELU_TILTED:
            doc["f_net"] = relu.to_text(self.f_net)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        try:
            form = doc["form"]
            dim = doc["dim"]
        except KeyError as exc:
            raise ConfigError(f"target document is missing key {exc}") from None
        alpha = doc.get("alpha", 0.0)
        beta = doc.get("beta", 0.0)
        r_f = doc.get("r_f")
        if form == GAUSSIAN_MIXTURE:
            comps = doc.get("components") or []
            weights = [c["weight"] for c in comps]
            total = sum(weights)
            if abs(total - 1.0) <= 1e-9:
                weights = [w / total for w in weights]
            means = [c["mean"] if np.ndim(c["mean"]) else [c["mean"]] for c in comps]
            spec = cls.gaussian_mixture(weights, means, [c["variance"] for c in comps],
                                        alpha, beta, r_f)
        elif form == RELU_TILTED:
            spec = cls.relu_tilted(relu.from_text(doc["f_net"]), alpha, beta, r_f)
        else:
            spec = cls(form, dim, alpha, beta, 0.0 if r_f is None else r_f)
        if spec.dim != dim:
            raise ConfigError(f"declared dim {dim} does not match components (dim {spec.dim})")
        return spec

    def to_yaml(self):
        import yaml

        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text):
        import yaml

        return cls.from_dict(yaml.safe_load(text))

    def __repr__(self):
        return (f"TargetSpec(form={self.form!r}, dim={self.dim}, alpha={self.alpha}, "
                f"beta={self.beta}, r_f={self.r_f})")


def _check_point(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("x must be finite")
    return x


def log_relative_density(spec, x):
    """f(x) for one point (vector) or a batch (n x d)."""
    x = _check_point(x)
    if x.ndim == 1:
        return float(spec.f(x[None, :])[0])
    return spec.f(x)


def grad_f(spec, x):
    """Exact gradient of f; ReLU kinks use derivative 0 at the kink."""
    x = _check_point(x)
    if x.ndim == 1:
        return spec.grad_f(x[None, :])[0]
    return spec.grad_f(x)


# growth checks

def _directions(spec, n_random=16, seed=12345):
    d = spec.dim
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = np.linspace(0, 2 * np.pi, 32, endpoint=False)
        dirs = [np.stack([np.cos(ang), np.sin(ang)], axis=1)]
    else:
        eye = np.eye(d)
        rnd = np.random.default_rng(seed).standard_normal((n_random, d))
        dirs = [eye, -eye, rnd / np.linalg.norm(rnd, axis=1, keepdims=True)]
    if spec.form == GAUSSIAN_MIXTURE:
        mu = spec.means
        nrm = np.linalg.norm(mu, axis=1)
        mu = mu[nrm > 0] / nrm[nrm > 0, None]
        dirs += [mu, -mu]
    return np.vstack(dirs)


def _growth_margin(spec, radii, dirs):
    pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, spec.dim)
    r2 = np.repeat(radii**2, dirs.shape[0])
    fv = spec.f(pts)
    margin = np.minimum(fv + spec.alpha * r2, spec.beta * r2 - fv)
    return pts, margin.reshape(radii.size, dirs.shape[0])


def growth_constants_check(spec, n_grid=100):
    """Check -alpha|x|^2 <= f(x) <= beta|x|^2 on a radial grid with |x| in [r_f, 3 r_f]."""
    if n_grid < 100:
        raise DomainError("n_grid must be at least 100")
    r0 = spec.r_f
    hi = 3.0 * r0 if r0 > 0 else 3.0
    radii = np.linspace(r0, hi, n_grid)
    dirs = _directions(spec)
    pts, margin = _growth_margin(spec, radii, dirs)
    flat = margin.reshape(-1)
    tol = 1e-12 * np.maximum(1.0, np.repeat(radii**2, dirs.shape[0]))
    bad = flat < -tol
    tightest = None
    if spec.form == GAUSSIAN_MIXTURE:
        tightest = mixture_growth_constants(spec.variances)
    return GrowthReport(
        passed=not bad.any(),
        worst_margin=float(flat.min()),
        violations=[pts[i].tolist() for i in np.flatnonzero(bad)],
        n_points=flat.size,
        tightest=tightest,
    )


def scan_r_f(spec, r_max=200.0, step=0.05):
    """Smallest grid radius beyond which the growth bounds hold up to ``r_max``."""
    radii = np.arange(0.0, r_max + step / 2, step)
    _, margin = _growth_margin(spec, radii, _directions(spec))
    ok = np.all(margin >= -1e-12 * np.maximum(1.0, radii[:, None] ** 2), axis=1)
    if not ok[-1]:
        raise ConfigError(f"growth bounds fail at radius {r_max}; alpha/beta too small",
                          alpha=spec.alpha, beta=spec.beta)
    bad = np.flatnonzero(~ok)
    return float(radii[bad[-1] + 1]) if bad.size else 0.0


# normalization

def _box_radius(spec):
    if spec.form == GAUSSIAN_MIXTURE:
        return float(np.max(np.abs(spec.means)) + 12.0 * np.sqrt(spec.variances.max()))
    return spec.r_f + 12.0 / np.sqrt(1.0 - 2.0 * spec.beta)


def _legendre_grid(lo, hi, panels, order):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _log_integral_box(spec, log_integrand):
    """log of the integral of exp(log_integrand) over the box, d <= 2."""
    L = _box_radius(spec)
    if spec.dim == 1:
        nodes, weights = _legendre_grid(-L, L, 2000, 8)
        vals = log_integrand(nodes[:, None])
        return logsumexp(vals, b=weights)
    nodes, weights = _legendre_grid(-L, L, 240, 4)
    out = []
    for xi, wi in zip(nodes, weights):
        pts = np.column_stack([np.full(nodes.size, xi), nodes])
        out.append(logsumexp(log_integrand(pts), b=wi * weights))
    return logsumexp(out)


def _compute_log_norm(spec):
    def log_unnorm(x):
        return -0.5 * np.einsum("nd,nd->n", x, x) + spec.f(x)

    if spec.dim <= 2:
        val = _log_integral_box(spec, log_unnorm)
    else:
        s2 = 1.0 / (1.0 - 2.0 * spec.beta)
        rng = np.random.default_rng(Z_IS_SEED)
        logs = []
        for _ in range(Z_IS_SAMPLES // PROPOSAL_BATCH):
            x = rng.standard_normal((PROPOSAL_BATCH, spec.dim)) * np.sqrt(s2)
            logq = (-0.5 * np.einsum("nd,nd->n", x, x) / s2
                    - 0.5 * spec.dim * np.log(2 * np.pi * s2))
            logs.append(log_unnorm(x) - logq)
        val = logsumexp(np.concatenate(logs)) - np.log(Z_IS_SAMPLES)
    if not np.isfinite(val):
        raise NumericalError("normalizing constant is not finite")
    return float(val)


# sampling

def _envelope_constant(spec):
    """Upper bound of f(x) - beta|x|^2 via a grid scan of the ball of radius r_f."""
    radius = max(spec.r_f, 1.0)
    h = 0.05 * radius
    axis = np.arange(-radius, radius + h / 2, h)
    if axis.size ** spec.dim <= 2 * 10**6:
        mesh = np.meshgrid(*([axis] * spec.dim), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        pts = pts[np.linalg.norm(pts, axis=1) <= radius + 1e-12]
    else:
        rng = np.random.default_rng(Z_IS_SEED)
        g = rng.standard_normal((2 * 10**6, spec.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = g * radius * rng.random((g.shape[0], 1)) ** (1.0 / spec.dim)
    vals = spec.f(pts) - spec.beta * np.einsum("nd,nd->n", pts, pts)
    return max(0.0, float(vals.max())) + ENVELOPE_MARGIN


def sample_p0(spec, n, seed):
    """Exact i.i.d. draws from p0 as an (n, d) array."""
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = np.random.default_rng(seed)
    d = spec.dim
    if spec.form == STANDARD_GAUSSIAN:
        return rng.standard_normal((n, d))
    if spec.form == GAUSSIAN_MIXTURE:
        idx = rng.choice(len(spec.components), size=n, p=spec.weights)
        noise = rng.standard_normal((n, d))
        return spec.means[idx] + np.sqrt(spec.variances[idx])[:, None] * noise
    return _rejection_sample(spec, n, rng)


def _rejection_sample(spec, n, rng):
    s = 1.0 / np.sqrt(1.0 - 2.0 * spec.beta)
    bound = _envelope_constant(spec)
    out = []
    have = 0
    proposed = accepted = 0
    while have < n:
        x = rng.standard_normal((PROPOSAL_BATCH, spec.dim)) * s
        log_acc = spec.f(x) - spec.beta * np.einsum("nd,nd->n", x, x) - bound
        keep = np.log(rng.random(PROPOSAL_BATCH)) < log_acc
        proposed += PROPOSAL_BATCH
        accepted += int(keep.sum())
        if proposed >= PROPOSAL_BATCH and accepted / proposed < MIN_ACCEPTANCE:
            raise NumericalError("rejection sampler acceptance rate below 1e-4",
                                 accepted=accepted, proposed=proposed, envelope=bound)
        out.append(x[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]
