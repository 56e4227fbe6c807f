"""Ground-truth scores of the OU-evolved target.

With s2 = 1 - e^{-2t} and y(u) = e^{-t} x + sqrt(s2) u,

    G_t(x)   = E_u[ exp(f(y(u))) ],
    F_t^j(x) = E_u[ y_j(u) exp(f(y(u))) ],
    score_j  = (-x_j + e^{-t} F_t^j / G_t) / s2,

where u is standard normal. Expectations are computed by tensor
Gauss-Hermite quadrature (probabilists' weights normalized to sum 1) or by
a frozen set of Monte Carlo nodes. f is shifted by its maximum over the
nodes before exponentiating; the shift cancels in F/G.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, NumericalError
from .targets import GAUSSIAN_MIXTURE

GAUSS_HERMITE = "gauss_hermite"
MONTE_CARLO = "monte_carlo"
_CHUNK = 2 * 10**6


def default_order(dim):
    if dim <= 2:
        return 64
    if dim == 3:
        return 24
    raise ConfigError("tensor Gauss-Hermite is limited to d <= 3; use Monte Carlo nodes")


@lru_cache(maxsize=None)
def gauss_hermite_nodes(order, dim):
    """Tensor probabilists' Gauss-Hermite rule for N(0, I_dim); read-only arrays."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _check_t(t):
    if not t > 0:
        raise DomainError(f"time must be positive, got {t}")


class ScoreQuadrature:
    """Evaluator of F_t and G_t for a target.

    Parameters
    ----------
    spec : TargetSpec
    mode : {"gauss_hermite", "monte_carlo"}
    order : int, optional
        Gauss-Hermite points per axis (default 64 for d <= 2, 24 for d = 3).
    m, seed : int, optional
        Monte Carlo node count and seed; the node set is frozen at construction.
    """

    def __init__(self, spec, mode=GAUSS_HERMITE, order=None, m=None, seed=None):
        self.spec = spec
        self.mode = mode
        if mode == GAUSS_HERMITE:
            self.order = order or default_order(spec.dim)
            if self.order < 8:
                raise ConfigError("Gauss-Hermite order must be at least 8")
            self.nodes, self.weights = gauss_hermite_nodes(self.order, spec.dim)
        elif mode == MONTE_CARLO:
            if m is None or m < 1000 or seed is None:
                raise ConfigError("Monte Carlo mode needs m >= 1000 and an explicit seed")
            self.m, self.seed = int(m), seed
            nodes = np.random.default_rng(seed).standard_normal((self.m, spec.dim))
            nodes.setflags(write=False)
            self.nodes = nodes
            self.weights = np.full(self.m, 1.0 / self.m)
        else:
            raise ConfigError(f"unknown quadrature mode {mode!r}")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise NumericalError("quadrature weights do not sum to 1")

    def _scaled(self, t, x):
        """Return F~ (n, d), G~ (n,), shift (n,) with F = F~ e^shift, G = G~ e^shift."""
        _check_t(t)
        x = np.asarray(x, dtype=float)
        n, d = x.shape
        shrink = np.exp(-t)
        sd = np.sqrt(-np.expm1(-2 * t))
        N = self.nodes.shape[0]
        F = np.empty((n, d))
        G = np.empty(n)
        shift = np.empty(n)
        step = max(1, _CHUNK // N)
        for lo in range(0, n, step):
            xs = x[lo:lo + step]
            y = shrink * xs[:, None, :] + sd * self.nodes[None, :, :]
            fv = self.spec.f(y.reshape(-1, d)).reshape(xs.shape[0], N)
            top = fv.max(axis=1)
            e = np.exp(fv - top[:, None]) * self.weights[None, :]
            G[lo:lo + step] = e.sum(axis=1)
            F[lo:lo + step] = np.einsum("nk,nkd->nd", e, y)
            shift[lo:lo + step] = top
        if not (np.all(np.isfinite(G)) and np.all(G > 0) and np.all(np.isfinite(F))):
            bad = np.flatnonzero(~(np.isfinite(G) & (G > 0)))
            raise NumericalError("G estimate is not positive and finite",
                                 t=t, points=x[bad[:5]].tolist())
        return F, G, shift

    def ratio(self, t, x):
        F, G, _ = self._scaled(t, x)
        return F / G[:, None]

    def score_stderr(self, t, x):
        """Delta-method standard error of the self-normalized score (Monte Carlo mode)."""
        if self.mode != MONTE_CARLO:
            raise ConfigError("standard errors are defined for Monte Carlo nodes only")
        x = np.asarray(x, dtype=float)
        shrink = np.exp(-t)
        s2 = -np.expm1(-2 * t)
        out = np.empty_like(x)
        for i, xi in enumerate(x):
            y = shrink * xi + np.sqrt(s2) * self.nodes
            fv = self.spec.f(y)
            w = np.exp(fv - fv.max())
            r = (w[:, None] * y).sum(axis=0) / w.sum()
            resid = w[:, None] * (y - r)
            out[i] = np.sqrt((resid**2).sum(axis=0)) / w.sum()
        return shrink * out / s2


def _batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != dim:
        raise DomainError(f"expected points of dimension {dim}")
    return x2, single


def eval_FG(q, t, x):
    """F_t(x) (vector) and G_t(x) (scalar) for one point, or batched arrays."""
    x2, single = _batch(x, q.spec.dim)
    F, G, shift = q._scaled(t, x2)
    scale = np.exp(shift)
    F, G = F * scale[:, None], G * scale
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(F))):
        raise NumericalError("F or G overflows; use true_score which works with the shifted values")
    return (F[0], float(G[0])) if single else (F, G)


def true_score(q, t, x):
    """Score of p_t assembled from the F/G quadrature."""
    x2, single = _batch(x, q.spec.dim)
    r = q.ratio(t, x2)
    s = (-x2 + np.exp(-t) * r) / -np.expm1(-2 * t)
    return s[0] if single else s


def evolved_components(spec, t):
    """Means and variances of the mixture components after running the OU flow to time t."""
    shrink = np.exp(-t)
    means = shrink * spec.means
    variances = shrink**2 * spec.variances - np.expm1(-2 * t)
    return means, variances


def mixture_score_oracle(spec, t, x):
    """Closed-form score of the OU-evolved Gaussian mixture (t = 0 gives the data score)."""
    if spec.form != GAUSSIAN_MIXTURE:
        raise ConfigError("mixture_score_oracle needs a Gaussian mixture target")
    if t < 0:
        raise DomainError("t must be non-negative")
    x2, single = _batch(x, spec.dim)
    means, var = evolved_components(spec, t)
    diff = x2[:, None, :] - means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = np.log(spec.weights) - 0.5 * spec.dim * np.log(var) - 0.5 * sq / var
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    s = -np.einsum("nk,nkd->nd", resp / var[None, :], diff)
    return s[0] if single else s


@dataclass
class GrowthCheck:
    passed: bool
    radius_condition_met: bool
    worst_lower_ratio: float
    worst_upper_ratio: float
    worst_F_ratio: float
    rows: list


def _ball_points(dim, R, n_radii=11, n_dirs=32, seed=7):
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif dim == 2:
        a = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
        dirs = np.stack([np.cos(a), np.sin(a)], axis=1)
    else:
        g = np.random.default_rng(seed).standard_normal((n_dirs, dim))
        dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
    radii = np.linspace(0.0, R, n_radii)
    return (radii[:, None, None] * dirs[None]).reshape(-1, dim)


def fg_growth_check(q, R, t_list, alpha=None, beta=None, cap=1e3):
    """Check (1+2a)^{-d/2} e^{-a R^2} <= G_t <= (1-2b)^{-d/2} e^{b R^2} and
    |F_t^j| <= cap (1-2b)^{-d/2} e^{b R^2} on a grid of the ball of radius R.

    ``alpha``/``beta`` default to the target's constants. Report only.
    """
    spec = q.spec
    a = spec.alpha if alpha is None else alpha
    b = spec.beta if beta is None else beta
    d = spec.dim
    lower = (1 + 2 * a) ** (-d / 2) * np.exp(-a * R**2)
    upper = (1 - 2 * b) ** (-d / 2) * np.exp(b * R**2)
    pts = _ball_points(d, R)
    inner = _ball_points(d, spec.r_f) if spec.r_f > 0 else np.zeros((1, d))
    sup_f = float(np.abs(spec.f(inner)).max())
    needed = max(spec.r_f, np.sqrt(sup_f / b)) if b > 0 else spec.r_f
    rows = []
    worst_lo = worst_up = worst_F = 0.0
    for t in t_list:
        F, G, shift = q._scaled(t, pts)
        logG = np.log(G) + shift
        logF = np.log(np.abs(F).max(axis=1) + 1e-300) + shift
        lo_ratio = float(np.exp(np.log(lower) - logG.min()))
        up_ratio = float(np.exp(logG.max() - np.log(upper)))
        F_ratio = float(np.exp(logF.max() - np.log(upper)))
        worst_lo, worst_up, worst_F = max(worst_lo, lo_ratio), max(worst_up, up_ratio), max(worst_F, F_ratio)
        rows.append({"t": t, "lower_ratio": lo_ratio, "upper_ratio": up_ratio, "F_ratio": F_ratio})
    passed = worst_lo <= 1.0 and worst_up <= 1.0 and worst_F <= cap
    return GrowthCheck(passed, R >= needed, worst_lo, worst_up, worst_F, rows)
