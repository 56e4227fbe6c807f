"""Constructive ReLU approximations of exp, x^2, xy, 1/x and x/y, and the
assembled score network.

Every scalar builder writes its target on an interval as an affine part
plus a hinge integral

    g(x) = affine(x) + sum_k  integral_{lo_k}^{hi_k} (s_k x - t)^+ coef_k k(t) dt

and replaces each piece of the measure by ``m_k`` equally weighted nodes:
i.i.d. draws from the normalized piece (``nodes="mc"``) or its midpoint
quantiles (``nodes="quantile"``). The resulting shallow net is then
certified on a grid and re-certified on a 10x finer grid with slack 2.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import relu
from .errors import CertificationError, ConfigError, DomainError
from .relu import Block, ReluNet
from .targets import GAUSSIAN_MIXTURE, RELU_TILTED, STANDARD_GAUSSIAN

log = logging.getLogger(__name__)

DEFAULT_C = 10.0
GRID_POINTS = 10_000
FINE_FACTOR = 10
SLACK = 2.0
MAX_SEEDS = 5
M_CAP = 10**7
NODE_MODES = ("mc", "quantile")


# measures and discretization

@dataclass(frozen=True)
class HingePiece:
    """Measure ``coef * k(t) dt`` on [lo, hi] over neurons ``(sign * x - t)^+``.

    ``kind`` selects the kernel k: "uniform" (1), "exp" (e^t) or
    "inv_cube" (2 / t^3, needs lo > 0).
    """

    kind: str
    lo: float
    hi: float
    coef: float = 1.0
    sign: float = 1.0

    def mass(self):
        if self.kind == "uniform":
            return self.hi - self.lo
        if self.kind == "exp":
            return np.exp(self.hi) - np.exp(self.lo)
        if self.kind == "inv_cube":
            return self.lo**-2 - self.hi**-2
        raise DomainError(f"unknown kernel {self.kind!r}")

    def tv(self):
        return abs(self.coef) * self.mass()

    def inverse_cdf(self, u):
        lo, hi = self.lo, self.hi
        if self.kind == "uniform":
            return lo + u * (hi - lo)
        if self.kind == "exp":
            # log(e^lo + u (e^hi - e^lo)) without overflow
            return lo + np.log1p(u * np.expm1(hi - lo))
        return (lo**-2 - u * (lo**-2 - hi**-2)) ** -0.5


def _split(m, shares):
    shares = np.asarray(shares, dtype=float)
    return [max(1, int(np.ceil(m * s))) for s in shares / shares.sum()]


def mc_discretize(pieces, m, seed=None, nodes="mc", affine=None):
    """Equal-weight discretization of a hinge-integral measure as a shallow net.

    Parameters
    ----------
    pieces : list of HingePiece
    m : int or list of int
        Total node count (split evenly over pieces) or one count per piece.
    seed : int, optional
        Required for ``nodes="mc"``.
    affine : tuple, optional
        ``(W, b, A, c)`` extra neurons and output bias appended verbatim.
    """
    if nodes not in NODE_MODES:
        raise ConfigError(f"nodes must be one of {NODE_MODES}")
    counts = list(m) if np.ndim(m) else _split(int(m), [1.0] * len(pieces))
    if len(counts) != len(pieces) or min(counts, default=1) < 1:
        raise DomainError("need at least one node per piece")
    if nodes == "mc" and seed is None:
        raise ConfigError("i.i.d. nodes need a seed")
    rng = np.random.default_rng(seed) if nodes == "mc" else None
    W, b, A = [], [], []
    for piece, mk in zip(pieces, counts):
        u = rng.random(mk) if rng is not None else (np.arange(mk) + 0.5) / mk
        t = piece.inverse_cdf(u)
        W.append(np.full(mk, piece.sign))
        b.append(-t)
        A.append(np.full(mk, piece.coef * piece.mass() / mk))
    c = 0.0
    if affine is not None:
        aW, ab, aA, c = affine
        W.append(np.atleast_1d(aW))
        b.append(np.atleast_1d(ab))
        A.append(np.atleast_1d(aA))
    W = np.concatenate(W) if W else np.zeros(1)
    b = np.concatenate(b) if b else np.zeros(1)
    A = np.concatenate(A) if A else np.zeros(1)
    return ReluNet.shallow(W[:, None], b, A[None, :], [c])


# certification

@dataclass
class Certificate:
    builder: str
    eps: float
    relative: bool
    grid_error: float
    fine_grid_error: float
    n_grid: int
    n_fine: int
    m: int
    nodes: str
    seed: object
    attempts: int
    path_norm: float
    path_norm_order: float
    C: float
    rigorous_bound: object = None
    neurons: int = 0

    def to_dict(self):
        return asdict(self)


def _box_grid(box, n):
    box = np.asarray(box, dtype=float)
    if box.shape[0] == 1:
        return np.linspace(box[0, 0], box[0, 1], n)[:, None]
    k = int(np.ceil(n ** (1.0 / box.shape[0])))
    axes = [np.linspace(lo, hi, k) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _spacing(box, n):
    box = np.asarray(box, dtype=float)
    k = n if box.shape[0] == 1 else int(np.ceil(n ** (1.0 / box.shape[0])))
    return float((box[:, 1] - box[:, 0]).max() / (k - 1))


def grid_error(net, target, box, n, scale=None):
    """Max of |net - target| / scale over a regular grid of ``n`` points in ``box``."""
    X = _box_grid(box, n)
    err = np.abs(net(X).reshape(-1) - target(X))
    if scale is not None:
        err = err / scale(X)
    return float(err.max())


def _search(name, make, target, box, eps, m0, nodes, seed, scale, order, C, lip_target,
            n_grid=GRID_POINTS):
    """Grow m (doubling, up to 5 seeds per size for i.i.d. nodes) until certified."""
    n_fine = FINE_FACTOR * n_grid
    m = max(1, int(m0))
    attempts = 0
    last = None
    while m <= M_CAP:
        seeds = [seed + k for k in range(MAX_SEEDS)] if nodes == "mc" else [None]
        for s in seeds:
            net = make(m, s)
            attempts += 1
            e1 = grid_error(net, target, box, n_grid, scale)
            last = (m, e1)
            if e1 > eps:
                continue
            e2 = grid_error(net, target, box, n_fine, scale)
            if e2 > SLACK * eps:
                log.info("%s: coarse grid passed but fine grid failed (%.3g > %.3g)",
                         name, e2, SLACK * eps)
                continue
            pn = net.path_norm()
            bound = None
            if scale is None:
                bound = e2 + 0.5 * _spacing(box, n_fine) * (pn + lip_target)
            cert = Certificate(name, eps, scale is not None, e1, e2, n_grid, n_fine, m,
                               nodes, s, attempts, pn, order, C, bound, net.n_neurons)
            if pn > C * order:
                raise CertificationError(f"{name}: path norm {pn:.4g} exceeds {C} x {order:.4g}",
                                         certificate=cert.to_dict())
            log.info("%s certified: m=%d neurons=%d err=%.3g fine=%.3g path_norm=%.4g",
                     name, m, cert.neurons, e1, e2, pn)
            net.meta["certificate"] = cert
            return net
        m *= 2
    raise CertificationError(f"{name}: node cap {M_CAP} reached before certification",
                             last_m=last[0], last_error=last[1], eps=eps)


def _m0_mc(tv, spread, eps):
    return int(np.ceil((tv * spread / eps) ** 2))


# scalar builders

def build_exp(a, b, eps, relative=False, nodes="mc", seed=0, C=DEFAULT_C):
    """Shallow net for e^x on [a, b] from e^x = e^a + e^a (x-a) + int_a^b (x-t)^+ e^t dt.

    With ``relative=True`` the error is measured relative to e^x and the
    measure is split into unit-length pieces.
    """
    if not a < b:
        raise DomainError("build_exp needs a < b")
    n_pieces = int(np.ceil(b - a)) if relative else 1
    edges = np.linspace(a, b, n_pieces + 1)
    pieces = [HingePiece("exp", lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    ea = np.exp(a)
    affine = (1.0, -a, ea, ea)

    def make(m, s):
        return mc_discretize(pieces, m, s, nodes, affine)

    tv = sum(p.tv() for p in pieces)
    if nodes == "mc":
        m0 = _m0_mc(tv / np.exp(b) if relative else tv, 0.5, eps)
    else:
        m0 = 4 * n_pieces
    scale = (lambda X: np.exp(X[:, 0])) if relative else None
    return _search("exp", make, lambda X: np.exp(X[:, 0]), [[a, b]], eps, m0, nodes, seed,
                   scale, np.exp(b) * max(1.0, abs(a), abs(b)), C, np.exp(b))


def _square_pieces(R, relative):
    if not relative or R <= 1:
        return [HingePiece("uniform", 0.0, R, 2.0, 1.0), HingePiece("uniform", 0.0, R, 2.0, -1.0)], [1, 1]
    edges = [0.0, 1.0]
    while edges[-1] < R:
        edges.append(min(2 * edges[-1], R))
    pieces, shares = [], []
    for sign in (1.0, -1.0):
        for lo, hi in zip(edges[:-1], edges[1:]):
            pieces.append(HingePiece("uniform", lo, hi, 2.0, sign))
            shares.append((hi - lo) / np.sqrt(max(lo, 1.0)))
    return pieces, shares


def build_square(R, eps, relative=False, nodes="quantile", seed=0, C=DEFAULT_C):
    """Shallow net for x^2 on [-R, R] from x^2 = int_0^R 2 (x-t)^+ + 2 (-x-t)^+ dt.

    ``relative=True`` measures error against max(|x|, 1).
    """
    if not R > 0:
        raise DomainError("R must be positive")
    pieces, shares = _square_pieces(R, relative)

    def make(m, s):
        return mc_discretize(pieces, _split(m, shares), s, nodes)

    if nodes == "mc":
        m0 = _m0_mc(4 * R, 0.3 * R, eps)
    else:
        m0 = int(np.ceil(R / np.sqrt(eps)))
    scale = (lambda X: np.maximum(np.abs(X[:, 0]), 1.0)) if relative else None
    return _search("square", make, lambda X: X[:, 0] ** 2, [[-R, R]], eps, m0, nodes, seed,
                   scale, max(R, 1.0) ** 2, C, 2 * R)


def _prod_from_square(sq):
    plus = sq.precompose_linear([[0.5, 0.5]])
    minus = sq.precompose_linear([[0.5, -0.5]])
    return relu.parallel_sum([plus, minus], [1.0, -1.0])


def build_prod(R, eps, relative=False, nodes="quantile", seed=0, C=DEFAULT_C):
    """Net for xy on [-R, R]^2 via xy = ((x+y)/2)^2 - ((x-y)/2)^2.

    ``relative=True`` measures error against max(|x|, |y|, 1).
    """
    sq = build_square(R, eps / 2, relative, nodes, seed, C)
    scale = (lambda X: np.maximum(np.abs(X).max(axis=1), 1.0)) if relative else None

    def make(m, s):
        return _prod_from_square(sq)

    net = _search("prod", make, lambda X: X[:, 0] * X[:, 1], [[-R, R], [-R, R]], eps, 1,
                  "quantile", seed, scale, max(R, 1.0) ** 2, C, 2 * R)
    net.meta["square"] = sq.meta["certificate"]
    return net


def build_inv(a, b, eps, relative=False, nodes="mc", seed=0, C=DEFAULT_C):
    """Shallow net for 1/x on [a, b] from 1/x = 2/a - x/a^2 + int_a^b (x-t)^+ 2/t^3 dt.

    ``relative=True`` measures error against 1/x and splits [a, b] into
    dyadic pieces.
    """
    if not 0 < a < b:
        raise DomainError("build_inv needs 0 < a < b")
    edges = [a]
    if relative:
        while edges[-1] < b:
            edges.append(min(2 * edges[-1], b))
    else:
        edges.append(b)
    pieces = [HingePiece("inv_cube", lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    affine = (1.0, -a, -1.0 / a**2, 1.0 / a)

    def make(m, s):
        return mc_discretize(pieces, m, s, nodes, affine)

    tv = sum(p.tv() for p in pieces)
    if nodes == "mc":
        m0 = _m0_mc(tv * a if relative else tv, 0.1 * (b - a), eps)
    else:
        m0 = 8 * len(pieces)
    scale = (lambda X: 1.0 / X[:, 0]) if relative else None
    return _search("inv", make, lambda X: 1.0 / X[:, 0], [[a, b]], eps, m0, nodes, seed,
                   scale, b / a**2, C, 1.0 / a**2)


def _multi_block(in_dim, out_dim, parts):
    """One block holding several shallow nets, each reading and writing given coordinates."""
    Ws, bs, As = [], [], []
    c = np.zeros(out_dim)
    for net, ins, outs in parts:
        blk = net.blocks[0]
        W = np.zeros((blk.width, in_dim))
        W[:, ins] = blk.W
        A = np.zeros((out_dim, blk.width))
        A[outs, :] = blk.A
        Ws.append(W)
        bs.append(blk.b)
        As.append(A)
        c[outs] += blk.c
    return Block(np.vstack(Ws), np.concatenate(bs), np.hstack(As), c)


def build_quot(R, a, b, eps, relative=False, nodes="quantile", seed=0, C=DEFAULT_C):
    """Net for x/y on [-R, R] x [a, b] as prod(x, inv(y)), two blocks.

    ``relative=True`` measures error against max(1, |x/y|) and uses a
    relatively accurate reciprocal.
    """
    if not (R > 0 and 0 < a < b):
        raise DomainError("build_quot needs R > 0 and 0 < a < b")
    if relative:
        inv = build_inv(a, b, eps / 2, True, nodes, seed, C)
    else:
        inv = build_inv(a, b, eps / (2 * max(R, 1.0)), False, nodes, seed, C)
    # product stage only needs to cover the range actually fed to it
    P = max(R, 1.0 / a + eps)
    prod = build_prod(P, eps / 2, False, "quantile", seed, C)
    first = _multi_block(2, 2, [(ReluNet.identity(1), [0], [0]), (inv, [1], [1])])
    net = ReluNet([first, prod.blocks[0]])
    M = max(R, b / a**2)
    scale = (lambda X: np.maximum(1.0, np.abs(X[:, 0] / X[:, 1]))) if relative else None
    out = _search("quot", lambda m, s: net, lambda X: X[:, 0] / X[:, 1], [[-R, R], [a, b]],
                  eps, 1, "quantile", seed, scale, M**2 * b / a**2, C, 1.0 / a + R / a**2)
    out.meta.update(inv=inv.meta["certificate"], prod=prod.meta["certificate"], prod_radius=P,
                    inv_net=inv, prod_net=prod)
    return out


# log-relative density networks

def _ball_grid(dim, R, n, seed=11):
    if dim == 1:
        return np.linspace(-R, R, n)[:, None]
    if dim == 2:
        k = int(np.ceil(np.sqrt(4 * n / np.pi)))
        ax = np.linspace(-R, R, k)
        g = np.stack([v.ravel() for v in np.meshgrid(ax, ax, indexing="ij")], axis=1)
        return g[np.einsum("nd,nd->n", g, g) <= R * R * (1 + 1e-12)]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * R * rng.random((n, 1)) ** (1.0 / dim)


def _adaptive_interpolant(fn, lo, hi, eps, geometric=False, relative=False, n0=16, cap=2**20):
    """Piecewise-linear interpolant of a 1D function with sup error <= eps on a fine grid."""
    check = np.linspace(lo, hi, 20_001)
    target = fn(check)
    scale = np.abs(target) if relative else 1.0
    n = n0
    while n <= cap:
        knots = np.geomspace(lo, hi, n) if geometric else np.linspace(lo, hi, n)
        net = relu.pl_interpolant(knots, fn(knots))
        err = float((np.abs(net(check[:, None])[:, 0] - target) / scale).max())
        if err <= eps:
            return net, err
        n *= 2
    raise CertificationError("interpolant did not reach the requested accuracy", eps=eps)


def mixture_log_density_net(spec, R, eps):
    """Two-hidden-layer net for f on [-R, R] (1D mixtures).

    The inner shallow layer interpolates the relative density q = e^f, the
    outer one interpolates log on the image of q.
    """
    if spec.form != GAUSSIAN_MIXTURE or spec.dim != 1:
        raise ConfigError("the mixture log-density recipe is implemented for 1D mixtures")

    def q(y):
        return np.exp(spec.f(np.asarray(y, dtype=float).reshape(-1, 1)))

    # q has relative curvature bounded by the local value, so aim for relative accuracy
    qmax = float(q(np.linspace(-R, R, 20_001)).max())
    qmin = float(q(np.linspace(-R, R, 20_001)).min())
    inner, _ = _adaptive_interpolant(q, -R, R, eps / 4, relative=True)
    lo, hi = qmin * (1 - eps / 4), qmax * (1 + eps / 4)
    outer, _ = _adaptive_interpolant(np.log, lo, hi, eps / 2, geometric=True)
    net = relu.compose(outer, inner)
    grid = np.linspace(-R, R, 100_001)[:, None]
    err = float(np.abs(net(grid)[:, 0] - spec.f(grid)).max())
    if err > eps:
        raise CertificationError("mixture log-density net misses its accuracy", error=err, eps=eps)
    net.meta["sup_error"] = err
    return net


def log_density_net(spec, R, eps):
    """phi_f for any supported target on B_R."""
    if spec.form == STANDARD_GAUSSIAN:
        return ReluNet.zero(spec.dim)
    if spec.form == RELU_TILTED:
        return spec.f_net
    return mixture_log_density_net(spec, R, eps)


# score network

@dataclass
class ApproxBudget:
    eps: float
    R: float
    m_neurons: int
    eta: float = float("nan")
    L_f: int = 0

    def __post_init__(self):
        if not (self.eps > 0 and self.R > 0):
            raise ConfigError("budget needs eps > 0 and R > 0")
        if int(self.m_neurons) < 1:
            raise ConfigError("budget needs m_neurons >= 1")


def budget_schedule(eps0, levels=3, dim=1, m0=2500, radius_const=2.5):
    """Budgets with eps halved per level, R ~ sqrt(d + log(1/eps)) and m ~ eps^-2."""
    out = []
    for k in range(levels):
        eps = eps0 / 2**k
        R = radius_const * np.sqrt(dim + np.log(1.0 / eps))
        out.append(ApproxBudget(eps, float(R), int(m0 * 4**k)))
    return out


def build_f_exp(phi_f, budget, f=None, alpha=0.0, beta=0.0, nodes="quantile", C=DEFAULT_C):
    """phi_exp o phi_f with exp built (relatively accurate) on the range of phi_f over B_R."""
    d = phi_f.in_dim
    R = budget.R
    pts = _ball_grid(d, R, GRID_POINTS)
    vals = phi_f(pts).reshape(-1)
    lo = min(float(vals.min()), -alpha * R**2)
    hi = max(float(vals.max()), beta * R**2)
    pad = 0.05 * (hi - lo) + 1e-3
    phi_exp = build_exp(lo - pad, hi + pad, budget.eps, relative=True, nodes=nodes)
    net = relu.compose(phi_exp, phi_f)
    eta = phi_f.path_norm()
    budget.eta = eta
    budget.L_f = phi_f.depth
    net.meta["exp"] = phi_exp.meta["certificate"]
    net.meta["range"] = (lo, hi)
    if f is not None:
        fine = _ball_grid(d, R, FINE_FACTOR * GRID_POINTS)
        target = np.exp(f(fine))
        err = np.abs(net(fine).reshape(-1) - target)
        net.meta["sup_error"] = float(err.max())
        net.meta["sup_relative_error"] = float((err / target).max())
    bound = C * np.exp(max(beta * R**2, hi)) * max(eta, 1.0) * phi_exp.path_norm()
    pn = net.path_norm()
    net.meta["path_norm"] = pn
    if pn > bound:
        raise CertificationError("phi_f,exp path norm above its bound", path_norm=pn, bound=bound)
    return net


def _gaussian_ball_nodes(dim, R, m, seed, nodes):
    """Nodes from the standard Gaussian restricted to B_R, and the mass of B_R."""
    if dim == 1:
        mass = float(ndtr(R) - ndtr(-R))
        if nodes == "quantile":
            u = (np.arange(m) + 0.5) / m
        else:
            u = np.random.default_rng(seed).random(m)
        return ndtri(ndtr(-R) + u * mass)[:, None], mass
    if nodes == "quantile":
        raise ConfigError("quantile Gaussian nodes are available in 1D only")
    rng = np.random.default_rng(seed)
    out, tried, kept = [], 0, 0
    while kept < m:
        z = rng.standard_normal((2 * m, dim))
        tried += z.shape[0]
        z = z[np.einsum("nd,nd->n", z, z) <= R * R]
        out.append(z)
        kept += z.shape[0]
    from scipy.stats import chi2
    return np.vstack(out)[:m], float(chi2.cdf(R * R, dim))


class ConstructedScore:
    """phi(x) = quot(Phi_F(x), Phi_G(x)); the score is (-x + e^{-t} phi(x)) / (1 - e^{-2t}).

    Phi_G(x)   = mass * mean_i E(e^{-t} x + sd u_i)
    Phi_F^j(x) = mass * mean_i prod(y_ij, E(y_i)),   E = phi_exp o phi_f

    Evaluation runs the sub-networks on the stacked node points; ``to_relunet``
    materializes the same function as one ReluNet.
    """

    def __init__(self, t, nodes, mass, f_exp, prod, quot, dim):
        self.t = t
        self.nodes = nodes
        self.mass = mass
        self.f_exp = f_exp
        self.prod = prod
        self.quot = quot
        self.in_dim = self.out_dim = dim
        self.meta = {}

    def _points(self, x):
        sd = np.sqrt(-np.expm1(-2 * self.t))
        return np.exp(-self.t) * x[:, None, :] + sd * self.nodes[None, :, :]

    def FG(self, x, chunk=2 * 10**5):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        m = self.nodes.shape[0]
        G = np.empty(n)
        F = np.empty((n, d))
        step = max(1, chunk // m)
        for lo in range(0, n, step):
            y = self._points(x[lo:lo + step])
            k = y.shape[0]
            flat = y.reshape(-1, d)
            e = self.f_exp(flat)[:, 0]
            G[lo:lo + step] = self.mass * e.reshape(k, m).mean(axis=1)
            for j in range(d):
                pj = self.prod(np.stack([flat[:, j], e], axis=1))[:, 0]
                F[lo:lo + step, j] = self.mass * pj.reshape(k, m).mean(axis=1)
        return F, G

    def __call__(self, x):
        arr = np.asarray(x, dtype=float)
        F, G = self.FG(arr)
        d = self.in_dim
        out = np.empty_like(F)
        for j in range(d):
            out[:, j] = self.quot(np.stack([F[:, j], G], axis=1))[:, 0]
        return out[0] if arr.ndim == 1 else out

    def score(self, x):
        x = np.asarray(x, dtype=float)
        return (-x + np.exp(-self.t) * self(x)) / -np.expm1(-2 * self.t)

    def path_norm(self):
        """Triangle-inequality bound: pn(quot) * (mass * max_i pn(node branch))."""
        return self.meta["path_norm_bound"]

    def to_relunet(self):
        d = self.in_dim
        nb = len(self.f_exp.blocks)
        shrink = np.exp(-self.t)
        sd = np.sqrt(-np.expm1(-2 * self.t))
        fan_parts = [(ReluNet.identity(1), [d], [0])]
        fan_parts += [(self.prod, [j, d], [1 + j]) for j in range(d)]
        fan = _multi_block(d + 1, d + 1, fan_parts)
        branches = []
        for u in self.nodes:
            ys = relu.passthrough(d, nb).precompose_affine(shrink, sd * u)
            es = self.f_exp.precompose_affine(shrink, sd * u)
            both = relu.parallel([ys, es])
            branches.append(ReluNet(both.blocks + (fan,)))
        m = len(branches)
        summed = relu.parallel(branches).then_linear(
            np.tile(np.eye(d + 1), (1, m)) * (self.mass / m))
        # summed outputs (G, F_1..F_d); quotient stage runs per coordinate
        inv, prod_q = self.quot.meta["inv_net"], self.quot.meta["prod_net"]
        stage1 = _multi_block(d + 1, d + 1,
                              [(ReluNet.identity(1), [1 + j], [j]) for j in range(d)]
                              + [(inv, [0], [d])])
        stage2 = _multi_block(d + 1, d, [(prod_q, [j, d], [j]) for j in range(d)])
        return ReluNet(summed.blocks + (stage1, stage2))


def build_score_net(spec, phi_f, t, budget, seed, nodes=None, C=DEFAULT_C):
    """Assemble the constructive score network phi_t for one time t > 0.

    ``nodes`` picks the Gaussian node set: "quantile" (default in 1D) or
    "mc" (seeded i.i.d. draws, default for d >= 2).
    """
    if not t > 0:
        raise DomainError("t must be positive")
    d = spec.dim
    if nodes is None:
        nodes = "quantile" if d == 1 else "mc"
    R = budget.R
    eps = budget.eps
    shrink = np.exp(-t)
    sd = np.sqrt(-np.expm1(-2 * t))
    u, mass = _gaussian_ball_nodes(d, R, int(budget.m_neurons), seed, nodes)
    # node points reach radius shrink * R + sd * R
    inner_budget = ApproxBudget(eps / 4, (shrink + sd) * R, budget.m_neurons)
    f_exp = build_f_exp(phi_f, inner_budget, f=spec.f, alpha=spec.alpha, beta=spec.beta)
    budget.eta, budget.L_f = inner_budget.eta, inner_budget.L_f
    e_max = np.exp(f_exp.meta["range"][1]) * (1 + eps)
    y_max = (shrink + sd) * R
    prod = build_prod(max(y_max, e_max), eps / 4, relative=True)
    core = ConstructedScore(t, u, mass, f_exp, prod, None, d)

    grid = _ball_grid(d, R, 2001 if d == 1 else 1500)
    F, G = core.FG(grid)
    a = 0.5 * (1 + 2 * spec.alpha) ** (-d / 2) * np.exp(-spec.alpha * R**2)
    low = np.flatnonzero(G < a)
    if low.size:
        raise CertificationError("Phi_G falls below the quotient's lower bound",
                                 witness=grid[low[0]].tolist(), value=float(G[low[0]]), bound=a)
    b = 2.0 * float(G.max())
    RF = 2.0 * float(np.abs(F).max())
    quot = build_quot(RF, a, b, eps / 4, relative=True)
    core.quot = quot
    branch = max(f_exp.path_norm(), 1.0) * prod.path_norm()
    core.meta.update(
        t=t, R=R, eps=eps, m=int(budget.m_neurons), nodes=nodes, seed=seed, mass=mass,
        quot_domain={"R": RF, "a": a, "b": b},
        path_norm_bound=quot.path_norm() * mass * branch,
        f_exp=f_exp.meta, prod=prod.meta["certificate"], quot=quot.meta["certificate"],
        eta=budget.eta, L_f=budget.L_f)
    log.info("score net t=%g R=%.3g m=%d: quot domain R=%.3g a=%.3g b=%.3g, path norm <= %.4g",
             t, R, budget.m_neurons, RF, a, b, core.meta["path_norm_bound"])
    return core
