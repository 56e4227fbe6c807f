"""ReLU networks stored as compositions of shallow blocks.

A block maps ``h -> A relu(W h + b) + c``. A network is a sequence of
blocks applied in order, which is exactly the "composition of shallow
networks" view under which the path norm is defined. The representation
value of the path norm is the product over blocks of

    max_j ( sum_i |A_ji| (||W_i||_1 + |b_i|) + |c_j| ),

so composing two networks multiplies their path norms. An output bias
``c_j`` is counted as one extra neuron ``c_j * relu(0.x + 1)``.

The merged affine view (``ReluNet.layers``) fuses the linear output of
each block with the input map of the next block, giving the familiar
"affine, ReLU, affine, ..., affine" stack.
"""

import numpy as np

from .errors import DomainError

_COMPILE_MIN_WIDTH = 16
_COMPILE_MAX_LINES = 8


def _as_2d(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DomainError(f"expected input of dimension {dim}, got shape {np.shape(x)}")
    return x, single


class _LineGroup:
    """Neurons whose weight rows are all multiples of one direction.

    Their contribution is a piecewise-linear function of the projection
    ``p = line . h``; it is evaluated exactly with prefix sums over the
    sorted breakpoints instead of a dense matrix product.
    """

    def __init__(self, line, slopes, b, A):
        self.line = line
        const = slopes == 0
        self.const = A[:, const] @ np.maximum(b[const], 0.0) if const.any() else np.zeros(A.shape[0])
        self.right = self._prefix(slopes, b, A, slopes > 0)
        self.left = self._prefix(slopes, b, A, slopes < 0)

    @staticmethod
    def _prefix(slopes, b, A, mask):
        if not mask.any():
            return None
        s = slopes[mask]
        tau = -b[mask] / s
        coef = A[:, mask] * s
        order = np.argsort(tau, kind="stable")
        tau = tau[order]
        coef = coef[:, order].T
        zero = np.zeros((1, coef.shape[1]))
        cum = np.concatenate([zero, np.cumsum(coef, axis=0)])
        cum_t = np.concatenate([zero, np.cumsum(coef * tau[:, None], axis=0)])
        return tau, cum, cum_t

    def __call__(self, h):
        p = h @ self.line
        out = np.broadcast_to(self.const, (p.shape[0], self.const.shape[0])).copy()
        if self.right is not None:
            tau, cum, cum_t = self.right
            i = np.searchsorted(tau, p, side="left")
            out += p[:, None] * cum[i] - cum_t[i]
        if self.left is not None:
            tau, cum, cum_t = self.left
            i = np.searchsorted(tau, p, side="right")
            out += p[:, None] * (cum[-1] - cum[i]) - (cum_t[-1] - cum_t[i])
        return out


class Block:
    """One shallow piece ``h -> A relu(W h + b) + c``."""

    __slots__ = ("W", "b", "A", "c", "_groups")

    def __init__(self, W, b, A, c):
        W = np.array(W, dtype=float, ndmin=2)
        b = np.array(b, dtype=float).reshape(-1)
        A = np.array(A, dtype=float, ndmin=2)
        c = np.array(c, dtype=float).reshape(-1)
        if W.shape[0] != b.shape[0] or A.shape[1] != W.shape[0] or A.shape[0] != c.shape[0]:
            raise DomainError(
                f"inconsistent block shapes W{W.shape} b{b.shape} A{A.shape} c{c.shape}"
            )
        for arr in (W, b, A, c):
            arr.setflags(write=False)
        self.W, self.b, self.A, self.c = W, b, A, c
        self._groups = None

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def width(self):
        return self.W.shape[0]

    @property
    def out_dim(self):
        return self.A.shape[0]

    def norm(self):
        inner = np.abs(self.W).sum(axis=1) + np.abs(self.b)
        per_out = np.abs(self.A) @ inner + np.abs(self.c)
        return float(per_out.max()) if per_out.size else 0.0

    def _line_groups(self):
        if self._groups is not None:
            return self._groups or None
        groups = []
        if self.width >= _COMPILE_MIN_WIDTH:
            norms = np.linalg.norm(self.W, axis=1)
            rows = self.W / np.where(norms > 0, norms, 1.0)[:, None]
            lead = rows[np.arange(self.width), np.argmax(rows != 0, axis=1)]
            rows = np.round(rows * np.where(lead < 0, -1.0, 1.0)[:, None], 12)
            keys, inverse = np.unique(rows, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            if len(keys) <= _COMPILE_MAX_LINES:
                for k, key in enumerate(keys):
                    idx = np.flatnonzero(inverse == k)
                    if not np.any(key):
                        line = np.zeros(self.in_dim)
                        line[0] = 1.0
                        slopes = np.zeros(idx.size)
                    else:
                        line = key
                        slopes = self.W[idx] @ line
                    groups.append(_LineGroup(line, slopes, self.b[idx], self.A[:, idx]))
        self._groups = groups
        return groups or None

    def __call__(self, h):
        groups = self._line_groups()
        if groups:
            out = np.broadcast_to(self.c, (h.shape[0], self.out_dim)).copy()
            for g in groups:
                out += g(h)
            return out
        return np.maximum(h @ self.W.T + self.b, 0.0) @ self.A.T + self.c


class ReluNet:
    """A ReLU network as a composition of shallow blocks.

    Parameters
    ----------
    blocks : sequence of Block
        Applied left to right; output dimension of each block must match
        the input dimension of the next.
    meta : dict, optional
        Free-form construction record (builders store certification data
        here). Not part of the function and not serialized.
    """

    def __init__(self, blocks, meta=None):
        blocks = tuple(blocks)
        if not blocks:
            raise DomainError("a network needs at least one block")
        for first, second in zip(blocks, blocks[1:]):
            if first.out_dim != second.in_dim:
                raise DomainError(
                    f"block dimensions do not chain: {first.out_dim} -> {second.in_dim}"
                )
        self.blocks = blocks
        self.meta = dict(meta or {})

    # construction helpers

    @classmethod
    def shallow(cls, W, b, A, c=None, meta=None):
        A = np.array(A, dtype=float, ndmin=2)
        if c is None:
            c = np.zeros(A.shape[0])
        return cls([Block(W, b, A, c)], meta=meta)

    @classmethod
    def from_layers(cls, layers, meta=None):
        """Build from a merged affine stack ``[(W1, b1), ..., (WL, bL)]``, L >= 2.

        Intermediate blocks get identity output maps, so the path norm is
        the product of the per-layer values max_j(||W_j||_1 + |b_j|) times
        the shallow path norm of the last two layers.
        """
        layers = [(np.array(W, dtype=float, ndmin=2), np.array(b, dtype=float).reshape(-1))
                  for W, b in layers]
        if len(layers) < 2:
            raise DomainError("need at least two affine layers")
        blocks = []
        for W, b in layers[:-2]:
            blocks.append(Block(W, b, np.eye(W.shape[0]), np.zeros(W.shape[0])))
        (W, b), (A, c) = layers[-2], layers[-1]
        blocks.append(Block(W, b, A, c))
        return cls(blocks, meta=meta)

    @classmethod
    def zero(cls, in_dim, out_dim=1):
        return cls.shallow(np.zeros((1, in_dim)), np.zeros(1), np.zeros((out_dim, 1)))

    @classmethod
    def identity(cls, dim):
        """Exact identity via x = relu(x) - relu(-x); path norm 2."""
        eye = np.eye(dim)
        return cls.shallow(np.vstack([eye, -eye]), np.zeros(2 * dim), np.hstack([eye, -eye]))

    # structure

    @property
    def in_dim(self):
        return self.blocks[0].in_dim

    @property
    def out_dim(self):
        return self.blocks[-1].out_dim

    @property
    def depth(self):
        """Number of affine layers in the merged view."""
        return len(self.blocks) + 1

    @property
    def n_neurons(self):
        return sum(blk.width for blk in self.blocks)

    @property
    def layers(self):
        """Merged affine stack; ReLU sits between consecutive layers."""
        out = [(self.blocks[0].W, self.blocks[0].b)]
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            out.append((nxt.W @ prev.A, nxt.W @ prev.c + nxt.b))
        out.append((self.blocks[-1].A, self.blocks[-1].c))
        return out

    # evaluation

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        h, single = _as_2d(x, self.in_dim)
        for blk in self.blocks:
            h = blk(h)
        return h[0] if single else h

    def path_norm(self):
        return float(np.prod([blk.norm() for blk in self.blocks]))

    # algebra

    def scaled(self, factor):
        """Multiply the output by ``factor`` (rescales the last block's output map)."""
        last = self.blocks[-1]
        blk = Block(last.W, last.b, last.A * factor, last.c * factor)
        return ReluNet(self.blocks[:-1] + (blk,), meta=self.meta)

    def precompose_affine(self, scale, shift):
        """Return the network ``x -> self(scale * x + shift)``."""
        first = self.blocks[0]
        shift = np.broadcast_to(np.asarray(shift, dtype=float), (self.in_dim,))
        blk = Block(first.W * scale, first.b + first.W @ shift, first.A, first.c)
        return ReluNet((blk,) + self.blocks[1:])

    def precompose_linear(self, M):
        """Return the network ``x -> self(M x)``."""
        M = np.array(M, dtype=float, ndmin=2)
        first = self.blocks[0]
        blk = Block(first.W @ M, first.b, first.A, first.c)
        return ReluNet((blk,) + self.blocks[1:])

    def then_linear(self, M, offset=None):
        """Return the network ``x -> M self(x) + offset`` (folded into the last block)."""
        M = np.array(M, dtype=float, ndmin=2)
        last = self.blocks[-1]
        c = M @ last.c if offset is None else M @ last.c + offset
        blk = Block(last.W, last.b, M @ last.A, c)
        return ReluNet(self.blocks[:-1] + (blk,))

    def with_output_shift(self, offset):
        last = self.blocks[-1]
        blk = Block(last.W, last.b, last.A, last.c + offset)
        return ReluNet(self.blocks[:-1] + (blk,), meta=self.meta)


def compose(outer, inner, check=True):
    """Return ``outer o inner``; path norm is multiplicative for this representation."""
    if inner.out_dim != outer.in_dim:
        raise DomainError(f"cannot compose: inner out_dim {inner.out_dim} != outer in_dim {outer.in_dim}")
    net = ReluNet(inner.blocks + outer.blocks)
    if check:
        bound = outer.path_norm() * inner.path_norm()
        value = net.path_norm()
        assert value <= bound * (1 + 1e-12) + 1e-300, (value, bound)
    return net


def parallel_sum(nets, weights=None):
    """Shallow networks with shared input summed with weights: sum_k w_k net_k(x).

    Hidden units are concatenated, so the path norm of the result is at most
    sum_k |w_k| pn(net_k), with equality for scalar outputs.
    """
    nets = list(nets)
    if weights is None:
        weights = np.ones(len(nets))
    if any(len(n.blocks) != 1 for n in nets):
        raise DomainError("parallel_sum expects shallow networks")
    W = np.vstack([n.blocks[0].W for n in nets])
    b = np.concatenate([n.blocks[0].b for n in nets])
    A = np.hstack([w * n.blocks[0].A for w, n in zip(weights, nets)])
    c = sum(w * n.blocks[0].c for w, n in zip(weights, nets))
    return ReluNet([Block(W, b, A, c)])


def stack(nets):
    """Run networks side by side on separate input slices; outputs are concatenated.

    All networks must have the same number of blocks. The input of the
    result is the concatenation of the individual inputs.
    """
    nets = list(nets)
    nb = len(nets[0].blocks)
    if any(len(n.blocks) != nb for n in nets):
        raise DomainError("stack expects networks with equal block counts")
    from scipy.linalg import block_diag

    blocks = []
    for k in range(nb):
        parts = [n.blocks[k] for n in nets]
        blocks.append(Block(
            block_diag(*[p.W for p in parts]),
            np.concatenate([p.b for p in parts]),
            block_diag(*[p.A for p in parts]),
            np.concatenate([p.c for p in parts]),
        ))
    return ReluNet(blocks)


def parallel(nets):
    """Networks with a shared input run side by side; outputs are concatenated.

    Equal block counts are required (pad with ``passthrough`` compositions).
    """
    nets = list(nets)
    joined = stack(nets)
    first = joined.blocks[0]
    W = np.vstack([n.blocks[0].W for n in nets])
    return ReluNet((Block(W, first.b, first.A, first.c),) + joined.blocks[1:])


def pl_interpolant(knots, values):
    """Shallow 1D network equal to the piecewise-linear interpolant on [knots[0], knots[-1]].

    Outside the knot range the network is constant on the left and linear on the right.
    """
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
        raise DomainError("knots must be a strictly increasing 1D array of length >= 2")
    slopes = np.diff(values) / np.diff(knots)
    jumps = np.diff(np.concatenate([[0.0], slopes]))
    W = np.ones((knots.size - 1, 1))
    return ReluNet.shallow(W, -knots[:-1], jumps[None, :], [values[0]])


def fanout(dim, copies):
    """Linear map R^dim -> R^(dim*copies) duplicating the input, as an identity block."""
    eye = np.eye(dim)
    W = np.vstack([eye, -eye])
    A = np.tile(np.hstack([eye, -eye]), (copies, 1))
    return ReluNet([Block(W, np.zeros(2 * dim), A, np.zeros(dim * copies))])


def passthrough(dim, n_blocks):
    """Identity network with ``n_blocks`` blocks (used to align depths in ``stack``)."""
    return ReluNet(ReluNet.identity(dim).blocks * n_blocks)


# merged-layer utilities shared by training and complexity estimation

def mlp_forward(layers, x):
    """Forward pass over a merged affine stack; returns output and cached activations."""
    acts = [x]
    pre = []
    h = x
    for k, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if k < len(layers) - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(layers, cache, grad_out):
    """Gradients of sum(grad_out * output) w.r.t. every (W, b) in the stack.

    ReLU derivative at 0 is taken as 0.
    """
    acts, pre = cache
    grads = [None] * len(layers)
    g = grad_out
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads[k] = (g.T @ acts[k], g.sum(axis=0))
        if k > 0:
            g = (g @ W) * (pre[k - 1] > 0)
    return grads


# serialization

_MAGIC = "relunet"
_VERSION = 1


def to_text(net):
    """Serialize to the versioned text format described in docs/formats.md."""
    lines = [f"{_MAGIC} {_VERSION}", f"layers {2 * len(net.blocks)}",
             f"path_norm {float(net.path_norm()).hex()}"]
    for k, blk in enumerate(net.blocks):
        for kind, W, b in (("relu", blk.W, blk.b), ("linear", blk.A, blk.c)):
            idx = 2 * k + (kind == "linear")
            lines.append(f"layer {idx} {kind} {W.shape[0]} {W.shape[1]}")
            for row in W:
                lines.append(" ".join(float(v).hex() for v in row))
            lines.append("bias " + " ".join(float(v).hex() for v in b))
    return "\n".join(lines) + "\n"


def from_text(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != _MAGIC or int(head[1]) != _VERSION:
        raise DomainError(f"unsupported network format header: {lines[0]!r}")
    n_layers = int(lines[1].split()[1])
    recorded = float.fromhex(lines[2].split()[1])
    pos = 3
    mats = []
    for _ in range(n_layers):
        _, _, _, rows, cols = lines[pos].split()
        rows, cols = int(rows), int(cols)
        pos += 1
        W = np.array([[float.fromhex(v) for v in lines[pos + r].split()] for r in range(rows)])
        W = W.reshape(rows, cols)
        pos += rows
        b = np.array([float.fromhex(v) for v in lines[pos].split()[1:]])
        pos += 1
        mats.append((W, b))
    blocks = [Block(mats[i][0], mats[i][1], mats[i + 1][0], mats[i + 1][1])
              for i in range(0, n_layers, 2)]
    net = ReluNet(blocks)
    if net.path_norm() != recorded:
        raise DomainError("recorded path norm does not match the stored weights",
                          recorded=recorded, recomputed=net.path_norm())
    return net


def save(net, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(to_text(net))


def load(path):
    with open(path, encoding="ascii") as fh:
        return from_text(fh.read())


def input_gradient(net, x):
    """Gradient of a scalar-output network w.r.t. its input (ReLU'(0) = 0)."""
    if net.out_dim != 1:
        raise DomainError("input_gradient needs a scalar-output network")
    x2, single = _as_2d(x, net.in_dim)
    layers = net.layers
    _, (_, pre) = mlp_forward(layers, x2)
    g = np.broadcast_to(layers[-1][0], (x2.shape[0], layers[-1][0].shape[1]))
    for k in range(len(layers) - 2, -1, -1):
        g = (g * (pre[k] > 0)) @ layers[k][0]
    return g[0] if single else g
