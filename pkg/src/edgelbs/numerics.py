"""Dense float64 linear algebra, activations, sparsemax, and a small
reverse-mode gradient tape.

Everything downstream (NPE, POE, pretraining) trains through the tape in
this module, so its gradients are checked against central finite
differences in the test suite.  Arrays are plain float64 numpy arrays;
the tape wraps them in :class:`Node` objects.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "softmax_rows",
    "sparsemax",
    "relu",
    "sigmoid",
    "dropout_mask",
    "glorot_uniform",
    "Node",
    "param",
    "constant",
    "grad",
    "GradientContractError",
    "SgdMomentum",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]


# ---------------------------------------------------------------------------
# plain-array primitives
# ---------------------------------------------------------------------------

def softmax_rows(m):
    """Row-wise softmax with max-subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sparsemax(z):
    """Euclidean projection of a vector onto the probability simplex.

    Sort-based O(n log n) threshold algorithm.  Output is non-negative,
    sums to 1, and may have exact zeros.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("sparsemax expects a non-empty 1-D vector")
    n = z.size
    srt = np.sort(z)[::-1]
    cssv = np.cumsum(srt)
    ks = np.arange(1, n + 1)
    support = srt - (cssv - 1.0) / ks > 0
    k = int(ks[support][-1])
    tau = (cssv[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: zeros with probability ``rate``, survivors
    scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def glorot_uniform(rng, shape):
    """Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 1:
        fan_in, fan_out = shape[0], shape[0]
    else:
        fan_in, fan_out = shape[0], shape[1]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------

class GradientContractError(TypeError):
    """Raised when grad() is asked about something the tape never recorded."""


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "parents", "backward", "grad")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward = backward
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_node(other)
        out = Node(self.value + other.value, (self, other))
        out.backward = lambda g: (
            _unbroadcast(g, self.value.shape),
            _unbroadcast(g, other.value.shape),
        )
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Node(-self.value, (self,))
        out.backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-_as_node(other))

    def __rsub__(self, other):
        return _as_node(other) + (-self)

    def __mul__(self, other):
        other = _as_node(other)
        out = Node(self.value * other.value, (self, other))
        out.backward = lambda g: (
            _unbroadcast(g * other.value, self.value.shape),
            _unbroadcast(g * self.value, other.value.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_node(other)
        out = Node(self.value / other.value, (self, other))
        out.backward = lambda g: (
            _unbroadcast(g / other.value, self.value.shape),
            _unbroadcast(-g * self.value / other.value**2, other.value.shape),
        )
        return out

    def __rtruediv__(self, other):
        return _as_node(other) / self

    def __matmul__(self, other):
        return matmul(self, other)


def _as_node(x):
    return x if isinstance(x, Node) else Node(x)


def param(value):
    """Leaf node holding a trainable array."""
    return Node(np.array(value, dtype=np.float64))


def constant(value):
    """Leaf node that receives no gradient of interest (still a leaf)."""
    return Node(value)


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    out = Node(av @ bv, (a, b))

    def backward(g):
        if av.ndim == 1 and bv.ndim == 1:      # dot product, g scalar
            return g * bv, g * av
        if av.ndim == 2 and bv.ndim == 1:      # matrix @ vector
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:      # vector @ matrix
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    out.backward = backward
    return out


def transpose(a):
    a = _as_node(a)
    out = Node(a.value.T, (a,))
    out.backward = lambda g: (g.T,)
    return out


def sum_(a, axis=None):
    a = _as_node(a)
    out = Node(a.value.sum(axis=axis), (a,))

    def backward(g):
        if axis is None:
            return (np.full_like(a.value, 1.0) * g,)
        return (np.expand_dims(g, axis) * np.ones_like(a.value),)

    out.backward = backward
    return out


def mean_(a, axis=None):
    a = _as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis) / float(n)


def log_(a):
    a = _as_node(a)
    out = Node(np.log(a.value), (a,))
    out.backward = lambda g: (g / a.value,)
    return out


def exp_(a):
    a = _as_node(a)
    out = Node(np.exp(a.value), (a,))
    out.backward = lambda g: (g * out.value,)
    return out


def sqrt_(a):
    a = _as_node(a)
    out = Node(np.sqrt(a.value), (a,))
    out.backward = lambda g: (g * 0.5 / out.value,)
    return out


def relu_n(a):
    a = _as_node(a)
    out = Node(np.maximum(a.value, 0.0), (a,))
    out.backward = lambda g: (g * (a.value > 0.0),)
    return out


def sigmoid_n(a):
    a = _as_node(a)
    out = Node(sigmoid(a.value), (a,))
    out.backward = lambda g: (g * out.value * (1.0 - out.value),)
    return out


def dropout_n(a, rate, rng, train):
    """Dropout as a recorded op; identity when not training."""
    a = _as_node(a)
    if not train or rate == 0.0:
        out = Node(a.value, (a,))
        out.backward = lambda g: (g,)
        return out
    mask = dropout_mask(a.value.shape, rate, rng)
    out = Node(a.value * mask, (a,))
    out.backward = lambda g: (g * mask,)
    return out


def softmax_rows_n(a):
    a = _as_node(a)
    s = softmax_rows(a.value)
    out = Node(s, (a,))

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    out.backward = backward
    return out


def sparsemax_n(a):
    """Sparsemax of a 1-D vector; backward is uniform-on-support."""
    a = _as_node(a)
    p = sparsemax(a.value)
    support = p > 0.0
    k = support.sum()
    out = Node(p, (a,))

    def backward(g):
        gs = np.where(support, g, 0.0)
        return (np.where(support, gs - gs.sum() / k, 0.0),)

    out.backward = backward
    return out


def concat_cols(a, b):
    a, b = _as_node(a), _as_node(b)
    na = a.value.shape[1]
    out = Node(np.concatenate([a.value, b.value], axis=1), (a, b))
    out.backward = lambda g: (g[:, :na], g[:, na:])
    return out


def gather_rows(table, idx):
    """Rows ``table[idx]``; backward scatter-adds into the table."""
    table = _as_node(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = Node(table.value[idx], (table,))

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        return (gt,)

    out.backward = backward
    return out


def softplus_n(a):
    """log(1 + e^x), computed stably; -softplus(-x) = log(sigmoid(x))."""
    a = _as_node(a)
    v = a.value
    out = Node(np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))), (a,))
    out.backward = lambda g: (g * sigmoid(v),)
    return out


def reshape_n(a, shape):
    a = _as_node(a)
    old = a.value.shape
    out = Node(a.value.reshape(shape), (a,))
    out.backward = lambda g: (g.reshape(old),)
    return out


def stack_scalars(nodes):
    """1-D vector from a list of scalar nodes."""
    nodes = [_as_node(n) for n in nodes]
    out = Node(np.array([n.value for n in nodes]), tuple(nodes))
    out.backward = lambda g: tuple(g[i] for i in range(len(nodes)))
    return out


def norm_(a, eps=0.0):
    """Euclidean norm of a vector node (composed from recorded ops)."""
    return sqrt_(sum_(a * a) + eps)


def grad(loss, params):
    """Reverse-mode gradients of scalar ``loss`` w.r.t. each node in ``params``.

    Raises GradientContractError if the loss did not come through the tape.
    """
    if not isinstance(loss, Node):
        raise GradientContractError(
            f"loss of type {type(loss).__name__} was not recorded on the tape"
        )
    if loss.value.ndim != 0:
        raise GradientContractError(f"loss must be scalar, got shape {loss.value.shape}")

    topo, seen = [], set()

    def visit(node):
        stack = [(node, False)]
        while stack:
            n, done = stack.pop()
            if done:
                topo.append(n)
                continue
            if id(n) in seen:
                continue
            seen.add(id(n))
            stack.append((n, True))
            for p in n.parents:
                stack.append((p, False))

    visit(loss)
    grads = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SgdMomentum:
    """Plain SGD with momentum and manual learning-rate halving.

    Parameters are Node leaves updated in place.  After every step the
    parameters are asserted finite (no NaN/Inf admitted).
    """

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        for p, v, g in zip(self.params, self._vel, grads):
            v *= self.momentum
            v -= self.lr * g
            p.value = p.value + v
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError("non-finite parameter after optimizer step")

    def halve_lr(self):
        self.lr *= 0.5


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write named float64 tensors to an .npz with a format-version tag.

    Layout: one array per name, plus ``__version__`` (scalar int array).
    """
    payload = {name: np.asarray(a) for name, a in tensors.items()}
    payload["__version__"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **payload)


def load_checkpoint(path):
    with np.load(path) as f:
        version = int(f["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {name: f[name] for name in f.files if name != "__version__"}
