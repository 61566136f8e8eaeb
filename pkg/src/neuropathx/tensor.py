"""A small dense reverse-mode autodiff engine on top of numpy.

Tensors hold float64 arrays of rank 0 to 3. Each differentiable op records
its parents and a backward rule; :func:`backward` walks the recorded graph
in reverse topological order and accumulates gradients into leaves.
Every op checks its output for NaN/Inf and raises :class:`NumericError`
naming the op.
"""

import contextlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, NumericError, ShapeError

MAX_RANK = 3
_FAULTS = set()
_GRAD = {"enabled": True}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > MAX_RANK:
            raise ShapeError(f"tensors are limited to rank {MAX_RANK}, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op {op!r} produced non-finite values")
    needs = _GRAD["enabled"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), back, "mul")


def scale(a, c):
    c = float(c)

    def back(g):
        return (g * c,)

    return _node(a.data * c, (a,), back, "scale")


def matmul(a, b):
    """Matrix product; either operand may carry a leading batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ in {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back, "matmul")


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")

    def back(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(a.data, -1, -2).copy(), (a,), back, "transpose")


def row_sum(a):
    """Sum across columns: one value per row (reduces the last axis)."""

    def back(g):
        return (np.broadcast_to(g[..., None], a.shape).copy(),)

    return _node(a.data.sum(axis=-1), (a,), back, "row_sum")


def col_sum(a):
    """Sum down rows: one value per column (reduces the second-to-last axis)."""
    if a.ndim < 2:
        raise ShapeError(f"col_sum needs rank >= 2, got shape {a.shape}")

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, -2), a.shape).copy(),)

    return _node(a.data.sum(axis=-2), (a,), back, "col_sum")


def total_sum(a):
    def back(g):
        return (np.full(a.shape, float(g)),)

    return _node(np.array(a.data.sum()), (a,), back, "sum")


def flatten(a):
    """Collapse all axes after the first: (n, ...) -> (n, prod(...))."""
    if a.ndim < 2:
        raise ShapeError(f"flatten needs rank >= 2, got shape {a.shape}")
    shape = a.shape

    def back(g):
        return (g.reshape(shape),)

    return _node(a.data.reshape(shape[0], -1), (a,), back, "flatten")


def take(a, index):
    """Select entries along the first axis (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), back, "take")


def absolute(a):
    def back(g):
        return (g * np.sign(a.data),)

    return _node(np.abs(a.data), (a,), back, "abs")


# -- activations ----------------------------------------------------------------


def relu(a):
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    mask = a.data > 0.0

    def back(g):
        if "relu" in _FAULTS:
            return (g,)
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), back, "relu")


def softsign_half(a):
    """x / (0.5 + x) for nonnegative x."""
    if np.any(a.data < 0.0):
        raise DomainError("softsign_half is defined here for nonnegative inputs only")
    den = 0.5 + a.data

    def back(g):
        return (g * 0.5 / (den * den),)

    return _node(a.data / den, (a,), back, "softsign_half")


def attention_activation(a):
    """Fused ``softsign_half(relu(a))`` evaluated by the kernel backend."""
    out, deriv = kernels.attention_activation(a.data)

    def back(g):
        return (g * deriv,)

    return _node(out, (a,), back, "attention_activation")


def sigmoid(x):
    """Plain numpy logistic function (not differentiable through the graph)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- layers ---------------------------------------------------------------------


def linear(x, w, b=None):
    """x @ w (+ b); ``w`` has shape (in, out)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, n_features, momentum=0.1, eps=1e-5):
        return cls(np.zeros(n_features), np.ones(n_features), momentum, eps)


def batchnorm(x, gamma, beta, mode, state):
    """Normalize each feature (last axis) over all other axes.

    In ``train`` mode batch statistics are used and the running statistics
    are updated (unbiased variance); in ``eval`` mode the stored running
    statistics are used unchanged.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    axes = tuple(range(x.ndim - 1))
    eps = state.eps
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv_std

        def back_eval(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back_eval, "batchnorm")

    n = int(np.prod([x.shape[a] for a in axes]))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    m = state.momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    state.running_mean = (1.0 - m) * state.running_mean + m * mean
    state.running_var = (1.0 - m) * state.running_var + m * unbiased

    def back(g):
        dxhat = g * gamma.data
        sum_d = dxhat.sum(axis=axes)
        sum_dx = (dxhat * xhat).sum(axis=axes)
        gx = inv_std / n * (n * dxhat - sum_d - xhat * sum_dx)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back, "batchnorm")


def dropout(x, p, mode, rng):
    """Inverted dropout; identity in eval mode or when p == 0 (no rng draw)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * keep,)

    return _node(x.data * keep, (x,), back, "dropout")


# -- losses ---------------------------------------------------------------------


def bernoulli_kl(a, q, eps):
    """Sum over entries of KL(Ber(q) || Ber(a)), entries clamped to [eps, 1-eps]."""
    total, grad = kernels.bernoulli_kl(a.data, q, eps)

    def back(g):
        return (float(g) * grad,)

    return _node(np.array(total), (a,), back, "bernoulli_kl")


def weighted_bce_with_logits(logits, labels, delta, clip=1e-7):
    """Class-weighted binary cross-entropy summed over subjects.

    ``-sum[delta*y*ln(p) + (1-delta)*(1-y)*ln(1-p)]`` with ``p = sigmoid(z)``
    clipped to ``[clip, 1-clip]``; the clip has zero gradient.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    p_raw = sigmoid(logits.data)
    p = np.clip(p_raw, clip, 1.0 - clip)
    inside = (p_raw >= clip) & (p_raw <= 1.0 - clip)
    wpos = delta * y
    wneg = (1.0 - delta) * (1.0 - y)
    loss = -np.sum(wpos * np.log(p) + wneg * np.log(1.0 - p))

    def back(g):
        dz = -(wpos * (1.0 - p) - wneg * p)
        return (float(g) * np.where(inside, dz, 0.0),)

    return _node(np.array(loss), (logits,), back, "weighted_bce")


# -- graph traversal ------------------------------------------------------------


def topological_order(root):
    """Nodes reachable from ``root``, parents before children, each exactly once."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation passes)."""
    prev = _GRAD["enabled"]
    _GRAD["enabled"] = False
    try:
        yield
    finally:
        _GRAD["enabled"] = prev


@contextlib.contextmanager
def inject_fault(name):
    """Debug hook: swap in a deliberately wrong backward rule (``"relu"``)."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol


def grad_check(f, params, h=1e-5, tol=1e-4):
    """Compare autodiff gradients with central finite differences.

    ``f`` rebuilds the graph and returns a scalar Tensor; ``params`` maps
    names to leaf Tensors whose ``.data`` is perturbed in place. The error
    per parameter is ``max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    for t in params.values():
        t.zero_grad()
    backward(f())
    report = GradCheckReport(tol=tol)
    for name, t in params.items():
        ad = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * h)
        ad = ad.reshape(-1)
        err = np.abs(ad - fd) / np.maximum(1e-8, np.abs(ad) + np.abs(fd))
        report.max_rel_err[name] = float(err.max()) if err.size else 0.0
    return report


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"NPXW"
CHECKPOINT_VERSION = 1


def save_checkpoint(arrays, path):
    """Write named float64 arrays: magic, u32 version, then one record per array.

    Each record is u32 name length, UTF-8 name, u32 rank, u64 dims, and
    little-endian float64 values in C order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out, off = {}, 8
    while off < len(blob):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += 8 * count
    return out
