"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output eagerly and, when any input
requires a gradient, records a closure mapping the output gradient to the
input gradients. :func:`backward` sorts the recorded graph topologically
and runs the closures in reverse.

Storage is float32 by default. Reductions accumulate in float64. Use
:func:`precision` to run a block in float64 (gradient checks do this).

Broadcasting follows numpy's trailing-dimension alignment; gradients of
broadcast inputs are summed back to the input shape.
"""
from __future__ import annotations

import builtins
import contextlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are stored in."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Wrap an op result and record it when some parent needs a gradient."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _check_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < builtins.max(ndim, 1):
            raise ShapeError(f"{op}: axis {ax} out of range for tensor of rank {ndim}")
    return tuple(ax % builtins.max(ndim, 1) for ax in axes)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow(a, exponent):
    """Raise to a constant scalar power."""
    if isinstance(exponent, Tensor):
        raise TypeError("pow: exponent must be a Python/numpy scalar")
    e = float(exponent)
    return _make(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where clamped."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by ``value`` (mask broadcasts)."""
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(a.shape, mask.shape, "masked_fill")
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    keep = ~mask
    return _make(out, (a,), lambda g: (_unbroadcast(g * keep, a.shape),))


# -- reductions ------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):
    axes = _check_axis(axis, a.ndim, "sum")
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _check_axis(axis, a.ndim, "mean")
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.data.dtype)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, (a,), bw)


def max(a, axis=None, keepdims=False):
    """Maximum along one axis (or all); ties send the gradient to the first max."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def bw_all(g):
            grad = np.zeros(a.size, dtype=np.result_type(g, a.data))
            grad[idx] = np.asarray(g).reshape(-1)[0]
            return (grad.reshape(a.shape),)

        return _make(out, (a,), bw_all)
    if not isinstance(axis, int):
        raise ShapeError("max: only a single axis is supported")
    (ax,) = _check_axis(axis, a.ndim, "max")
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros(a.shape, dtype=np.result_type(g, a.data))
        np.put_along_axis(grad, idx, g, axis=ax)
        return (grad,)

    return _make(out, (a,), bw)


# -- shape ops -------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1, ax2):
    perm = list(range(a.ndim))
    perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
    return transpose(a, perm)


def broadcast_to(a, shape):
    shape = tuple(shape)
    _broadcast_shape(a.shape, shape, "broadcast_to")
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    (ax,) = _check_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def getitem(a, index):
    """Slicing / integer-array indexing."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def bw(g):
        grad = np.zeros(a.shape, dtype=np.result_type(g, a.data))
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out), (a,), bw)


def embedding(weight, ids):
    """Gather rows of ``weight`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range [0, {weight.shape[0]})")

    def bw(g):
        grad = np.zeros(weight.shape, dtype=np.result_type(g, weight.data))
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _make(weight.data[ids], (weight,), bw)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` of shape [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0, dtype=np.float64) if bias.requires_grad else None

    return _make(out, parents, bw)


# -- fused nn ops ----------------------------------------------------------------

def softmax(a, axis=-1):
    (ax,) = _check_axis(axis, a.ndim, "softmax")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=ax, keepdims=True, dtype=np.float64).astype(e.dtype)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    (ax,) = _check_axis(axis, a.ndim, "log_softmax")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=ax, keepdims=True, dtype=np.float64)).astype(z.dtype)
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=ax, keepdims=True),)

    return _make(out, (a,), bw)


def cross_entropy(logits, targets, weights=None):
    """Mean token cross-entropy.

    ``logits`` is [..., V], ``targets`` integer [...]. ``weights`` (same
    shape as ``targets``) masks or reweights positions; the mean divides by
    the weight total.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ShapeError("cross_entropy: target id out of range")
    w = np.ones(t.shape, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, dtype=np.float64))
    nll = lse - z[np.arange(len(t)), t]
    loss = np.asarray(np.dot(w, nll) / total, dtype=flat.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None].astype(z.dtype))
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / total)[:, None].astype(p.dtype)
        return ((p * g).reshape(logits.shape),)

    return _make(loss, (logits,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gx_hat = g * gain.data
            n = x.shape[-1]
            gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx,
                _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None,
                _unbroadcast(g, bias.shape) if bias.requires_grad else None)

    return _make(out, (x, gain, bias), bw)


def l2_normalize(a, axis=-1, eps=1e-12):
    norm = sqrt(sum(a * a, axis=axis, keepdims=True) + eps)
    return a / norm


# -- backward --------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded nodes in topological order and the gradients backward produced."""

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)


def _topo_order(root):
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


def backward(root, retain_graph=False):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the :class:`Tape` with nodes in topological order and the
    gradient of every requires-grad node keyed by ``node_id``.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return Tape(nodes=[root], gradients={})
    order = _topo_order(root)
    grads = {id(root): np.ones((), dtype=root.data.dtype)}
    tape = Tape(nodes=order)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        tape.gradients[node.node_id] = g
        if node._backward is None:
            node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = np.broadcast_to(pg, parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
    return tape


# -- gradient check -------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def max_error(self):
        return builtins.max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tol for e in self.errors.values())


def grad_check(f, params, h=1e-3, tol=1e-3, max_entries=None, seed=0):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``params`` is a dict name -> Tensor (or a list). The check runs in
    float64: parameter storage is upcast for its duration and restored.
    ``max_entries`` limits the coordinates probed per parameter (chosen at
    random with ``seed``). Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``; the report keeps the max per param.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    saved = {k: p.data for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    try:
        with precision(np.float64):
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.grad = None

            def value():
                out = f()
                v = float(out.data)
                if not math.isfinite(v):
                    raise FloatingPointError("grad_check: loss is not finite")
                return out, v

            out, _ = value()
            backward(out)
            for name, p in params.items():
                analytic = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                worst = 0.0
                with no_grad():
                    for i in idx:
                        orig = flat[i]
                        flat[i] = orig + h
                        fp = value()[1]
                        flat[i] = orig - h
                        fm = value()[1]
                        flat[i] = orig
                        num = (fp - fm) / (2 * h)
                        a = analytic.reshape(-1)[i]
                        err = builtins.abs(a - num) / builtins.max(1e-8, builtins.abs(a) + builtins.abs(num))
                        worst = builtins.max(worst, err)
                errors[name] = worst
    finally:
        for k, p in params.items():
            p.data = saved[k]
            p.grad = None
    return GradCheckReport(errors=errors, tol=tol)
