"""Parameterized layers built on :mod:`regionblip.autograd`.

Modules hold their parameters as :class:`Tensor` attributes; a parameter
is frozen when ``requires_grad`` is false. Parameter names follow the
attribute path, e.g. ``qformer.layers.0.self_attn.q.weight``.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """A layer or adapter was configured with inconsistent settings."""


class Module:
    """Minimal parameter container.

    Parameters are Tensor attributes; children are Module attributes or
    lists/dicts of Modules. Iteration order is attribute insertion order,
    so names and checkpoint layout are deterministic.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return dict(self.named_parameters(prefix))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _walk(value, path):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def checksum(params):
    """SHA-256 over names and raw bytes of an iterable of (name, Tensor)."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


def param(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


class Linear(Module):
    """Affine map ``x @ W.T + b`` with ``W`` of shape [out, in]."""

    def __init__(self, in_dim, out_dim, rng, bias=True, std=None, name=""):
        std = (1.0 / np.sqrt(in_dim)) if std is None else std
        self.weight = param(rng.normal(0.0, std, size=(out_dim, in_dim)))
        self.bias = param(np.zeros(out_dim)) if bias else None
        self._name = name

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def frozen(self):
        return not self.weight.requires_grad

    def __call__(self, x, loras=None):
        lora = loras.get(self._name) if loras else None
        if lora is not None:
            return lora_forward(x, self, lora)
        return ag.linear(x, self.weight, self.bias)


class LoraAdapter(Module):
    """Trainable low-rank update ``(alpha / r) * B @ A`` for one frozen Linear.

    ``A`` starts at N(0, 0.02) and ``B`` at zero, so a fresh adapter leaves
    the wrapped layer's output unchanged.
    """

    def __init__(self, base, rank=8, alpha=16.0, rng=None, target_id=None):
        if rank < 1 or rank >= min(base.in_dim, base.out_dim):
            raise ConfigError(
                f"LoRA rank {rank} must satisfy 1 <= r < min(in, out) = {min(base.in_dim, base.out_dim)}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.A = param(rng.normal(0.0, 0.02, size=(rank, base.in_dim)))
        self.B = param(np.zeros((base.out_dim, rank)))
        self._rank = rank
        self._alpha = float(alpha)
        self._target_id = base._name if target_id is None else target_id
        self._shape = (base.out_dim, base.in_dim)

    @property
    def rank(self):
        return self._rank

    @property
    def alpha(self):
        return self._alpha

    @property
    def target_id(self):
        return self._target_id

    @property
    def scale(self):
        return self._alpha / self._rank

    def delta(self):
        """Dense weight update as a numpy array."""
        return self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))


def _check_target(base, adapter):
    if adapter.target_id != base._name or adapter._shape != (base.out_dim, base.in_dim):
        raise ConfigError(f"adapter for {adapter.target_id!r} {adapter._shape} does not fit "
                          f"layer {base._name!r} {(base.out_dim, base.in_dim)}")


def lora_forward(x, base, adapter):
    """``base(x) + (alpha/r) * B (A x)``; gradients reach only ``A`` and ``B``."""
    _check_target(base, adapter)
    out = ag.linear(x, base.weight, base.bias)
    low = ag.linear(ag.linear(x, adapter.A), adapter.B)
    return out + low * adapter.scale


def lora_merge(base, adapter):
    """Fold the adapter into a new frozen Linear with ``W' = W + (alpha/r) B A``."""
    _check_target(base, adapter)
    merged = Linear.__new__(Linear)
    w = base.weight.data
    delta = adapter.delta()
    merged.weight = param(w if not delta.any() else (w + delta).astype(w.dtype), requires_grad=False)
    merged.bias = None if base.bias is None else param(base.bias.data.copy(), requires_grad=False)
    merged._name = base._name
    return merged


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias, self._eps)


class Embedding(Module):
    def __init__(self, num, dim, rng, std=0.02):
        self.weight = param(rng.normal(0.0, std, size=(num, dim)))

    def __call__(self, ids):
        return ag.embedding(self.weight, ids)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, name=""):
        self.fc1 = Linear(dim, hidden, rng, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, dim, rng, name=f"{name}.fc2")

    def __call__(self, x, loras=None):
        return self.fc2(ag.gelu(self.fc1(x, loras)), loras)


# -- attention -----------------------------------------------------------------

NEG_INF = -1e9


def causal_mask(n):
    """Boolean [n, n] mask, True where attention is allowed."""
    return np.tril(np.ones((n, n), dtype=bool))


def prefix_mask(n, k):
    """Bidirectional among the first ``k`` positions, causal afterwards."""
    m = causal_mask(n)
    m[:k, :k] = True
    return m


def build_mask(mode, n, k=0):
    if mode == "bidirectional":
        return np.ones((n, n), dtype=bool)
    if mode == "causal":
        return causal_mask(n)
    if mode == "prefix":
        return prefix_mask(n, k)
    raise ConfigError(f"unknown mask mode {mode!r}")


class MultiHeadAttention(Module):
    """Multi-head attention over [B, T, d] inputs.

    ``kv_dim`` lets keys/values come from a different width (cross-attention).
    Masks are boolean, True = attend, broadcastable to [B, heads, Tq, Tk].
    """

    def __init__(self, dim, heads, rng, kv_dim=None, name=""):
        if dim % heads:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = Linear(dim, dim, rng, name=f"{name}.q")
        self.k = Linear(kv_dim, dim, rng, name=f"{name}.k")
        self.v = Linear(kv_dim, dim, rng, name=f"{name}.v")
        self.o = Linear(dim, dim, rng, name=f"{name}.o")
        self._heads = heads

    @property
    def heads(self):
        return self._heads

    def _split(self, x):
        B, T, d = x.shape
        return ag.transpose(ag.reshape(x, (B, T, self._heads, d // self._heads)), (0, 2, 1, 3))

    def attention_weights(self, queries, keys, mask=None, loras=None):
        q = self._split(self.q(queries, loras))
        k = self._split(self.k(keys, loras))
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
        if mask is not None:
            scores = ag.masked_fill(scores, ~np.asarray(mask, dtype=bool), NEG_INF)
        return ag.softmax(scores, axis=-1)

    def __call__(self, queries, keys, values=None, mask=None, loras=None):
        values = keys if values is None else values
        if keys.shape[1] != values.shape[1]:
            raise ag.ShapeError(f"attention: key length {keys.shape[1]} != value length {values.shape[1]}")
        if queries.ndim != 3 or keys.ndim != 3:
            raise ag.ShapeError("attention: inputs must be [batch, tokens, dim]")
        attn = self.attention_weights(queries, keys, mask, loras)
        v = self._split(self.v(values, loras))
        out = ag.matmul(attn, v)
        B, H, T, dh = out.shape
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (B, T, H * dh))
        return self.o(out, loras)


def attention_forward(block, queries_in, keys_in, values_in=None, mask_mode="bidirectional", prefix=0, loras=None):
    """Run ``block`` with a named mask mode (causal / bidirectional / prefix)."""
    mask = None
    if mask_mode != "bidirectional":
        if queries_in.shape[1] != keys_in.shape[1]:
            raise ag.ShapeError(f"{mask_mode} mask needs equal query/key lengths")
        mask = build_mask(mask_mode, queries_in.shape[1], prefix)
    return block(queries_in, keys_in, values_in, mask=mask, loras=loras)
