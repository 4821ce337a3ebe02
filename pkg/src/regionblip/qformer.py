"""Learnable-query transformer with per-modality LoRA and region-position
embeddings (PaFE).

The base :class:`QFormer` is shared and frozen once pre-trained. Every
modality owns a :class:`ModalityAdapterSet`: its own query table, LoRA
adapters on the base attention projections, a projection into the
language model, and, for region modalities, the position MLP and the box
regression head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .nn import (ConfigError, Embedding, FeedForward, LayerNorm, Linear, LoraAdapter, Module,
                 MultiHeadAttention, param)
from .regions import RegionSpec, get_modality

PAD = 0


@dataclass
class QFormerConfig:
    num_queries: int = 8
    layers: int = 4
    dim: int = 64
    heads: int = 4
    enc_dim: int = 64
    itc_dim: int = 32
    vocab_size: int = 30
    max_text_len: int = 24
    ffn_mult: int = 2


class QFormerLayer(Module):
    def __init__(self, cfg, rng, name):
        self.ln1 = LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, name=f"{name}.self_attn")
        self.ln_cross = LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, kv_dim=cfg.enc_dim, name=f"{name}.cross_attn")
        self.ln2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim, rng, name=f"{name}.ffn")


def text_attention_mask(mode, nq, text_ids):
    """Boolean [B, 1, N, N] mask for a joint (queries + text) sequence.

    ``mode``: ``bidirectional`` (everything sees everything), ``mm_causal``
    (queries see queries only; text sees queries and earlier text) or
    ``text`` (text alone, bidirectional). PAD keys are always hidden.
    """
    B, L = text_ids.shape
    n = nq + L
    m = np.ones((n, n), dtype=bool)
    if mode == "mm_causal":
        m[:nq, nq:] = False
        m[nq:, nq:] = np.tril(np.ones((L, L), dtype=bool))
    elif mode not in ("bidirectional", "text"):
        raise ConfigError(f"unknown text mask mode {mode!r}")
    keys = np.concatenate([np.ones((B, nq), dtype=bool), text_ids != PAD], axis=1)
    return (m[None] & keys[:, None, :])[:, None]


class QFormer(Module):
    """Frozen-able query transformer with a BERT-style text stream.

    Queries and text share self-attention; only query positions
    cross-attend to the modal features.
    """

    def __init__(self, cfg, seed=2, name="qformer"):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._name = name
        self.queries = param(rng.normal(0.0, 0.5, size=(cfg.num_queries, cfg.dim)))
        self.word_emb = Embedding(cfg.vocab_size, cfg.dim, rng, std=0.5)
        self.pos_emb = Embedding(cfg.max_text_len, cfg.dim, rng, std=0.1)
        self.emb_ln = LayerNorm(cfg.dim)
        self.layers = [QFormerLayer(cfg, rng, f"{name}.layers.{i}") for i in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.dim)
        self.vision_proj = Linear(cfg.dim, cfg.itc_dim, rng, name=f"{name}.vision_proj")
        self.text_proj = Linear(cfg.dim, cfg.itc_dim, rng, name=f"{name}.text_proj")
        self.itm_head = Linear(cfg.dim, 2, rng, name=f"{name}.itm_head")
        self.temp = param(np.array(0.07))

    @property
    def config(self):
        return self._cfg

    def lora_targets(self, sublayers=("q", "v")):
        """Names of the linears that receive LoRA adapters."""
        out = []
        for i in range(len(self.layers)):
            for block in ("self_attn", "cross_attn"):
                out.extend(f"{self._name}.layers.{i}.{block}.{s}" for s in sublayers)
        return out

    def linear_by_name(self, target):
        prefix = f"{self._name}.layers."
        if not target.startswith(prefix):
            raise ConfigError(f"{target!r} is not a Q-Former layer")
        idx, block, sub = target[len(prefix):].split(".")
        return getattr(getattr(self.layers[int(idx)], block), sub)

    def embed_text(self, text_ids):
        text_ids = np.asarray(text_ids)
        if text_ids.shape[1] > self._cfg.max_text_len:
            raise ag.ShapeError(f"text length {text_ids.shape[1]} exceeds {self._cfg.max_text_len}")
        pos = np.arange(text_ids.shape[1])
        return self.emb_ln(self.word_emb(text_ids) + self.pos_emb(pos))

    def __call__(self, queries=None, feats=None, text_ids=None, mode="bidirectional", loras=None):
        """Returns ``(query_out, text_out)``; either may be None.

        ``queries``: Tensor [B, nq, d]; ``feats``: array/Tensor [B, T, enc_dim];
        ``text_ids``: int array [B, L].
        """
        parts = []
        nq = 0
        if queries is not None:
            parts.append(queries)
            nq = queries.shape[1]
        mask = None
        if text_ids is not None:
            text_ids = np.asarray(text_ids)
            parts.append(self.embed_text(text_ids))
            mask = text_attention_mask("text" if queries is None else mode, nq, text_ids)
        x = parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)
        if feats is not None and not isinstance(feats, ag.Tensor):
            feats = ag.Tensor(feats)
        n = x.shape[1]
        for layer in self.layers:
            h = layer.ln1(x)
            x = x + layer.self_attn(h, h, mask=mask, loras=loras)
            if nq and feats is not None:
                xq = x[:, :nq] if nq < n else x
                xq = xq + layer.cross_attn(layer.ln_cross(xq), feats, loras=loras)
                x = ag.concat([xq, x[:, nq:]], axis=1) if nq < n else xq
            x = x + layer.ffn(layer.ln2(x), loras=loras)
        x = self.ln_f(x)
        if nq and nq < n:
            return x[:, :nq], x[:, nq:]
        if nq:
            return x, None
        return None, x

    def text_logits(self, text_out):
        return ag.matmul(text_out, ag.transpose(self.word_emb.weight, (1, 0)))

    def temperature(self):
        return ag.clip(self.temp, 0.01, 1.0)


class PaFEModule(Module):
    """Two-layer MLP from the 6-dim padded box to a query-width embedding."""

    def __init__(self, dim, rng, hidden=None, name="pafe"):
        hidden = dim if hidden is None else hidden
        self.fc1 = Linear(6, hidden, rng, std=1.0, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, dim, rng, name=f"{name}.fc2")

    def __call__(self, boxes):
        return self.fc2(ag.gelu(self.fc1(boxes)))

    def zero_(self):
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


def pafe_embed(region, pafe):
    """Embedding [d] of a single region."""
    if not isinstance(region, RegionSpec):
        raise TypeError("pafe_embed expects a RegionSpec")
    return pafe(ag.Tensor(region.padded()[None]))[0]


class ModalityAdapterSet(Module):
    """Everything one modality trains: queries, LoRA, projection, PaFE, regression head."""

    def __init__(self, modality_id, queries, qformer_loras, lm_loras, lm_projection, pafe=None, reg_head=None):
        self._modality = get_modality(modality_id)
        self.queries = queries
        self.qformer_loras = qformer_loras
        self.lm_loras = lm_loras
        self.lm_projection = lm_projection
        self.pafe = pafe
        self.reg_head = reg_head

    @property
    def modality_id(self):
        return self._modality.id

    @property
    def modality(self):
        return self._modality

    @property
    def loras(self):
        return {**self.qformer_loras, **self.lm_loras}


def make_adapter_set(modality_id, qformer, lm, base_projection, rank=8, alpha=16.0, seed=0,
                     use_pafe=True, lora_sublayers=("q", "v")):
    """Fresh adapter set: queries and projection copied from the base, B = 0."""
    mod = get_modality(modality_id)
    rng = np.random.default_rng([seed, sum(map(ord, modality_id))])
    q_loras = {t: LoraAdapter(qformer.linear_by_name(t), rank, alpha, rng) for t in qformer.lora_targets(lora_sublayers)}
    lm_loras = {t: LoraAdapter(lm.linear_by_name(t), rank, alpha, rng) for t in lm.lora_targets(lora_sublayers)}
    proj = Linear(base_projection.in_dim, base_projection.out_dim, rng, name=f"adapters.{modality_id}.lm_projection")
    proj.weight.data = base_projection.weight.data.copy()
    proj.bias.data = base_projection.bias.data.copy()
    pafe = reg_head = None
    if mod.is_region:
        d = qformer.config.dim
        if use_pafe:
            pafe = PaFEModule(d, rng, name=f"adapters.{modality_id}.pafe")
        reg_head = Linear(d, 4 if mod.region_kind == "box2d" else 6, rng, name=f"adapters.{modality_id}.reg_head")
    return ModalityAdapterSet(modality_id, param(qformer.queries.data.copy()), q_loras, lm_loras, proj, pafe, reg_head)


def query_inputs(adapters, qformer, batch_size, regions=None):
    """Learnable queries for a batch, plus the PaFE embedding when regions are given."""
    base = qformer.queries if adapters is None else adapters.queries
    q = ag.broadcast_to(ag.reshape(base, (1,) + base.shape), (batch_size,) + base.shape)
    if regions is None:
        return q
    if adapters is None or not adapters.modality.is_region:
        name = "base" if adapters is None else adapters.modality_id
        raise ConfigError(f"region given for non-region modality {name!r}")
    if adapters.pafe is None:
        return q  # PaFE ablation: position is not injected
    boxes = np.stack([r.padded() for r in regions])
    pos = adapters.pafe(ag.Tensor(boxes))
    return q + ag.reshape(pos, (batch_size, 1, pos.shape[-1]))


def check_loras(adapters, targets):
    missing = [t for t in targets if t not in adapters.loras]
    if missing:
        raise ConfigError(f"modality {adapters.modality_id!r} lacks adapters for {missing[:3]}")


def qformer_forward(qformer, adapters, feats, regions=None, text_ids=None, mode="bidirectional"):
    """Query (and optionally text) outputs for one modality's batch."""
    feats = np.asarray(feats.data if isinstance(feats, ag.Tensor) else feats)
    if feats.ndim == 2:
        feats = feats[None]
    if regions is not None and isinstance(regions, RegionSpec):
        regions = [regions]
    loras = None
    if adapters is not None:
        check_loras(adapters, qformer.lora_targets(_sublayers(adapters)))
        loras = adapters.qformer_loras
    q = query_inputs(adapters, qformer, feats.shape[0], regions)
    return qformer(q, feats, text_ids, mode=mode, loras=loras)


def _sublayers(adapters):
    subs = {t.rsplit(".", 1)[1] for t in adapters.qformer_loras}
    return tuple(sorted(subs)) or ("q", "v")


def predict_region(adapters, query_out):
    """Mean-pooled queries -> regression head -> sigmoid; [B, 4] or [B, 6]."""
    if adapters is None or adapters.reg_head is None:
        raise ConfigError("predict_region needs a region modality with a regression head")
    pooled = ag.mean(query_out, axis=-2)
    return ag.sigmoid(adapters.reg_head(pooled))
