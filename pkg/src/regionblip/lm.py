"""Toy decoder language model consuming soft prompts.

The model is pre-trained on the synthetic caption corpus and then frozen;
modalities steer it through their projected query outputs (the soft
prompt) and their own LoRA adapters on the attention projections.

Two masking modes:

* ``causal``: every position sees itself and earlier positions.
* ``prefix``: soft prompt and prefix tokens see each other
  bidirectionally; target tokens are causal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import BOS, EOS, PAD
from .nn import ConfigError, Embedding, FeedForward, LayerNorm, Module, MultiHeadAttention, build_mask


@dataclass
class LMConfig:
    vocab_size: int = 30
    dim: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 48
    ffn_mult: int = 2


class LMLayer(Module):
    def __init__(self, cfg, rng, name):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, name=f"{name}.attn")
        self.ln2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim, rng, name=f"{name}.ffn")


class ToyLM(Module):
    """Pre-LN decoder with an output head tied to the token embedding."""

    def __init__(self, cfg, seed=3, name="lm"):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._name = name
        self.tok_emb = Embedding(cfg.vocab_size, cfg.dim, rng, std=0.3)
        self.pos_emb = Embedding(cfg.max_len, cfg.dim, rng, std=0.1)
        self.layers = [LMLayer(cfg, rng, f"{name}.layers.{i}") for i in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.dim)

    @property
    def config(self):
        return self._cfg

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.parameters())

    def lora_targets(self, sublayers=("q", "v")):
        return [f"{self._name}.layers.{i}.attn.{s}" for i in range(len(self.layers)) for s in sublayers]

    def linear_by_name(self, target):
        prefix = f"{self._name}.layers."
        if not target.startswith(prefix):
            raise ConfigError(f"{target!r} is not an LM layer")
        idx, block, sub = target[len(prefix):].split(".")
        return getattr(getattr(self.layers[int(idx)], block), sub)

    def __call__(self, token_ids, soft_prompt=None, mode="causal", n_bidir=0, loras=None):
        """Logits [B, P + L, V]. ``n_bidir`` counts leading bidirectional positions in prefix mode."""
        token_ids = np.asarray(token_ids)
        x = self.tok_emb(token_ids)
        if soft_prompt is not None:
            x = ag.concat([soft_prompt, x], axis=1)
        B, n, _ = x.shape
        if n > self._cfg.max_len:
            raise ag.ShapeError(f"sequence length {n} exceeds max_len {self._cfg.max_len}")
        x = x + self.pos_emb(np.arange(n))
        m = build_mask("prefix" if mode == "prefix" else "causal", n, n_bidir)
        P = n - token_ids.shape[1]
        keys = np.concatenate([np.ones((B, P), dtype=bool), token_ids != PAD], axis=1)
        mask = (m[None] & keys[:, None, :])
        mask |= np.eye(n, dtype=bool)[None]  # a PAD position may still see itself
        mask = mask[:, None]
        for layer in self.layers:
            h = layer.ln1(x)
            x = x + layer.attn(h, h, mask=mask, loras=loras)
            x = x + layer.ffn(layer.ln2(x), loras=loras)
        x = self.ln_f(x)
        return ag.matmul(x, ag.transpose(self.tok_emb.weight, (1, 0)))


@dataclass
class PromptedSequence:
    soft_prompt: object  # Tensor [P, d_lm] (or None)
    prefix_tokens: list
    target_tokens: list


def build_lm_batch(prefix_tokens, targets):
    """Token ids [BOS, prefix..., target..., EOS] padded, plus loss weights.

    Weights mark the positions whose next-token prediction is a target or
    the final EOS.
    """
    lead = [BOS] + list(prefix_tokens)
    rows = [lead + list(t) + [EOS] for t in targets]
    L = max(len(r) for r in rows)
    ids = np.full((len(rows), L), PAD, dtype=np.int64)
    nxt = np.full((len(rows), L), PAD, dtype=np.int64)
    w = np.zeros((len(rows), L), dtype=np.float64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        nxt[i, :len(r) - 1] = r[1:]
        w[i, len(lead) - 1:len(r) - 1] = 1.0
    return ids, nxt, w, len(lead)


def lm_loss_batch(lm, soft_prompt, prefix_tokens, targets, mode="prefix", loras=None):
    """Mean cross-entropy over target tokens (+EOS) for a batch sharing one prefix."""
    if any(len(t) == 0 for t in targets):
        raise ValueError("lm_loss: empty target sequence")
    ids, nxt, w, n_lead = build_lm_batch(prefix_tokens, targets)
    P = 0 if soft_prompt is None else soft_prompt.shape[1]
    logits = lm(ids, soft_prompt, mode=mode, n_bidir=P + n_lead, loras=loras)
    return ag.cross_entropy(logits[:, P:], nxt, w)


def lm_loss(lm, adapters, seq, mode="prefix"):
    """Loss for a single :class:`PromptedSequence` (soft prompt already projected)."""
    sp = seq.soft_prompt
    if sp is not None:
        sp = ag.reshape(sp, (1,) + sp.shape) if sp.ndim == 2 else sp
    loras = None if adapters is None else adapters.lm_loras
    return lm_loss_batch(lm, sp, seq.prefix_tokens, [seq.target_tokens], mode, loras)


def greedy_decode(lm, adapters, soft_prompt, prefix_tokens, max_len, mode="prefix"):
    """Argmax decoding until EOS or ``max_len`` tokens.

    Returns one id list per batch row; a generated EOS is kept as the last id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    loras = None if adapters is None else (adapters if isinstance(adapters, dict) else adapters.lm_loras)
    if soft_prompt is not None and soft_prompt.ndim == 2:
        soft_prompt = ag.reshape(soft_prompt, (1,) + soft_prompt.shape)
    B = 1 if soft_prompt is None else soft_prompt.shape[0]
    P = 0 if soft_prompt is None else soft_prompt.shape[1]
    lead = [BOS] + list(prefix_tokens)
    ids = np.tile(np.array(lead, dtype=np.int64), (B, 1))
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ag.no_grad():
        for _ in range(max_len):
            logits = lm(ids, soft_prompt, mode=mode, n_bidir=P + len(lead), loras=loras)
            nxt = np.argmax(logits.data[:, -1], axis=-1)
            for i in range(B):
                if not done[i]:
                    out[i].append(int(nxt[i]))
                    done[i] = nxt[i] == EOS
            if done.all():
                break
            ids = np.concatenate([ids, np.where(done, PAD, nxt)[:, None]], axis=1)
    return out
