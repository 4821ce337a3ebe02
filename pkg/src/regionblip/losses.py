"""Pre-training objectives and their weighted combination.

total = itc + itg + itm + llm + lambda * reg
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import BOS, EOS, PAD


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    itc: float
    itg: float
    itm: float
    llm: float
    reg: float | None
    lam: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {"itc": self.itc, "itg": self.itg, "itm": self.itm, "llm": self.llm,
                "reg": self.reg, "total": self.total}


def _sim(query_feats, text_feats, temperature):
    """[B, B] similarity: max over queries of normalized dot products / temperature."""
    q = ag.l2_normalize(query_feats, axis=-1)  # [B, nq, d]
    t = ag.l2_normalize(text_feats, axis=-1)  # [B, d]
    # s[i, k, j] = q[i, k] . t[j]
    s = ag.matmul(q, ag.transpose(t, (1, 0)))
    s = ag.max(s, axis=1)
    if not isinstance(temperature, Tensor):
        temperature = Tensor(np.asarray(temperature))
    return s / temperature


def itc_loss(query_feats, text_feats, temperature=0.07):
    """Symmetric InfoNCE over in-batch pairs.

    ``query_feats`` [B, nq, d] (a [B, d] input is treated as one query);
    both sides are L2-normalized here.
    """
    if query_feats.ndim == 2:
        query_feats = ag.reshape(query_feats, (query_feats.shape[0], 1, query_feats.shape[1]))
    B = query_feats.shape[0]
    if B < 2:
        raise LossError("itc_loss needs a batch of at least 2")
    if text_feats.shape[0] != B:
        raise LossError(f"itc_loss: {B} query rows vs {text_feats.shape[0]} text rows")
    sim = _sim(query_feats, text_feats, temperature)
    labels = np.arange(B)
    i2t = ag.cross_entropy(sim, labels)
    t2i = ag.cross_entropy(ag.transpose(sim, (1, 0)), labels)
    return (i2t + t2i) * 0.5


def itm_loss(logits, labels):
    """Two-way match/mismatch cross-entropy; ``labels`` 1 = matched pair."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise LossError("itm_loss needs both positive and negative pairs in the batch")
    return ag.cross_entropy(logits, labels)


def itg_loss(qformer, queries, feats, text_ids, loras=None):
    """Next-token loss of the Q-Former text stream under multimodal-causal masking.

    ``text_ids`` are framed rows (BOS ... EOS, PAD-filled); every row needs
    at least one content token.
    """
    text_ids = np.asarray(text_ids)
    content = (text_ids != PAD) & (text_ids != BOS) & (text_ids != EOS)
    if text_ids.ndim != 2 or not content.any(axis=1).all():
        raise LossError("itg_loss: every caption needs at least one token")
    _, tg = qformer(queries, feats, text_ids, mode="mm_causal", loras=loras)
    nxt = text_ids[:, 1:]
    return ag.cross_entropy(qformer.text_logits(tg[:, :-1]), nxt, (nxt != PAD).astype(np.float64))


def reg_loss(p, p_star):
    """Mean absolute error between predicted and target normalized coordinates."""
    p_star = p_star if isinstance(p_star, Tensor) else Tensor(np.asarray(p_star))
    if p.shape != p_star.shape:
        raise LossError(f"reg_loss: prediction {p.shape} vs target {p_star.shape}")
    return ag.mean(ag.abs(p - p_star))


def combined_loss(parts, lam=1.0):
    """Weighted total of the five terms; ``reg`` may be None (non-region modality)."""
    values = {}
    for name in ("itc", "itg", "itm", "llm", "reg"):
        v = parts.get(name)
        if v is None:
            if name != "reg":
                raise LossError(f"missing loss component {name!r}")
            values[name] = None
            continue
        f = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(f):
            raise LossError(f"loss component {name!r} is not finite ({f})")
        values[name] = f
    terms = [parts[n] for n in ("itc", "itg", "itm", "llm")]
    if values["reg"] is not None and lam != 0:
        terms.append(parts["reg"] * lam)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total_f = float(total.data) if isinstance(total, Tensor) else float(total)
    return LossReport(values["itc"], values["itg"], values["itm"], values["llm"], values["reg"],
                      float(lam), total_f, total if isinstance(total, Tensor) else None)
