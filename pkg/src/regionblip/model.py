"""The assembled model: frozen encoders, base Q-Former, base projection,
toy LM, and one adapter set per registered modality."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .data import BOS, EOS, PAD, Tokenizer
from .encoders import ImageEncoder, PointEncoder
from .lm import LMConfig, ToyLM, greedy_decode, lm_loss_batch
from .losses import combined_loss, itc_loss, itg_loss, itm_loss, reg_loss
from .nn import ConfigError, Linear, Module, checksum
from .qformer import QFormer, QFormerConfig, make_adapter_set, predict_region, query_inputs
from .regions import get_modality


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 16
    enc_dim: int = 64
    point_groups: int = 32
    point_neighbors: int = 16
    point_center_features: bool = True
    num_queries: int = 8
    qf_layers: int = 4
    qf_dim: int = 64
    qf_heads: int = 4
    itc_dim: int = 32
    max_text_len: int = 24
    lm_dim: int = 64
    lm_layers: int = 4
    lm_heads: int = 4
    lm_max_len: int = 48
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_sublayers: str = "q,v"
    lm_mode: str = "prefix"
    seed: int = 0
    vocab: list = field(default_factory=lambda: list(Tokenizer().vocab))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def sublayers(self):
        return tuple(s.strip() for s in self.lora_sublayers.split(",") if s.strip())


@dataclass
class ModalBatch:
    """A batch of samples from one modality, already encoded."""

    modality: str
    ids: list
    feats: np.ndarray  # [B, T, enc_dim]
    captions: list
    regions: list | None = None

    def __len__(self):
        return len(self.ids)


class RegionBLIP(Module):
    def __init__(self, cfg=None):
        cfg = cfg or ModelConfig()
        self._cfg = cfg
        self._tok = Tokenizer(cfg.vocab)
        V = len(self._tok)
        s = cfg.seed
        self.image_encoder = ImageEncoder(cfg.image_size, cfg.patch, cfg.enc_dim, seed=s * 100 + 1)
        self.point_encoder = PointEncoder(cfg.point_groups, cfg.point_neighbors, cfg.enc_dim,
                                          center_features=cfg.point_center_features, seed=s * 100 + 2)
        qcfg = QFormerConfig(cfg.num_queries, cfg.qf_layers, cfg.qf_dim, cfg.qf_heads, cfg.enc_dim,
                             cfg.itc_dim, V, cfg.max_text_len)
        self.qformer = QFormer(qcfg, seed=s * 100 + 3)
        rng = np.random.default_rng(s * 100 + 4)
        self.lm_projection = Linear(cfg.qf_dim, cfg.lm_dim, rng, name="lm_projection")
        self.lm = ToyLM(LMConfig(V, cfg.lm_dim, cfg.lm_layers, cfg.lm_heads, cfg.lm_max_len), seed=s * 100 + 5)
        self.adapters = {}
        self._meta = {}

    # -- bookkeeping ------------------------------------------------------------
    @property
    def config(self):
        return self._cfg

    @property
    def tokenizer(self):
        return self._tok

    @property
    def modality_meta(self):
        return dict(self._meta)

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("adapters.")]

    def adapter_parameters(self, modality_id):
        return list(self.adapters[modality_id].named_parameters(f"adapters.{modality_id}."))

    def base_checksum(self):
        return checksum(self.base_parameters())

    def adapter_checksum(self, modality_id):
        return checksum(self.adapter_parameters(modality_id))

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze_base(self):
        for _, p in self.base_parameters():
            p.requires_grad = False
            p.grad = None

    def register_modality(self, modality_id, use_pafe=True):
        """Create a fresh adapter set; base parameters are not touched."""
        if modality_id in self.adapters:
            raise ConfigError(f"modality {modality_id!r} already registered")
        get_modality(modality_id)
        cfg = self._cfg
        aset = make_adapter_set(modality_id, self.qformer, self.lm, self.lm_projection,
                                cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed, use_pafe=use_pafe,
                                lora_sublayers=cfg.sublayers)
        self.adapters[modality_id] = aset
        self._meta[modality_id] = {"use_pafe": bool(use_pafe)}
        return aset

    def get_adapters(self, modality_id):
        if modality_id is None:
            return None
        try:
            return self.adapters[modality_id]
        except KeyError:
            raise ConfigError(f"modality {modality_id!r} is not registered") from None

    # -- encoding ---------------------------------------------------------------
    def encode(self, modality_id, payloads):
        mod = get_modality(modality_id)
        if mod.encoder == "image":
            return self.image_encoder.encode_batch(np.stack([p.pixels for p in payloads]))
        return self.point_encoder.encode_batch(payloads)

    def text_ids(self, captions):
        rows = [self._tok.tokenize(c, frame=True) for c in captions]
        L = max(len(r) for r in rows)
        out = np.full((len(rows), L), PAD, dtype=np.int64)
        for i, r in enumerate(rows):
            out[i, :len(r)] = r
        return out

    # -- forward pieces ------------------------------------------------------------
    def _parts(self, adapters):
        if adapters is None:
            return None, None, self.lm_projection
        return adapters.qformer_loras, adapters.lm_loras, adapters.lm_projection

    def query_outputs(self, batch, adapters):
        qloras, _, _ = self._parts(adapters)
        q = query_inputs(adapters, self.qformer, len(batch), batch.regions)
        qo, _ = self.qformer(q, batch.feats, loras=qloras)
        return qo

    def compute_losses(self, batch, modality_id=None, lam=1.0, lm_mode=None):
        """All applicable objectives for one homogeneous batch, combined.

        ``modality_id=None`` runs the base path (no adapters), used when
        pre-training the base on image-text data.
        """
        return combined_loss(self.loss_terms(batch, modality_id, lm_mode), lam)

    def loss_terms(self, batch, modality_id=None, lm_mode=None):
        """Dict of loss tensors: itc, itm, itg, llm and reg (None off-region)."""
        adapters = self.get_adapters(modality_id)
        if adapters is not None and adapters.modality_id != batch.modality:
            raise ConfigError(f"batch modality {batch.modality!r} != adapters {adapters.modality_id!r}")
        mod = get_modality(batch.modality)
        if batch.regions is not None and not mod.is_region:
            raise ConfigError(f"region given for non-region modality {batch.modality!r}")
        qf = self.qformer
        qloras, lloras, proj = self._parts(adapters)
        B = len(batch)
        text = self.text_ids(batch.captions)
        feats = ag.Tensor(batch.feats)

        q = query_inputs(adapters, qf, B, batch.regions if mod.is_region else None)
        qo, _ = qf(q, feats, loras=qloras)
        _, to = qf(None, None, text, loras=qloras)
        itc = itc_loss(qf.vision_proj(qo), qf.text_proj(to[:, 0]), qf.temperature())

        neg = np.roll(text, 1, axis=0)
        q2 = ag.concat([q, q], axis=0)
        f2 = ag.concat([feats, feats], axis=0)
        qo2, _ = qf(q2, f2, np.concatenate([text, neg]), mode="bidirectional", loras=qloras)
        itm_logits = qf.itm_head(ag.mean(qo2, axis=1))
        itm = itm_loss(itm_logits, np.r_[np.ones(B, dtype=np.int64), np.zeros(B, dtype=np.int64)])

        itg = itg_loss(qf, q, feats, text, qloras)

        prefix = self._tok.tokenize(mod.prefix)
        targets = [self._tok.tokenize(c) for c in batch.captions]
        llm = lm_loss_batch(self.lm, proj(qo), prefix, targets, lm_mode or self._cfg.lm_mode, lloras)

        reg = None
        if mod.is_region and adapters is not None and adapters.reg_head is not None:
            coords = np.stack([np.asarray(r.coords, dtype=np.float32) for r in batch.regions])
            reg = reg_loss(predict_region(adapters, qo), coords)
        return {"itc": itc, "itg": itg, "itm": itm, "llm": llm, "reg": reg}

    # -- inference ----------------------------------------------------------------
    def caption(self, batch, modality_id=None, max_len=20, lm_mode=None):
        adapters = self.get_adapters(modality_id)
        mod = get_modality(batch.modality)
        _, lloras, proj = self._parts(adapters)
        with ag.no_grad():
            qo = self.query_outputs(batch, adapters)
            ids = greedy_decode(self.lm, lloras, proj(qo), self._tok.tokenize(mod.prefix), max_len,
                                mode=lm_mode or self._cfg.lm_mode)
        return [self._tok.detokenize(r) for r in ids]

    def predict_regions(self, batch, modality_id):
        adapters = self.get_adapters(modality_id)
        with ag.no_grad():
            return predict_region(adapters, self.query_outputs(batch, adapters)).data

    def itc_features(self, batch, modality_id=None):
        """Normalized query features [B, nq, d_itc] and text features [B, d_itc]."""
        adapters = self.get_adapters(modality_id)
        qloras, _, _ = self._parts(adapters)
        with ag.no_grad():
            qo = self.query_outputs(batch, adapters)
            _, to = self.qformer(None, None, self.text_ids(batch.captions), loras=qloras)
            qf = ag.l2_normalize(self.qformer.vision_proj(qo)).data
            tf = ag.l2_normalize(self.qformer.text_proj(to[:, 0])).data
        return qf, tf
