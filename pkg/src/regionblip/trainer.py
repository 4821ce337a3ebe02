"""Optimization, schedule, semi-hybrid epochs and the incremental workflow."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint
from .data import load_payload, read_dataset, dataset_path
from .encoders import augment_pointcloud
from .model import ModalBatch
from .nn import ConfigError
from .regions import get_modality

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    total_steps: int = 2000
    batch_size: int = 16
    lam: float = 1.0
    seed: int = 0
    modality_order: tuple = ("img_region", "pc_text", "pc_region")
    grad_clip: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.modality_order, str):
            self.modality_order = tuple(m.strip() for m in self.modality_order.split(",") if m.strip())
        self.modality_order = tuple(self.modality_order)
        if not 0 < self.min_lr <= self.peak_lr:
            raise ConfigError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive and matching losses need pairs)")


# config-file key -> dataclass field
_KEY_ALIASES = {"lambda": "lam"}


def parse_config_text(text):
    """Flat ``key=value`` lines; ``#`` starts a comment. Returns a str->str dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return value if isinstance(value, tuple) else tuple(s.strip() for s in str(value).split(",") if s.strip())
    return value


def build_dataclass(cls, values, strict=True):
    """Instantiate ``cls`` from string values, coercing to each field's default type."""
    proto = cls()
    kwargs, unknown = {}, []
    names = {f.name for f in fields(cls)}
    for key, value in values.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in names:
            unknown.append(key)
            continue
        try:
            kwargs[name] = _coerce(value, getattr(proto, name))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if strict and unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return cls(**kwargs)


# -- schedule -------------------------------------------------------------------

def lr_at(step, cfg):
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.min_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr - (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 - math.cos(math.pi * progress))


# -- optimizer ------------------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments.

    ``params`` is a list of (name, Tensor); frozen tensors are rejected.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05, grad_clip=None):
        self.params = list(params)
        for name, p in self.params:
            if not p.requires_grad:
                raise ConfigError(f"optimizer given frozen parameter {name!r}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.state = {name: (np.zeros(p.shape, np.float64), np.zeros(p.shape, np.float64)) for name, p in self.params}

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.grad_clip or None)

    def step(self, lr):
        grads = {}
        for name, p in self.params:
            g = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        if self.grad_clip:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params:
            m, v = self.state[name]
            g = grads[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w = p.data.astype(np.float64)
            w = w - lr * self.weight_decay * w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = w.astype(p.data.dtype)
            p.grad = None


def adamw_step(params, grads, state, lr, cfg):
    """Functional single step over numpy arrays; returns (new_params, new_state).

    ``state`` is {"t": int, "m": {...}, "v": {...}} (missing entries start at 0).
    """
    t = state.get("t", 0) + 1
    m_all, v_all = dict(state.get("m", {})), dict(state.get("v", {}))
    out = {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = cfg.beta1 * m_all.get(name, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * v_all.get(name, 0.0) + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        w = np.asarray(w, dtype=np.float64)
        out[name] = w - lr * cfg.weight_decay * w - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        m_all[name], v_all[name] = m, v
    return out, {"t": t, "m": m_all, "v": v_all}


# -- epochs -----------------------------------------------------------------------

def semi_hybrid_epoch(datasets, cfg, epoch=0):
    """One epoch as a list of ``(modality, [sample ids])`` batches.

    Each modality's samples form one contiguous segment, segments follow
    ``cfg.modality_order``, and samples are shuffled within a modality by a
    seed derived from ``(cfg.seed, epoch, modality)``. The last partial
    batch of each modality is kept.
    """
    batches = []
    for mod in cfg.modality_order:
        if mod not in datasets:
            raise ConfigError(f"no dataset for registered modality {mod!r}")
        ids = list(datasets[mod])
        if not ids:
            raise ConfigError(f"empty dataset for modality {mod!r}")
        rng = np.random.default_rng([cfg.seed, epoch, sum(map(ord, mod))])
        order = rng.permutation(len(ids))
        for i in range(0, len(ids), cfg.batch_size):
            batches.append((mod, [ids[j] for j in order[i:i + cfg.batch_size]]))
    return batches


# -- data feeding -----------------------------------------------------------------

class ModalitySource:
    """Loads one modality's samples and turns id lists into encoded batches.

    Image features are cached (the encoder is frozen and deterministic).
    ``pc_text`` clouds are augmented afresh for every batch when enabled;
    region clouds are not, because augmentation would move their boxes.
    """

    def __init__(self, model, samples, root, augment=False, seed=0):
        self.model = model
        self.samples = {s.id: s for s in samples}
        self.root = Path(root)
        self.modality = get_modality(samples[0].modality) if samples else None
        self.augment = augment and self.modality is not None and self.modality.encoder == "point" \
            and not self.modality.is_region
        self._payloads = {}
        self._feats = {}
        self._rng = np.random.default_rng(seed)

    @classmethod
    def from_split(cls, model, root, modality, split, **kw):
        return cls(model, read_dataset(dataset_path(root, modality, split)), root, **kw)

    @property
    def ids(self):
        return list(self.samples)

    def payload(self, sample):
        if sample.payload not in self._payloads:
            self._payloads[sample.payload] = load_payload(self.root, sample)
        return self._payloads[sample.payload]

    def features(self, samples):
        mod = self.modality
        if self.augment:
            clouds = [augment_pointcloud(self.payload(s), int(self._rng.integers(2 ** 31)),
                                         min_points=self.model.config.point_groups + self.model.config.point_neighbors)
                      for s in samples]
            return self.model.encode(mod.id, clouds)
        todo = [s for s in samples if s.payload not in self._feats]
        if todo:
            uniq = list({s.payload: s for s in todo}.values())
            enc = self.model.encode(mod.id, [self.payload(s) for s in uniq])
            for s, f in zip(uniq, enc):
                self._feats[s.payload] = f
        return np.stack([self._feats[s.payload] for s in samples])

    def batch(self, ids):
        samples = [self.samples[i] for i in ids]
        regions = [s.region for s in samples] if self.modality.is_region else None
        return ModalBatch(self.modality.id, list(ids), self.features(samples),
                          [s.caption for s in samples], regions)


# -- training -----------------------------------------------------------------------

class Trainer:
    """Runs semi-hybrid training; each modality steps its own AdamW state.

    ``base=True`` trains the base path (Q-Former, base queries, base
    projection) on image-text batches instead of adapter sets.
    """

    def __init__(self, model, cfg, log_path=None, base=False):
        self.model = model
        self.cfg = cfg
        self.base = base
        self.step = 0
        self.optimizers = {}
        self.log_path = None if log_path is None else Path(log_path)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    def trainable_params(self, modality_id):
        if self.base:
            return [(n, p) for n, p in self.model.base_parameters() if p.requires_grad]
        return [(n, p) for n, p in self.model.adapter_parameters(modality_id) if p.requires_grad]

    def optimizer(self, modality_id):
        key = "__base__" if self.base else modality_id
        if key not in self.optimizers:
            params = self.trainable_params(modality_id)
            if not params:
                raise ConfigError(f"modality {modality_id!r} has no trainable parameters")
            self.optimizers[key] = AdamW.from_config(params, self.cfg)
        return self.optimizers[key]

    def train_step(self, batch):
        report = train_step(self.model, batch, self.cfg, self.optimizer(batch.modality),
                            lr_at(self.step, self.cfg), base=self.base)
        self.step += 1
        if self.log_path is not None:
            rec = {"step": self.step, "modality": batch.modality, **report.as_dict(),
                   "lr": lr_at(self.step - 1, self.cfg)}
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return report

    def fit(self, sources, steps=None, callback=None):
        """Run until ``steps`` (default ``cfg.total_steps``) optimizer steps."""
        steps = self.cfg.total_steps if steps is None else steps
        ids = {m: s.ids for m, s in sources.items()}
        reports = []
        epoch = 0
        while self.step < steps:
            for mod, batch_ids in semi_hybrid_epoch(ids, self.cfg, epoch):
                if self.step >= steps:
                    break
                if len(batch_ids) < 2:
                    continue  # contrastive / matching terms need a pair
                r = self.train_step(sources[mod].batch(batch_ids))
                reports.append(r)
                if callback is not None:
                    callback(self.step, mod, r)
                if self.step % 100 == 0:
                    log.info("step %d %s total=%.4f", self.step, mod, r.total)
            epoch += 1
        return reports


def train_step(model, batch, cfg, optimizer, lr, base=False):
    """Forward all losses, backward once, one AdamW step; returns the LossReport."""
    modality_id = None if base else batch.modality
    report = model.compute_losses(batch, modality_id, lam=cfg.lam)
    ag.backward(report.tensor)
    optimizer.step(lr)
    for _, p in model.named_parameters():
        p.grad = None
    report.tensor = None
    return report


def extend_incremental(base_ckpt, new_modality_id, use_pafe=True):
    """Load a base checkpoint, freeze everything in it, register a new modality."""
    model = load_checkpoint(base_ckpt)
    for _, p in model.named_parameters():
        p.requires_grad = False
    model.register_modality(new_modality_id, use_pafe=use_pafe)
    return model
