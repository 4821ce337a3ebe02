"""End-to-end stages: LM pre-training, base pre-training, extension, evaluation."""
from __future__ import annotations

import logging

import numpy as np

from . import autograd as ag
from .data import caption_corpus
from .lm import lm_loss_batch
from .metrics import CiderCorpus, cider, retrieval_recall
from .nn import ConfigError
from .regioncap import noun_chunks
from .trainer import AdamW, TrainConfig, Trainer, lr_at

log = logging.getLogger(__name__)


def pretrain_lm(model, cfg, texts=None, steps=None):
    """Train the toy LM alone on prefix+caption text, then freeze it."""
    tok = model.tokenizer
    texts = caption_corpus(cfg.seed) if texts is None else texts
    by_prefix = {}
    for prefix, caption in texts:
        by_prefix.setdefault(prefix, []).append(tok.tokenize(caption))
    params = [(n, p) for n, p in model.lm.named_parameters("lm.")]
    for _, p in params:
        p.requires_grad = True
    opt = AdamW.from_config(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    prefixes = sorted(by_prefix)
    steps = cfg.total_steps if steps is None else steps
    losses = []
    for step in range(steps):
        prefix = prefixes[step % len(prefixes)]
        pool = by_prefix[prefix]
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        loss = lm_loss_batch(model.lm, None, tok.tokenize(prefix), [pool[i] for i in idx], model.config.lm_mode)
        ag.backward(loss)
        opt.step(lr_at(step, cfg))
        losses.append(float(loss.data))
    model.lm.freeze()
    return losses


def pretrain_base(model, source, cfg, steps=None, log_path=None):
    """Train the base path (Q-Former, base queries, base projection) on image-text.

    The LM and encoders stay frozen. Afterwards ``img_text`` is registered
    as an identity adapter set and the whole model is frozen.
    """
    if not model.lm.frozen:
        raise ConfigError("pretrain the LM (and freeze it) before the base")
    for _, p in model.qformer.named_parameters():
        p.requires_grad = True
    for p in model.lm_projection.parameters():
        p.requires_grad = True
    trainer = Trainer(model, cfg, log_path=log_path, base=True)
    reports = trainer.fit({"img_text": source}, steps)
    model.freeze_base()
    if "img_text" not in model.adapters:
        model.register_modality("img_text")
    model.adapters["img_text"].freeze()
    return reports


def region_accuracy(candidates, references):
    """Share of candidates whose first noun chunk equals the reference's."""
    hits = 0
    for c, r in zip(candidates, references):
        cc, rc = noun_chunks(c), noun_chunks(r)
        hits += bool(cc and rc and cc[0] == rc[0])
    return hits / max(1, len(candidates))


def evaluate(model, source, modality_id, split="test", seed=0, batch_size=32, max_len=20):
    """Caption a split and score it; returns the eval-report dict."""
    ids = source.ids
    cands, refs, qfs, tfs, preds, gts = [], [], [], [], [], []
    for i in range(0, len(ids), batch_size):
        batch = source.batch(ids[i:i + batch_size])
        cands.extend(model.caption(batch, modality_id, max_len=max_len))
        refs.extend(batch.captions)
        qf, tf = model.itc_features(batch, modality_id)
        qfs.append(qf)
        tfs.append(tf)
        adapters = model.get_adapters(modality_id)
        if adapters is not None and adapters.reg_head is not None:
            preds.append(model.predict_regions(batch, modality_id))
            gts.append(np.stack([r.coords for r in batch.regions]))
    corpus = CiderCorpus([[r] for r in refs])
    scores = [cider(c, [r], corpus) for c, r in zip(cands, refs)]
    report = {
        "modality": source.modality.id,
        "split": split,
        "cider": float(np.mean(scores)),
        "recall_at_1": retrieval_recall(np.concatenate(qfs), np.concatenate(tfs), 1),
        "n_samples": len(ids),
        "seed": seed,
    }
    if source.modality.is_region:
        report["object_accuracy"] = region_accuracy(cands, refs)
        if preds:
            report["region_l1"] = float(np.mean(np.abs(np.concatenate(preds) - np.concatenate(gts))))
    return report, cands
