import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import image_batch, point_batch, tiny_config
from regionblip import autograd as ag
from regionblip.losses import itg_loss
from regionblip.model import RegionBLIP
from regionblip.nn import ConfigError
from regionblip.qformer import qformer_forward
from regionblip.trainer import (AdamW, TrainConfig, Trainer, adamw_step, build_dataclass, lr_at, parse_config_text,
                                semi_hybrid_epoch, train_step)


# -- schedule ---------------------------------------------------------------------

def test_lr_pins():
    cfg = TrainConfig()
    assert lr_at(200, cfg) == 1e-4
    assert lr_at(cfg.total_steps, cfg) == 1e-5
    assert lr_at(0, cfg) == 0.0
    mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) // 2
    assert abs(lr_at(mid, cfg) - 5.5e-5) < 1e-15
    assert abs(lr_at(199, cfg) + cfg.peak_lr / 200 - lr_at(200, cfg)) < 1e-12


@given(step=st.integers(0, 3000))
def test_lr_bounded_and_monotone_after_warmup(step):
    cfg = TrainConfig()
    lr = lr_at(step, cfg)
    assert 0 <= lr <= cfg.peak_lr
    if step >= cfg.warmup_steps:
        assert lr >= cfg.min_lr and lr_at(step + 1, cfg) <= lr


def test_config_validation_and_parsing():
    with pytest.raises(ConfigError):
        TrainConfig(min_lr=1e-3, peak_lr=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    vals = parse_config_text("peak_lr = 3e-4  # comment\n\nlambda=2\nmodality_order=pc_text, img_region\n")
    cfg = build_dataclass(TrainConfig, vals)
    assert cfg.peak_lr == 3e-4 and cfg.lam == 2.0 and cfg.modality_order == ("pc_text", "img_region")
    with pytest.raises(ConfigError):
        build_dataclass(TrainConfig, {"learning_rate": "1"})
    with pytest.raises(ConfigError):
        parse_config_text("just words")


# -- optimizer ----------------------------------------------------------------------

def scalar_param(v=1.0):
    return ag.Tensor(np.array([v]), requires_grad=True)


def test_adamw_hand_examples():
    w = scalar_param()
    opt = AdamW([("w", w)], weight_decay=0.0)
    w.grad = np.array([1.0])
    opt.step(0.1)
    assert abs(w.data[0] - (1 - 0.1 / (1 + 1e-8))) < 1e-7

    w = scalar_param()
    opt = AdamW([("w", w)], weight_decay=0.05)
    w.grad = np.array([0.0])
    opt.step(0.1)
    assert abs(w.data[0] - 0.995) < 1e-7

    w = scalar_param(0.7)
    AdamW([("w", w)], weight_decay=0.0).step(0.1)
    assert w.data[0] == np.float32(0.7)


def test_functional_adamw_matches_class():
    cfg = TrainConfig(grad_clip=0)
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 2))
    p = ag.Tensor(w0.copy(), requires_grad=True)
    opt = AdamW.from_config([("p", p)], cfg)
    params, state = {"p": w0.copy()}, {}
    for _ in range(3):
        g = rng.normal(size=(3, 2))
        p.grad = g.copy()
        opt.step(1e-2)
        params, state = adamw_step(params, {"p": g}, state, 1e-2, cfg)
    np.testing.assert_allclose(p.data, params["p"], atol=1e-6)
    assert state["t"] == 3


def test_adamw_aborts_on_nan_naming_parameter():
    w = scalar_param()
    w.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'enc.w'"):
        AdamW([("enc.w", w)]).step(0.1)
    with pytest.raises(FloatingPointError, match="'x'"):
        adamw_step({"x": np.ones(1)}, {"x": np.array([np.inf])}, {}, 0.1, TrainConfig())
    frozen = ag.Tensor(np.ones(1))
    with pytest.raises(ConfigError):
        AdamW([("f", frozen)])


def test_gradient_clipping():
    a, b = scalar_param(0.0), scalar_param(0.0)
    a.grad, b.grad = np.array([30.0]), np.array([40.0])
    opt = AdamW([("a", a), ("b", b)], weight_decay=0.0, grad_clip=1.0)
    opt.step(0.1)
    m_a = opt.state["a"][0][0]
    assert abs(m_a - 0.1 * 0.6) < 1e-12


# -- semi-hybrid epochs ----------------------------------------------------------------

def test_semi_hybrid_example():
    cfg = TrainConfig(batch_size=2, modality_order=("img_region", "pc_text", "pc_region"))
    data = {"img_region": ["a", "b", "c", "d"], "pc_text": ["p", "q"], "pc_region": ["r", "s"]}
    mods = [m for m, _ in semi_hybrid_epoch(data, cfg, 0)]
    assert mods == ["img_region", "img_region", "pc_text", "pc_region"]
    big = {"img_region": list(range(40)), "pc_text": list(range(100, 130))}
    cfg = TrainConfig(batch_size=8, modality_order=("img_region", "pc_text"))
    e0, e1 = semi_hybrid_epoch(big, cfg, 0), semi_hybrid_epoch(big, cfg, 1)
    assert [m for m, _ in e0] == [m for m, _ in e1]
    assert [i for _, b in e0 for i in b] != [i for _, b in e1 for i in b]


@given(sizes=st.lists(st.integers(1, 30), min_size=1, max_size=4), batch=st.integers(2, 9),
       epoch=st.integers(0, 5), seed=st.integers(0, 100))
@settings(max_examples=50, deadline=None)
def test_semi_hybrid_accounting(sizes, batch, epoch, seed):
    names = ["img_text", "img_region", "pc_text", "pc_region"][:len(sizes)]
    data = {m: [f"{m}-{i}" for i in range(n)] for m, n in zip(names, sizes)}
    order = tuple(reversed(names))
    cfg = TrainConfig(batch_size=batch, modality_order=order, seed=seed)
    batches = semi_hybrid_epoch(data, cfg, epoch)
    emitted = [i for _, b in batches for i in b]
    assert Counter(emitted) == Counter(i for ids in data.values() for i in ids)
    seq = [m for m, _ in batches]
    segments = [m for k, m in enumerate(seq) if k == 0 or seq[k - 1] != m]
    assert segments == list(order)
    assert all(len(b) <= batch and all(i.startswith(m + "-") for i in b) for m, b in batches)


def test_semi_hybrid_missing_modality():
    with pytest.raises(ConfigError):
        semi_hybrid_epoch({"pc_text": ["a"]}, TrainConfig(modality_order=("pc_text", "img_region")))


# -- training steps ----------------------------------------------------------------------

def two_modality_model(seed=0):
    m = RegionBLIP(tiny_config(seed=seed))
    m.freeze_base()
    m.register_modality("img_region")
    m.register_modality("pc_region")
    return m


def test_step_keeps_base_and_other_modality_fixed():
    m = two_modality_model()
    cfg = TrainConfig(peak_lr=1e-3, min_lr=1e-4, warmup_steps=0, total_steps=10)
    ib, pb = image_batch(m), point_batch(m)
    base, other = m.base_checksum(), m.adapter_checksum("pc_region")
    with ag.no_grad():
        probe = qformer_forward(m.qformer, m.adapters["pc_region"], pb.feats, pb.regions)[0].data.copy()
    before = m.adapter_checksum("img_region")
    tr = Trainer(m, cfg)
    for _ in range(3):
        tr.train_step(ib)
    assert m.adapter_checksum("img_region") != before
    assert m.base_checksum() == base and m.adapter_checksum("pc_region") == other
    with ag.no_grad():
        after = qformer_forward(m.qformer, m.adapters["pc_region"], pb.feats, pb.regions)[0].data
    np.testing.assert_array_equal(probe, after)


def test_loss_smoke_non_increasing():
    ok = 0
    trials = 10
    for seed in range(trials):
        m = RegionBLIP(tiny_config(seed=seed))
        m.freeze_base()
        m.register_modality("img_region")
        batch = image_batch(m, n=4, seed=seed)
        opt = AdamW(list(m.adapter_parameters("img_region")), weight_decay=0.05)
        cfg = TrainConfig()
        r1 = train_step(m, batch, cfg, opt, 1e-4)
        r2 = train_step(m, batch, cfg, opt, 1e-4)
        r3 = m.compute_losses(batch, "img_region")
        ok += r2.total <= r1.total and r3.total <= r2.total
    assert ok / trials >= 0.9


def test_itg_overfits_single_sample():
    m = RegionBLIP(tiny_config())
    batch = image_batch(m, "img_text", n=1)
    qf = m.qformer
    params = list(qf.named_parameters("qformer."))
    opt = AdamW(params, weight_decay=0.0)
    text = m.text_ids(batch.captions)
    for _ in range(200):
        q = ag.broadcast_to(ag.reshape(qf.queries, (1,) + qf.queries.shape), (1,) + qf.queries.shape)
        loss = itg_loss(qf, q, batch.feats, text)
        ag.backward(loss)
        opt.step(3e-3)
    assert float(itg_loss(qf, q, batch.feats, text).data) < 0.1


def test_trainer_writes_log_and_skips_singletons(tmp_path):
    m = two_modality_model()

    class Source:
        def __init__(self, n):
            self.ids = [f"s{i}" for i in range(n)]
            self._b = image_batch(m, n=2)

        def batch(self, ids):
            b = self._b
            return type(b)(b.modality, list(ids), b.feats[:1].repeat(len(ids), 0), [b.captions[0]] * len(ids),
                           [b.regions[0]] * len(ids))

    cfg = TrainConfig(batch_size=2, warmup_steps=1, total_steps=4, modality_order=("img_region",))
    tr = Trainer(m, cfg, log_path=tmp_path / "log.jsonl")
    reports = tr.fit({"img_region": Source(5)}, steps=4)
    assert len(reports) == 4
    recs = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    assert all(r["modality"] == "img_region" and r["reg"] is not None for r in recs)
