import math

import numpy as np
import pytest

from regionblip import autograd as ag
from regionblip.data import EOS, Tokenizer
from regionblip.lm import LMConfig, PromptedSequence, ToyLM, build_lm_batch, greedy_decode, lm_loss, lm_loss_batch
from regionblip.trainer import AdamW

TOK = Tokenizer()
V = len(TOK)


def small_lm(seed=3):
    return ToyLM(LMConfig(V, 16, 1, 2, 24), seed=seed)


def seq(target, prefix="a photo of", prompt=None):
    return PromptedSequence(prompt, TOK.tokenize(prefix), TOK.tokenize(target))


def test_uniform_logits_give_log_vocab():
    lm = small_lm()
    lm.tok_emb.weight.data[:] = 0
    assert math.isclose(float(lm_loss(lm, None, seq("a red circle")).data), math.log(V), rel_tol=1e-6)


def test_golden_loss():
    assert abs(float(lm_loss(small_lm(), None, seq("a red circle")).data) - 4.136046409606934) < 1e-5


def test_batch_layout_masks_prefix_from_loss():
    ids, nxt, w, n_lead = build_lm_batch([5, 6], [[9], [9, 10]])
    assert n_lead == 3
    assert ids[0].tolist() == [1, 5, 6, 9, 2, 0]
    # predictions from the last prefix position onward count; EOS included
    assert w[0].tolist() == [0, 0, 1, 1, 0, 0]
    assert nxt[0, 2:4].tolist() == [9, EOS]


def test_loss_limit_for_confident_correct_logits():
    # length-1 target with logits saturated at the right token
    lm = small_lm()
    tgt = TOK.tokenize("sphere")[0]
    loss_before = float(lm_loss(lm, None, seq("sphere")).data)
    ids, nxt, w, _ = build_lm_batch(TOK.tokenize("a photo of"), [[tgt]])
    logits = np.full((1, ids.shape[1], V), -50.0)
    logits[0, np.arange(ids.shape[1]), nxt[0]] = 50.0
    assert float(ag.cross_entropy(ag.Tensor(logits), nxt, w).data) < 1e-8 < loss_before


def test_empty_target_raises():
    with pytest.raises(ValueError):
        lm_loss(small_lm(), None, seq(""))


def test_prefix_mode_targets_are_causal():
    lm = small_lm()
    prompt = ag.Tensor(np.random.default_rng(0).normal(size=(1, 2, 16)))
    a = np.array([[1, 3, 4, 5, 11, 14, 2]])
    b = a.copy()
    b[0, 5] = 15
    la = lm(a, prompt, mode="prefix", n_bidir=2 + 4).data
    lb = lm(b, prompt, mode="prefix", n_bidir=2 + 4).data
    np.testing.assert_allclose(la[0, :7], lb[0, :7], atol=1e-6)
    assert not np.allclose(la[0, 7], lb[0, 7])
    # prefix positions see later prefix positions
    c = a.copy()
    c[0, 3] = 6
    lc = lm(c, prompt, mode="prefix", n_bidir=6).data
    assert not np.allclose(la[0, 2], lc[0, 2])


def test_decode_length_and_determinism():
    lm = small_lm()
    prompt = ag.Tensor(np.random.default_rng(1).normal(size=(2, 2, 16)))
    one = greedy_decode(lm, None, prompt, TOK.tokenize("a photo of"), 1)
    assert [len(r) for r in one] == [1, 1]
    a = greedy_decode(lm, None, prompt, TOK.tokenize("a photo of"), 6)
    assert a == greedy_decode(lm, None, prompt, TOK.tokenize("a photo of"), 6)
    assert all(1 <= len(r) <= 6 for r in a)
    with pytest.raises(ValueError):
        greedy_decode(lm, None, prompt, [], 0)


def test_overfit_constant_caption_decodes_it():
    lm = small_lm()
    opt = AdamW(list(lm.named_parameters("lm.")), weight_decay=0.0)
    prefix, target = TOK.tokenize("a photo of"), TOK.tokenize("a green triangle")
    for _ in range(150):
        loss = lm_loss_batch(lm, None, prefix, [target])
        ag.backward(loss)
        opt.step(3e-3)
    out = greedy_decode(lm, None, None, prefix, 10)[0]
    assert TOK.detokenize(out) == "a green triangle"
    assert out[-1] == EOS
