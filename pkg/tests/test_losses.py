import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import LOSS_NAMES, gradient_suite
from regionblip import autograd as ag
from regionblip.autograd import Tensor
from regionblip.losses import LossError, combined_loss, itc_loss, itm_loss, reg_loss

# -ln(e / (e + 1)), worked by hand
ITC_IDENTITY_T1 = 0.3132616875182228


@given(B=st.integers(2, 8), d=st.integers(2, 6))
@settings(max_examples=20, deadline=None)
def test_itc_identical_embeddings_is_log_b(B, d):
    q = Tensor(np.ones((B, 3, d)))
    t = Tensor(np.ones((B, d)))
    assert abs(float(itc_loss(q, t, 0.07).data) - math.log(B)) < 1e-6


def test_itc_identity_similarity_hand_value():
    q = Tensor(np.eye(2)[:, None, :])
    t = Tensor(np.eye(2))
    assert abs(float(itc_loss(q, t, 1.0).data) - ITC_IDENTITY_T1) < 1e-4


def test_itc_low_temperature_limit():
    q = Tensor(np.eye(2)[:, None, :])
    assert float(itc_loss(q, Tensor(np.eye(2)), 0.01).data) < 1e-6


def test_itc_uses_best_query():
    # the matching query sits in slot 1; slot 0 is orthogonal to every text
    q = np.zeros((2, 2, 3))
    q[:, 0, 2] = 1.0
    q[0, 1, 0] = q[1, 1, 1] = 1.0
    t = np.eye(3)[:2]
    assert float(itc_loss(Tensor(q), Tensor(t), 0.05).data) < 1e-6


def test_itc_errors():
    with pytest.raises(LossError):
        itc_loss(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(LossError):
        itc_loss(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3))))


def test_itc_grads_four_samples():
    rng = np.random.default_rng(3)
    p = {"q": Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True),
         "t": Tensor(rng.normal(size=(4, 5)), requires_grad=True)}
    rep = ag.grad_check(lambda: itc_loss(p["q"], p["t"], 0.5), p)
    assert rep.passed, rep.errors


def test_itm_examples():
    assert abs(float(itm_loss(Tensor(np.zeros((4, 2))), [1, 1, 0, 0]).data) - math.log(2)) < 1e-7
    sep = np.array([[-10.0, 10.0], [-10, 10], [10, -10], [10, -10]])
    assert float(itm_loss(Tensor(sep), [1, 1, 0, 0]).data) < 1e-4
    golden = np.random.default_rng(0).normal(size=(4, 2))
    assert abs(float(itm_loss(Tensor(golden), [1, 1, 0, 0]).data) - 0.8991063359611987) < 1e-6
    with pytest.raises(LossError):
        itm_loss(Tensor(np.zeros((2, 2))), [1, 1])


def test_reg_examples_and_gradient():
    assert float(reg_loss(Tensor(np.full(4, 0.3)), np.full(4, 0.3)).data) == 0.0
    assert float(reg_loss(Tensor(np.full(4, 0.5)), np.array([0.0, 1.0, 0.0, 1.0])).data) == 0.5
    p = Tensor(np.array([0.2, 0.9, 0.4, 0.1]), requires_grad=True)
    target = np.array([0.5, 0.5, 0.5, 0.5])
    ag.backward(reg_loss(p, target))
    np.testing.assert_allclose(p.grad, np.sign(p.data - target) / 4)
    assert ag.grad_check(lambda: reg_loss(p, target), [p]).passed
    with pytest.raises(LossError):
        reg_loss(Tensor(np.zeros(4)), np.zeros(6))


def test_combined_examples():
    one = {k: 1.0 for k in ("itc", "itg", "itm", "llm", "reg")}
    assert combined_loss(one, 1.0).total == 5
    a = combined_loss({**one, "reg": 7.0}, 0.0).total
    b = combined_loss({**one, "reg": 0.1}, 0.0).total
    assert a == b == 4
    z = {"itc": 0.0, "itg": 0.0, "itm": 0.0, "llm": 0.0, "reg": 0.25}
    assert combined_loss(z, 2.0).total == 0.5
    assert combined_loss({**one, "reg": None}, 1.0).total == 4
    with pytest.raises(LossError, match="itm"):
        combined_loss({**one, "itm": float("nan")})


@given(vals=st.lists(st.floats(0, 10), min_size=5, max_size=5), lam=st.floats(0, 3),
       has_reg=st.booleans())
def test_report_total_invariant(vals, lam, has_reg):
    parts = dict(zip(("itc", "itg", "itm", "llm", "reg"), vals))
    if not has_reg:
        parts["reg"] = None
    r = combined_loss(parts, lam)
    expect = r.itc + r.itg + r.itm + r.llm + lam * (r.reg or 0.0)
    assert abs(r.total - expect) < 1e-6


def test_itg_empty_text_raises(tiny_model):
    from regionblip.losses import itg_loss

    with pytest.raises(LossError):
        itg_loss(tiny_model.qformer, None, None, np.array([[1, 2, 0]]))


def test_gradient_suite_all_losses():
    reports = gradient_suite(seed=0)
    reports.pop("_seed")
    assert set(reports) == set(LOSS_NAMES)
    for name, rep in reports.items():
        assert rep.passed, (name, rep.max_error)
