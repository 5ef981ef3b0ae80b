import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from madkd import diffcore as dc
from madkd import losses
from madkd.config import DistillConfig
from madkd.diffcore import Tensor

logit_rows = arrays(np.float64, (4, 5), elements=st.floats(-20, 20))


def test_kd_zero_on_identical_logits(rng):
    t = Tensor(rng.standard_normal((6, 4)))
    assert losses.kd_loss(t, Tensor(t.data.copy())).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_hand_oracle():
    # KL([0.8, 0.2] || [0.5, 0.5]) summed term by term
    oracle = math.fsum([0.8 * math.log(0.8 / 0.5), 0.2 * math.log(0.2 / 0.5)])
    assert oracle == pytest.approx(0.192745, abs=1e-6)
    t = Tensor(np.log(np.array([[0.8, 0.2]])))
    s = Tensor(np.zeros((1, 2)))
    assert losses.kd_loss(t, s).item() == pytest.approx(oracle, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(logit_rows, logit_rows)
def test_kd_non_negative(t, s):
    assert losses.kd_loss(Tensor(t), Tensor(s)).item() >= -1e-12


def test_kd_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        losses.kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_nll_examples():
    assert losses.nll_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4))
    sure = Tensor(np.array([[50.0, 0.0, 0.0]]))
    assert losses.nll_loss(sure, [0]).item() < 1e-12
    t = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    assert losses.nll_loss(t, [0, 1]).item() == pytest.approx((math.log(4) + math.log(2)) / 2)


def test_nll_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        losses.nll_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        losses.nll_loss(Tensor(np.zeros((2, 3))), [-1, 0])


def test_norm_reg_examples(rng):
    assert losses.norm_reg_loss(Tensor(np.full((1, 4), 2.0)), 1.0).item() == pytest.approx(2.0)
    inside = rng.standard_normal((10, 4))
    inside *= 1.9 / np.linalg.norm(inside, axis=1, keepdims=True)
    assert losses.norm_reg_loss(Tensor(inside), 1.0).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(1.0, 2.0))
def test_norm_reg_zero_inside_linear_outside(radius, gamma):
    d_e = 9
    direction = np.ones((1, d_e)) / 3.0
    val = losses.norm_reg_loss(Tensor(radius * direction), gamma).item()
    assert val == pytest.approx(max(radius - gamma * 3.0, 0.0), abs=1e-12)


def test_bnmm_examples():
    same = [(Tensor(np.array([0.2, 0.3])), Tensor(np.array([1.0, 2.0])))]
    assert losses.bnmm_loss(same, [(np.array([0.2, 0.3]), np.array([1.0, 2.0]))]).item() == 0.0
    one = [(Tensor(np.array([1.0, 0.0])), Tensor(np.ones(2)))]
    assert losses.bnmm_loss(one, [(np.zeros(2), np.ones(2))]).item() == 1.0


def test_bnmm_layer_order_invariant_and_count_checked(rng):
    batch = [(Tensor(rng.random(3)), Tensor(rng.random(3))) for _ in range(3)]
    run = [(rng.random(3), rng.random(3)) for _ in range(3)]
    perm = [2, 0, 1]
    a = losses.bnmm_loss(batch, run).item()
    b = losses.bnmm_loss([batch[i] for i in perm], [run[i] for i in perm]).item()
    assert a == pytest.approx(b, abs=1e-14)
    with pytest.raises(ValueError):
        losses.bnmm_loss(batch[:2], run)


def test_clamp_examples():
    assert losses.clamp_penalty(Tensor(np.array([25.0])), 20.0).item() == 5.0
    assert losses.clamp_penalty(Tensor(np.array([-20.0, 0.0, 20.0])), 20.0).item() == 0.0
    with pytest.raises(ValueError):
        losses.clamp_penalty(Tensor(np.zeros(1)), 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-100, 100)))
def test_clamp_symmetric(v):
    a = losses.clamp_penalty(Tensor(v), 20.0).item()
    assert a == losses.clamp_penalty(Tensor(-v), 20.0).item()
    assert a == pytest.approx(np.mean(np.maximum(np.abs(v) - 20.0, 0.0)))


def test_clamp_unit_slope_outside(rng):
    v = Tensor(np.array([30.0, -40.0, 5.0]), requires_grad=True)
    g = dc.gradients(losses.clamp_penalty(v, 20.0), [v])[0]
    assert np.allclose(g, [1 / 3, -1 / 3, 0.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0)), arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0)))
def test_js_bounded_and_symmetric(a, b):
    p = (a + 1e-3) / (a + 1e-3).sum(axis=1, keepdims=True)
    q = (b + 1e-3) / (b + 1e-3).sum(axis=1, keepdims=True)
    js = losses.js_divergence(p, q)
    assert -1e-15 <= js <= math.log(2) + 1e-12
    assert js == pytest.approx(losses.js_divergence(q, p), abs=1e-15)


def test_js_examples():
    p = np.array([[1.0, 0.0]])
    assert losses.js_divergence(p, p) == 0.0
    assert losses.js_divergence(p, np.array([[0.0, 1.0]])) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        losses.js_divergence(np.array([[0.5, 0.6]]), p)


def test_student_loss_breakdown(rng):
    cfg = DistillConfig(zeta0=0.5, delta=0.5)
    parts = [Tensor(rng.normal(0, 2, (5, 3))) for _ in range(4)]
    br = losses.student_loss(*parts, cfg)
    assert set(br.components) == {"kd_gen", "clamp_student", "kd_ema", "clamp_student_ema"}
    assert br.total.item() == pytest.approx(br.recompose(), abs=1e-10)
    abm = losses.student_loss(parts[0], parts[1], None, None, cfg)
    lam1_zero = losses.student_loss(*parts, DistillConfig(zeta0=0.5, delta=0.5, lambda1=0.0))
    assert abm.total.item() == lam1_zero.total.item()


def test_student_loss_rejects_negative_weights(rng):
    cfg = DistillConfig()
    cfg.lambda1 = -1.0
    t = Tensor(np.zeros((2, 2)))
    with pytest.raises(losses.LossConfigError):
        losses.student_loss(t, t, t, t, cfg)


def test_generator_loss_all_zero_weights(rng):
    cfg = DistillConfig(lambda2=0.0, lambda5=0.0, zeta1=0.0, zeta2=0.0)
    u = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    br = losses.generator_loss(Tensor(u.data @ np.ones((2, 3))), Tensor(np.zeros((4, 3))), u, None, None,
                               [], [], cfg)
    assert br.total.item() == 0.0
    assert np.array_equal(dc.gradients(br.total, [u])[0], np.zeros((4, 2)))


def test_generator_loss_conditional_terms_need_conditioning():
    t = Tensor(np.zeros((2, 3)))
    with pytest.raises(losses.LossConfigError):
        losses.generator_loss(t, t, t, None, None, [], [], DistillConfig(lambda3=0.1, lambda5=0.0))
    with pytest.raises(losses.LossConfigError):
        losses.generator_loss(t, t, t, None, None, [], [], DistillConfig(lambda5=1.0))


def test_generator_loss_sign_contract(rng):
    cfg = DistillConfig(lambda5=0.0, zeta1=0.0, zeta2=0.0)
    t = Tensor(rng.standard_normal((4, 3)))
    near = losses.generator_loss(t, Tensor(t.data + 0.1), t, None, None, [], [], cfg).total.item()
    far = losses.generator_loss(t, Tensor(-t.data), t, None, None, [], [], cfg).total.item()
    assert far < near


def test_breakdown_recomposition_generator(rng):
    cfg = DistillConfig(lambda3=0.3, lambda4=0.2, zeta1=0.1, zeta2=0.1, delta=0.5, nu=0.5, cond="sum")
    t = Tensor(rng.normal(0, 3, (6, 4)))
    s = Tensor(rng.normal(0, 3, (6, 4)))
    u = Tensor(rng.normal(0, 3, (6, 2)))
    e = Tensor(rng.normal(0, 3, (6, 4)))
    moments = [(Tensor(rng.random(4)), Tensor(rng.random(4)))]
    br = losses.generator_loss(t, s, u, rng.integers(0, 4, 6), e, moments, [(np.zeros(4), np.ones(4))], cfg)
    assert set(br.components) == {"kd_gen", "clamp_teacher", "clamp_gen_logit", "nll", "norm_reg", "bnmm"}
    assert br.total.item() == pytest.approx(br.recompose(), abs=1e-10)
