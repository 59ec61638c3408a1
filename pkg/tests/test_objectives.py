from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pflfe import autograd as ag
from pflfe.autograd import ComputeGraph, Tensor, no_grad
from pflfe.objectives import (
    DegenerateEmbeddingError, EmaConfig, ce_loss, dice_loss, ema_update, lfe_loss, lfe_total_loss, supervised_loss,
)
from pflfe.optim import SgdState, sgd_step
from pflfe.segnet import ModelConfig, build_model, forward_project, forward_segment


def _val(t):
    return float(t.item())


@pytest.mark.parametrize("o,t,expected", [
    ([1, 2, 3], [1, 2, 3], 0.0),
    ([1, 0], [0, 1], 2.0),
    ([1, 0], [-1, 0], 4.0),
    ([1, 0], [1, 1], 2 - 2 / math.sqrt(2)),
])
def test_lfe_loss_examples(o, t, expected):
    assert _val(lfe_loss(np.array(o, float), np.array(t, float))) == pytest.approx(expected, abs=1e-12)


def test_lfe_total_loss_examples():
    v = np.array([[1.0, 2.0, 3.0]])
    assert _val(lfe_total_loss(v, v, v, v)) == pytest.approx(0.0, abs=1e-12)
    a, b, c, d = (np.random.default_rng(i).normal(size=(4, 5)) for i in range(4))
    assert _val(lfe_total_loss(a, b, c, d)) == _val(lfe_total_loss(c, d, a, b))
    assert _val(lfe_total_loss(a, b, c, d)) == pytest.approx(_val(lfe_loss(a, d)) + _val(lfe_loss(c, b)), abs=1e-14)


def test_lfe_rejects_zero_vector():
    with pytest.raises(DegenerateEmbeddingError):
        lfe_loss(np.zeros(3), np.ones(3))


vectors = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(vectors, vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_lfe_loss_range_and_scale_invariance(o, t, alpha, beta):
    base = _val(lfe_loss(o, t))
    assert -1e-12 <= base <= 4 + 1e-12
    assert _val(lfe_loss(alpha * o, beta * t)) == pytest.approx(base, abs=1e-10)


def test_lfe_target_gets_no_gradient():
    online = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    target = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    g = ComputeGraph()
    with g:
        loss = lfe_loss(online, target)
    g.backward(loss, [online, target])
    assert np.all(target.grad == 0.0) and np.any(online.grad != 0.0)


# --- Dice / CE ------------------------------------------------------------------------

def test_dice_perfect_prediction_large_mask():
    mask = np.zeros((1, 32, 32), dtype=np.uint8)
    mask[0, 4:24, 4:24] = 1
    probs = np.stack([1.0 - mask, mask]).astype(float).transpose(1, 0, 2, 3)
    loss = _val(dice_loss(probs, mask))
    assert 0 <= loss <= 1.0 / (2 * mask.sum() + 1.0)


def test_dice_zero_probs_hundred_pixel_mask():
    mask = np.zeros((10, 10))
    mask[...] = 1
    assert _val(dice_loss(np.zeros((10, 10)), mask)) == pytest.approx(1 - 1 / 101, abs=1e-12)


def test_dice_empty_mask_zero_probs():
    assert _val(dice_loss(np.zeros((8, 8)), np.zeros((8, 8)))) == 0.0


def test_ce_examples():
    mask = np.random.default_rng(0).integers(0, 2, size=(2, 4, 4))
    onehot = np.stack([mask == 0, mask == 1], axis=1).astype(float)
    assert _val(ce_loss(onehot, mask)) == pytest.approx(0.0, abs=1e-15)
    assert _val(ce_loss(np.full((2, 2, 4, 4), 0.5), mask)) == pytest.approx(math.log(2), abs=1e-12)
    p = np.where(onehot == 1, 0.8, 0.2)
    assert _val(ce_loss(p, mask)) == pytest.approx(-math.log(0.8), abs=1e-12)


def test_supervised_is_dice_plus_ce():
    rng = np.random.default_rng(2)
    mask = rng.integers(0, 2, size=(2, 6, 6))
    probs = ag.softmax(Tensor(rng.normal(size=(2, 2, 6, 6))), axis=1)
    total = _val(supervised_loss(probs, mask))
    assert total == pytest.approx(_val(dice_loss(probs, mask)) + _val(ce_loss(probs, mask)), abs=1e-14)


def test_perfect_prediction_supervised_near_zero():
    mask = np.zeros((1, 16, 16), dtype=int)
    mask[0, 2:14, 2:14] = 1
    onehot = np.stack([mask == 0, mask == 1], axis=1).astype(float)
    assert _val(supervised_loss(onehot, mask)) < 1e-2


def test_supervised_overfit_one_sample_non_increasing():
    cfg = ModelConfig(encoder_widths=(4, 8), decoder_widths=(8, 4))
    params = build_model(cfg, 0)
    rng = np.random.default_rng(0)
    mask = np.zeros((1, 32, 32), dtype=np.uint8)
    mask[0, 8:20, 10:26] = 1
    image = (0.2 + 0.6 * mask + rng.normal(0, 0.02, mask.shape))[:, None]
    names = params.names("encoder", "decoder")
    state = SgdState(learning_rate=0.01, momentum=0.0)
    losses = []
    for _ in range(50):
        g = ComputeGraph()
        with g:
            loss = supervised_loss(forward_segment(params, image), mask)
        g.backward(loss, [params[n] for n in names])
        sgd_step([(n, params[n]) for n in names], state)
        losses.append(loss.item())
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_mask_label_out_of_range():
    from pflfe.autograd import ShapeError

    with pytest.raises(ShapeError):
        ce_loss(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2), 3))


# --- EMA --------------------------------------------------------------------------------

def _pair(cfg=ModelConfig(encoder_widths=(4, 8), decoder_widths=(8, 4))):
    return build_model(cfg, 0), build_model(cfg, 1)


def test_ema_one_step_example():
    target, online = _pair()
    for n in target:
        target[n].data[...] = 0.0
        online[n].data[...] = 1.0
    ema_update(target, online, EmaConfig(0.99))
    for n in target:
        np.testing.assert_allclose(target[n].data, 0.01, rtol=1e-12)


def test_ema_fixed_point_and_zero_decay():
    target, online = _pair()
    same = online.copy()
    ema_update(same, online, 0.99)
    assert same.to_bytes() == online.to_bytes()
    ema_update(target, online, 0.0)
    assert target.to_bytes() == online.to_bytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)),
       st.floats(0.0, 0.999))
def test_ema_is_convex(t, o, tau):
    from pflfe.segnet import ParamEntry, ParameterSet

    target = ParameterSet([ParamEntry("w", Tensor(t), "encoder")])
    online = ParameterSet([ParamEntry("w", Tensor(o), "encoder")])
    ema_update(target, online, tau)
    out = target["w"].data
    assert np.all(out >= np.minimum(t, o)) and np.all(out <= np.maximum(t, o))


@pytest.mark.parametrize("decay", [0.0, 1.0, -0.5, 1.5])
def test_ema_config_bounds(decay):
    with pytest.raises(ValueError):
        EmaConfig(decay)


def test_target_branch_parameters_get_zero_gradient():
    cfg = ModelConfig(encoder_widths=(4, 8), decoder_widths=(8, 4))
    online = build_model(cfg, 0)
    target = online.copy()
    target.set_requires_grad(target.names(), True)
    rng = np.random.default_rng(0)
    v, vp = rng.uniform(size=(2, 1, 32, 32)), rng.uniform(size=(2, 1, 32, 32))
    with no_grad():
        t_v, t_vp = forward_project(target, v), forward_project(target, vp)
    g = ComputeGraph()
    with g:
        loss = lfe_total_loss(forward_project(online, v), t_v, forward_project(online, vp), t_vp)
    g.backward(loss, [t for _, t in target.items()])
    assert all(np.all(t.grad == 0.0) for _, t in target.items())


def test_embedding_spread_detects_collapse():
    from pflfe.objectives import embedding_spread

    rng = np.random.default_rng(0)
    assert embedding_spread(np.tile(rng.normal(size=8), (16, 1))) == pytest.approx(0.0, abs=1e-12)
    # scaling individual rows does not hide collapse
    assert embedding_spread(np.outer(rng.uniform(1, 5, 16), np.ones(8))) == pytest.approx(0.0, abs=1e-12)
    assert embedding_spread(rng.normal(size=(256, 8))) == pytest.approx(1 / np.sqrt(8), rel=0.15)
