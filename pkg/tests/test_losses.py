import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haszsl import autodiff as ad
from haszsl.autodiff import Tape, Tensor, grad_check
from haszsl.errors import ConfigError, DimensionError
from haszsl.losses import (LossWeights, cls_loss, combine, div_loss, div_loss_printed,
                           has_components, has_objective, loc_loss, rel_loss, rob_loss,
                           soft_cls_loss)
from haszsl.model import ForwardOutputs, forward, init_params


def outputs_from(scores=None, attr_local=None, attn=None, feat=None):
    """ForwardOutputs stub carrying only the fields a loss reads."""
    t = lambda v: None if v is None else ad.as_tensor(v)
    return ForwardOutputs(None, t(feat), None, t(attn), t(attr_local), t(scores))


def _ref_ce(scores, y):
    m = max(scores)
    return -(scores[y] - m - math.log(sum(math.exp(s - m) for s in scores)))


def _ref_entropy(scores):
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return -sum(v / z * math.log(v / z) for v in e)


def _ref_div(maps):
    total = 0.0
    for hk in maps:
        flat = [float(v) for v in np.ravel(hk)]
        ent = _ref_entropy(flat)
        total += ent - sum(v * v for v in flat)
    return total


# -- cls ------------------------------------------------------------------

def test_cls_uniform_and_saturation():
    assert math.isclose(cls_loss(outputs_from([1.5, 1.5]), 0).item(), math.log(2), rel_tol=1e-14)
    assert cls_loss(outputs_from([20.0, 0.0]), 0).item() < 1e-8


def test_cls_matches_scalar_reference(rng):
    for _ in range(20):
        s = rng.normal(size=4) * 3
        y = int(rng.integers(4))
        assert abs(cls_loss(outputs_from(s), y).item() - _ref_ce(list(s), y)) < 1e-12


def test_cls_label_out_of_range():
    with pytest.raises(IndexError):
        cls_loss(outputs_from([0.0, 1.0]), 2)
    with pytest.raises(IndexError):
        cls_loss(outputs_from([0.0, 1.0]), -1)


def test_soft_cls_reduces_to_hard(rng):
    s = rng.normal(size=(3, 5))
    y = np.array([0, 4, 2])
    assert np.allclose(soft_cls_loss(outputs_from(s), np.eye(5)[y]).values,
                       cls_loss(outputs_from(s), y).values, rtol=0, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.data())
def test_cls_nonneg_and_rob_bounds(scores, data):
    y = data.draw(st.integers(0, len(scores) - 1))
    out = outputs_from(scores)
    assert cls_loss(out, y).item() >= 0
    r = rob_loss(out).item()
    assert -1e-12 <= r <= math.log(len(scores)) + 1e-12


# -- loc ------------------------------------------------------------------

def test_loc_cases(rng):
    phi = rng.uniform(size=8)
    assert loc_loss(outputs_from(attr_local=phi), phi).item() == 0.0
    assert math.isclose(loc_loss(outputs_from(attr_local=phi + 1), phi).item(), 8.0, rel_tol=1e-14)
    a = rng.normal(size=8)
    ref = sum((float(x) - float(p)) ** 2 for x, p in zip(a, phi))
    assert abs(loc_loss(outputs_from(attr_local=a), phi).item() - ref) < 1e-12
    with pytest.raises(DimensionError):
        loc_loss(outputs_from(attr_local=a), phi[:7])


# -- rob ------------------------------------------------------------------

def test_rob_cases(rng):
    assert math.isclose(rob_loss(outputs_from(np.full(6, 0.3))).item(), math.log(6), rel_tol=1e-14)
    assert rob_loss(outputs_from([20.0, 0.0, 0.0])).item() < 1e-6
    s = rng.normal(size=5)
    composed = ad.entropy(ad.softmax(s)).item()
    assert abs(rob_loss(outputs_from(s)).item() - composed) < 1e-12
    assert abs(composed - _ref_entropy(list(s))) < 1e-12


# -- rel ------------------------------------------------------------------

def test_rel_cases(rng):
    f = rng.normal(size=6)
    assert rel_loss(f, f).item() == 0.0
    g = f.copy()
    g[2] += 1.0
    assert math.isclose(rel_loss(f, g).item(), 1.0, rel_tol=1e-12)
    with pytest.raises(DimensionError):
        rel_loss(f, f[:5])


def test_rel_gradient_and_constant_anchor(rng):
    clean, adv = rng.normal(size=6), rng.normal(size=6)
    tape = Tape()
    c, a = tape.leaf(clean), tape.leaf(adv)
    g = tape.backward(rel_loss(c, a))
    assert np.allclose(g[a], 2 * (adv - clean), rtol=0, atol=1e-14)
    assert np.all(g[c] == 0)  # anchor is detached
    assert grad_check(lambda t: rel_loss(clean, t), adv) < 1e-6


# -- div ------------------------------------------------------------------

def test_div_zero_maps_is_maximum():
    K, H, W = 3, 4, 4
    assert math.isclose(div_loss(np.zeros((K, H, W))).item(), K * math.log(H * W), rel_tol=1e-14)


def test_div_single_spike():
    h = np.zeros((1, 2, 2))
    h[0, 0, 0] = 10.0
    v = div_loss(h).item()
    assert abs(v - (-100.0)) < 1e-2
    assert abs(v - _ref_div(h)) < 1e-10


def test_div_matches_reference(rng):
    for _ in range(10):
        maps = rng.normal(size=(3, 4, 4))
        assert abs(div_loss(maps).item() - _ref_div(maps)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_div_upper_bound(K, side, seed):
    maps = np.random.default_rng(seed).normal(size=(K, side, side))
    assert div_loss(maps).item() <= K * math.log(side * side) + 1e-12


def test_div_printed_form(rng):
    maps = rng.normal(size=(2, 3, 3))
    ent = sum(_ref_entropy(list(m.ravel())) for m in maps)
    mag = float(np.sum(maps ** 2))
    assert abs(div_loss_printed(maps).item() - (mag + ent)) < 1e-10
    assert abs(div_loss(maps).item() - (ent - mag)) < 1e-10


def test_div_batched_matches_single(rng):
    maps = rng.normal(size=(3, 2, 4, 4))
    batched = div_loss(maps).values
    assert np.allclose(batched, [div_loss(m).item() for m in maps], rtol=0, atol=1e-13)


# -- combined objective ---------------------------------------------------

@pytest.fixture
def toy(rng):
    params = init_params(0)
    sem = rng.uniform(size=(4, 8))
    images = rng.uniform(size=(3, 3, 16, 16))
    clean = forward(images, params, sem)
    adv = forward(np.clip(images + rng.normal(0, 0.05, images.shape), 0, 1), params, sem)
    return clean, adv, np.array([0, 3, 1]), sem


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(-0.1, 0, 0)
    with pytest.raises(ConfigError):
        LossWeights(0, float("nan"), 0)


def test_all_lambda_zero_equals_cls(toy):
    clean, adv, y, sem = toy
    has = has_objective(adv, y, sem[y], clean.global_feat, LossWeights()).values
    assert np.array_equal(has, cls_loss(adv, y).values)


def test_zero_drift_reduces_to_cls(toy):
    clean, _, y, sem = toy
    has = has_objective(clean, y, sem[y], clean.global_feat, LossWeights(0, 3.0, 0)).values
    assert np.array_equal(has, cls_loss(clean, y).values)


def test_composition_oracle(toy):
    clean, adv, y, sem = toy
    w = LossWeights(0.3, 1.7, 0.01)
    got = has_objective(adv, y, sem[y], clean.global_feat, w).values
    for i in range(3):
        s = list(adv.class_scores.values[i])
        ref = (_ref_ce(s, int(y[i])) - 0.3 * _ref_entropy(s)
               + 1.7 * float(np.sum((adv.global_feat.values[i] - clean.global_feat.values[i]) ** 2))
               - 0.01 * _ref_div(adv.attn_maps.values[i]))
        assert abs(got[i] - ref) < 1e-12


def test_affine_in_each_lambda(toy):
    clean, adv, y, sem = toy
    comps = has_components(adv, y, sem[y], clean.global_feat)
    base = LossWeights(0.2, 0.5, 0.001)
    for name, key, sign in (("lambda1", "rob", -1), ("lambda2", "rel", 1), ("lambda3", "div", -1)):
        vals = []
        for lam in (0.5, 2.0):
            w = LossWeights(**{**base.__dict__, name: lam})
            vals.append(combine(comps, w).values)
        slope = (vals[1] - vals[0]) / 1.5
        assert np.allclose(slope, sign * comps[key].values, rtol=1e-9, atol=1e-12)


def test_has_gradient_wrt_image(rng):
    """Composite objective differentiated all the way to the pixels."""
    from haszsl.model import ModelConfig
    cfg = ModelConfig(hidden_channels=2, channels=3, n_attributes=2, image_size=4)
    params = init_params(2, cfg)
    sem = np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
    img = rng.uniform(0.2, 0.8, size=(3, 4, 4))
    anchor = forward(img, params, sem).global_feat
    w = LossWeights(0.5, 1.0, 0.1)
    f = lambda t: has_objective(forward(t, params, sem), 1, sem[1], anchor, w)
    assert grad_check(f, img + rng.normal(0, 0.05, img.shape)) < 1e-5
