import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, logm_eig, rel_close
from rangeseg.losses import (
    AllIgnoredWarning,
    LossConfig,
    covariance,
    cross_entropy,
    focal_loss,
    geodesic_loss,
    hybrid_intensity_loss,
    intensity_bins,
    l2_intensity_loss,
)
from rangeseg.tensor import Tensor, softmax


def _probs(rng, shape):
    z = rng.normal(size=shape)
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    return e / e.sum(axis=-3, keepdims=True)


def test_focal_single_pixel_closed_form():
    probs = np.array([0.5, 0.5, 0.0, 0.0]).reshape(4, 1, 1)
    loss = focal_loss(Tensor(probs), np.zeros((1, 1), int), np.zeros((1, 1), int), gamma=2.0)
    assert abs(float(loss.data) - 0.25 * math.log(2)) < 1e-12


def test_focal_perfect_prediction_is_zero():
    labels = np.array([[0, 1], [2, 3]])
    probs = np.moveaxis(np.eye(4)[labels], -1, 0)
    assert float(focal_loss(Tensor(probs), labels, np.zeros_like(labels)).data) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_gamma_zero_is_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    probs = _probs(rng, (2, 4, 3, 5))
    labels = rng.integers(0, 4, (2, 3, 5))
    ignore = (rng.random((2, 3, 5)) < 0.3).astype(np.uint8)
    ignore[0, 0, 0] = 0
    pt = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    valid = ignore == 0
    ce = float(-np.log(pt[valid]).mean())
    got = float(focal_loss(Tensor(probs), labels, ignore, gamma=0.0).data)
    assert abs(got - ce) < 1e-12
    assert abs(float(cross_entropy(Tensor(probs), labels, ignore).data) - ce) < 1e-12


def test_focal_all_ignored_warns_and_returns_zero():
    probs = Tensor(np.full((4, 2, 2), 0.25))
    with pytest.warns(AllIgnoredWarning):
        loss = focal_loss(probs, np.zeros((2, 2), int), np.ones((2, 2), int))
    assert float(loss.data) == 0.0


def test_focal_floor_keeps_loss_finite():
    probs = np.array([0.0, 1.0, 0.0, 0.0]).reshape(4, 1, 1)
    loss = float(focal_loss(Tensor(probs), np.zeros((1, 1), int), np.zeros((1, 1), int), gamma=0.0).data)
    assert loss == pytest.approx(-math.log(1e-12))


@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.floats(0.0, 5.0))
def test_focal_monotone_in_pt(p, dp, gamma):
    def f(pt):
        probs = np.array([pt, 1 - pt, 0, 0]).reshape(4, 1, 1)
        return float(focal_loss(Tensor(probs), np.zeros((1, 1), int), np.zeros((1, 1), int), gamma).data)
    assert f(p + dp) <= f(p) + 1e-15


@given(st.floats(0.51, 0.999), st.floats(0.1, 5.0))
def test_focal_below_cross_entropy_for_confident_pixels(p, gamma):
    probs = Tensor(np.array([p, 1 - p, 0, 0]).reshape(4, 1, 1))
    z = np.zeros((1, 1), int)
    assert float(focal_loss(probs, z, z, gamma).data) < float(cross_entropy(probs, z, z).data)


def test_focal_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 4, 3, 4))
    labels = rng.integers(0, 4, (2, 3, 4))
    ignore = (rng.random((2, 3, 4)) < 0.2).astype(np.uint8)

    def f():
        return float(focal_loss(softmax(Tensor(logits), axis=1), labels, ignore).data)

    t = Tensor(logits, requires_grad=True)
    focal_loss(softmax(t, axis=1), labels, ignore).backward()
    (num,) = central_diff(f, [logits])
    ok, worst = rel_close(t.grad, num)
    assert ok, worst


def test_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.gamma, cfg.lam, cfg.n_bins) == (2.0, 10.0, 10)
    np.testing.assert_allclose(cfg.references, np.arange(10) * 0.1 + 0.05)
    assert np.all(np.diff(cfg.edges) > 0) and cfg.edges[0] == 0 and cfg.edges[-1] == 1
    for bad in (dict(gamma=-1), dict(lam=-0.5), dict(epsilon_cov=0), dict(regression_bin="best")):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_binning_arithmetic():
    edges = LossConfig().edges
    assert intensity_bins(np.array([0.17]), edges)[0] == 1
    assert list(intensity_bins(np.array([0.0, 0.1, 0.999, 1.0]), edges)) == [0, 1, 9, 9]


def _hybrid(logits, dev, target, mask, cfg=None):
    return float(hybrid_intensity_loss(Tensor(logits), Tensor(dev), target, mask, cfg or LossConfig()).data)


def test_hybrid_uniform_logits_give_ln10():
    target = np.array([[[0.17, 0.93]]])
    refs = LossConfig().references
    dev = np.zeros((1, 10, 1, 2))
    # zero regression error: deviation channel of the true bin equals target - reference
    dev[0, 1, 0, 0] = 0.17 - refs[1]
    dev[0, 9, 0, 1] = 0.93 - refs[9]
    got = _hybrid(np.zeros((1, 10, 1, 2)), dev, target, np.ones((1, 1, 2)))
    assert abs(got - math.log(10)) < 1e-12


def test_hybrid_regression_term_uses_true_bin():
    # 0.17 lives in bin 1 whose reference is 0.15: the regression target is +0.02
    logits = np.full((1, 10, 1, 1), -50.0)
    logits[0, 1] = 50.0
    dev = np.zeros((1, 10, 1, 1))
    dev[0, 1] = 0.02
    assert _hybrid(logits, dev, np.array([[[0.17]]]), np.ones((1, 1, 1))) < 1e-12
    dev[0, 1] = 0.0
    assert _hybrid(logits, dev, np.array([[[0.17]]]), np.ones((1, 1, 1))) == pytest.approx(0.02 ** 2, abs=1e-12)
    # other bins' deviations carry no regression gradient
    d = Tensor(np.zeros((1, 10, 1, 1)), requires_grad=True)
    hybrid_intensity_loss(Tensor(logits), d, np.array([[[0.17]]]), np.ones((1, 1, 1)), LossConfig()).backward()
    assert np.count_nonzero(d.grad) == 1 and d.grad[0, 1, 0, 0] != 0


def test_hybrid_exact_fit_is_zero_and_masked_pixels_excluded():
    logits = np.full((1, 10, 1, 2), -60.0)
    logits[0, 4, 0, 0] = 60.0
    target = np.array([[[0.45, 0.5]]])
    mask = np.array([[[1, 0]]])
    assert _hybrid(logits, np.zeros((1, 10, 1, 2)), target, mask) < 1e-12


def test_hybrid_rejects_out_of_range_targets():
    with pytest.raises(ValueError):
        _hybrid(np.zeros((1, 10, 1, 1)), np.zeros((1, 10, 1, 1)), np.array([[[1.2]]]), np.ones((1, 1, 1)))
    # masked pixels are not validated
    _hybrid(np.zeros((1, 10, 1, 2)), np.zeros((1, 10, 1, 2)), np.array([[[0.5, 1.2]]]), np.array([[[1, 0]]]))


def test_hybrid_predicted_bin_switch():
    logits = np.zeros((1, 10, 1, 1))
    logits[0, 3] = 5.0
    dev = np.zeros((1, 10, 1, 1))
    cfg = LossConfig(regression_bin="predicted")
    refs = cfg.references
    ce = -np.log(np.exp(0) / (np.exp(5) + 9))
    got = _hybrid(logits, dev, np.array([[[0.17]]]), np.ones((1, 1, 1)), cfg)
    assert got == pytest.approx(ce + (refs[3] - 0.17) ** 2, abs=1e-12)


def test_hybrid_and_l2_gradients():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 10, 2, 3))
    dev = rng.normal(scale=0.05, size=(2, 10, 2, 3))
    target = rng.random((2, 2, 3))
    mask = (rng.random((2, 2, 3)) < 0.8).astype(np.uint8)
    cfg = LossConfig()
    tl, td = Tensor(logits, requires_grad=True), Tensor(dev, requires_grad=True)
    hybrid_intensity_loss(tl, td, target, mask, cfg).backward()
    nl, nd = central_diff(lambda: _hybrid(logits, dev, target, mask), [logits, dev])
    assert rel_close(tl.grad, nl)[0] and rel_close(td.grad, nd)[0]

    pred = rng.random((2, 1, 2, 3))
    tp = Tensor(pred, requires_grad=True)
    l2_intensity_loss(tp, target, mask).backward()
    (npred,) = central_diff(lambda: float(l2_intensity_loss(Tensor(pred), target, mask).data), [pred])
    assert rel_close(tp.grad, npred)[0]


def test_covariance_matches_numpy():
    x = np.random.default_rng(0).normal(size=(20, 4))
    np.testing.assert_allclose(covariance(Tensor(x), 1e-5).data, np.cov(x, rowvar=False) + 1e-5 * np.eye(4), atol=1e-13)


def test_geodesic_identical_batches_zero():
    x = np.random.default_rng(1).normal(size=(50, 6))
    assert float(geodesic_loss(Tensor(x), Tensor(x.copy())).data) < 1e-10


def test_geodesic_scalar_closed_form():
    eps = 1e-5
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(40, 1))
    xt = rng.normal(size=(40, 1))
    # rescale so the unbiased variances hit the target values exactly
    xs = (xs - xs.mean()) / xs.std(ddof=1) * math.sqrt(1.0 - eps)
    xt = (xt - xt.mean()) / xt.std(ddof=1) * math.sqrt(math.e ** 2 - eps)
    got = float(geodesic_loss(Tensor(xs), Tensor(xt), eps).data)
    cs = np.cov(xs, rowvar=False, ddof=1).reshape(1, 1) + eps
    ct = np.cov(xt, rowvar=False, ddof=1).reshape(1, 1) + eps
    oracle = float(((logm_eig(cs) - logm_eig(ct)) ** 2).sum() / 4)
    assert abs(got - oracle) < 1e-8
    assert abs(got - 1.0) < 1e-8


def test_geodesic_matches_eig_oracle_and_is_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(30, 5)), rng.normal(scale=2.0, size=(25, 5)) + 1
    eps = 1e-5
    ca = np.cov(a, rowvar=False) + eps * np.eye(5)
    cb = np.cov(b, rowvar=False) + eps * np.eye(5)
    oracle = ((logm_eig(ca) - logm_eig(cb)) ** 2).sum() / (4 * 25)
    ab = float(geodesic_loss(Tensor(a), Tensor(b), eps).data)
    ba = float(geodesic_loss(Tensor(b), Tensor(a), eps).data)
    assert abs(ab - oracle) < 1e-10
    assert ab == pytest.approx(ba, abs=1e-14) and ab > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_geodesic_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(30, 4)), rng.normal(size=(30, 4)) * rng.uniform(0.5, 2, 4)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    base = float(geodesic_loss(Tensor(a), Tensor(b)).data)
    rot = float(geodesic_loss(Tensor(a @ q), Tensor(b @ q)).data)
    assert abs(base - rot) < 1e-8


def test_geodesic_gradient_both_inputs():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(12, 3)), rng.normal(size=(10, 3)) * 1.5
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    geodesic_loss(ta, tb).backward()
    na, nb = central_diff(lambda: float(geodesic_loss(Tensor(a), Tensor(b)).data), [a, b])
    assert rel_close(ta.grad, na)[0] and rel_close(tb.grad, nb)[0]


def test_geodesic_rejects_bad_shapes():
    with pytest.raises(ValueError):
        geodesic_loss(Tensor(np.zeros((5, 3))), Tensor(np.zeros((5, 4))))
    with pytest.raises(ValueError):
        geodesic_loss(Tensor(np.zeros((1, 3))), Tensor(np.zeros((5, 3))))


def test_geodesic_rejects_non_finite_features():
    a = np.random.default_rng(0).normal(size=(10, 2))
    b = a.copy()
    b[0, 0] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises((FloatingPointError, ValueError, np.linalg.LinAlgError)):
            geodesic_loss(Tensor(a), Tensor(b))
