import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monotakd import autodiff as ad
from monotakd import distill as dl
from monotakd.gradcheck import grad_check
from monotakd.models import DetectionSet
from oracles import brute_mask




def test_mask_matches_quantile_oracle_on_random_grids(rng):
    for _ in range(100):
        H, W = rng.integers(1, 12, size=2)
        q = float(rng.uniform(0.01, 1.0))
        mag = rng.uniform(size=(H, W))
        m = dl.residual_mask(mag, q)
        assert m.sum() == max(1, math.ceil(q * H * W - 1e-9))
        assert np.array_equal(m, brute_mask(mag, q))


def test_mask_keep_count_examples():
    assert dl.keep_count(0.3, 1024) == 308
    assert dl.keep_count(0.25, 16) == 4
    assert dl.keep_count(0.3, 10) == 3  # 0.3*10 is 3.0000000000000004 in floats
    assert dl.keep_count(1.0, 7) == 7
    assert dl.keep_count(1e-6, 5) == 1


def test_mask_on_ramp_keeps_top_cells():
    mag = np.arange(1, 17, dtype=float).reshape(4, 4)
    m = dl.residual_mask(mag, 0.25)
    assert np.flatnonzero(m).tolist() == [12, 13, 14, 15]


def test_mask_ties_go_to_lower_index():
    m = dl.residual_mask(np.zeros((3, 3)), 0.3)
    assert np.flatnonzero(m).tolist() == [0, 1, 2]


def test_mask_config_validation():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            dl.MaskConfig(bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_identical_features_give_zero_residual(seed, q):
    f = np.random.default_rng(seed).normal(size=(6, 5, 3))
    assert not dl.residual_features(f, f.copy(), dl.MaskConfig(q)).any()


def test_residual_is_masked_abs_difference(rng):
    a, b = rng.normal(size=(8, 8, 4)), rng.normal(size=(8, 8, 4))
    r = dl.residual_features(a, b, dl.MaskConfig(0.5))
    kept = np.abs(r).sum(-1) > 0
    assert kept.sum() == 32
    assert np.array_equal(r[kept], np.abs(a - b)[kept])
    with pytest.raises(ValueError):
        dl.residual_features(a, b[:, :4])


def test_feature_losses_are_mse_with_detached_target(rng):
    a, b = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    for fn in (dl.imd_loss, dl.cmd_loss, dl.cmrd_loss, dl.mse):
        assert fn(a, b).item() == pytest.approx(np.mean((a - b) ** 2), abs=1e-15)
    tape = ad.Tape()
    x, y = tape.param("x", a), tape.param("y", b)
    g = tape.param_grads(dl.imd_loss(x, y))
    assert "y" not in g or not np.any(g["y"])
    assert np.allclose(g["x"], 2 * (a - b) / a.size)


def test_qfl_closed_form():
    assert dl.qfl(np.array([0.5]), np.array([1.0])).item() == pytest.approx(0.25 * math.log(2), abs=1e-9)
    assert dl.qfl(np.array([0.5]), np.array([0.5])).item() == pytest.approx(0.0, abs=1e-12)
    s, y = 0.2, 0.7
    expect = -abs(y - s) ** 2 * (y * math.log(s) + (1 - y) * math.log(1 - s))
    assert dl.qfl(np.array([s]), np.array([y])).item() == pytest.approx(expect, abs=1e-9)
    # clamped away from log(0)
    assert math.isfinite(dl.qfl(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item())


def test_smooth_l1_closed_form():
    z = np.zeros((1, 1))
    assert dl.smooth_l1(np.array([[0.0]]), z).item() == 0.0
    assert dl.smooth_l1(np.array([[0.5]]), z).item() == pytest.approx(0.125, abs=1e-9)
    assert dl.smooth_l1(np.array([[2.0]]), z).item() == pytest.approx(1.5, abs=1e-9)
    assert dl.smooth_l1(np.array([[-2.0]]), z).item() == pytest.approx(1.5, abs=1e-9)


def test_smooth_l1_mask_and_empty(rng, caplog):
    pred, tgt = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 2] = True
    x = np.abs(pred[1, 2] - tgt[1, 2])
    expect = np.mean(np.where(x < 1, 0.5 * x ** 2, x - 0.5))
    assert dl.smooth_l1(pred, tgt, mask).item() == pytest.approx(expect, abs=1e-12)
    assert dl.smooth_l1(pred, tgt, np.zeros((3, 3), bool)).item() == 0.0
    assert "no foreground" in caplog.text


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(size=(4, 4))
    s = rng.uniform(0.05, 0.95, size=(4, 4))
    assert grad_check(lambda t: dl.qfl(t, y), s).passed
    tgt = rng.normal(size=(4, 4, 3))
    pred = tgt + rng.choice([-1, 1], size=tgt.shape) * rng.uniform(0.1, 3.0, size=tgt.shape)
    rep = grad_check(lambda t: dl.smooth_l1(t, tgt), pred, rel_tol=1e-4)
    assert rep.passed
    f = rng.normal(size=(4, 4, 3))
    for fn in (dl.imd_loss, dl.cmd_loss, dl.cmrd_loss):
        assert grad_check(lambda t: fn(t, f), rng.normal(size=(4, 4, 3))).passed


def test_gt_targets_peak_and_regression():
    cx, cy = np.meshgrid(np.arange(8) + 0.5, np.arange(8) - 3.5, indexing="ij")
    centers = np.stack([cx, cy], -1)
    box = np.array([3.5, 0.5, 0.8, 1.6, 4.0, 1.5, 0.2])
    heat, reg, fg = dl.gt_targets(box[None], centers, 1.0)
    assert heat[3, 4] == 1.0 and fg[3, 4] and fg.sum() == 5  # the centre and its 4 neighbours
    assert np.allclose(reg[fg][:, 0] + centers[fg][:, 0], 3.5)
    assert np.allclose(reg[3, 4, 2:], [0.8, np.log(1.6), np.log(4.0), np.log(1.5), np.sin(0.2), np.cos(0.2)])
    heat, _, fg = dl.gt_targets(np.zeros((0, 7)), centers, 1.0)
    assert not heat.any() and not fg.any()


def test_positive_scale():
    assert dl.positive_scale(np.zeros((4, 4), bool)) == 16.0
    fg = np.zeros((4, 4), bool)
    fg[0, :2] = True
    assert dl.positive_scale(fg) == 8.0


def test_logit_loss_uses_teacher_confident_cells(rng):
    score = ad.as_tensor(rng.uniform(0.1, 0.9, size=(4, 4)))
    reg = ad.as_tensor(rng.normal(size=(4, 4, 8)))
    det = DetectionSet(score, reg)
    ts = np.zeros((4, 4))
    ts[2, 2] = 0.9
    tr = rng.normal(size=(4, 4, 8))
    cls, r = dl.logit_loss(det, ts, tr)
    assert cls.item() == pytest.approx(dl.qfl(score, ts).item() * 16.0)
    assert r.item() == pytest.approx(dl.smooth_l1(reg, tr, ts > 0.5).item())


def test_total_is_left_to_right_sum(rng):
    for _ in range(200):
        v = [float(x) for x in rng.uniform(0, 3, 4) * 10.0 ** rng.integers(-6, 2, 4)]
        rep = dl.total_loss(*v)
        assert rep.l_total == v[0] + v[1] + v[2] + v[3]
        assert rep.l_logit == v[2] + v[3]
    rep = dl.total_loss(l_cls=1.5)
    assert rep.row() == (0.0, 0.0, 1.5, 0.0, 1.5)


def test_total_rejects_nan():
    with pytest.raises(FloatingPointError, match="l_cmrd"):
        dl.total_loss(1.0, float("nan"), 0.0, 0.0)


def test_depth_loss_cross_entropy(rng):
    gt = np.zeros((2, 3, 4))
    gt[0, 0, 1] = 1.0
    gt[1, 2, 3] = 1.0
    p = ad.softmax(rng.normal(size=(2, 3, 4))).numpy()
    expect = -(np.log(p[0, 0, 1]) + np.log(p[1, 2, 3])) / 2
    assert dl.depth_loss(p, gt).item() == pytest.approx(expect, abs=1e-12)
    assert dl.depth_loss(p, np.zeros_like(gt)).item() == 0.0
    assert grad_check(lambda t: dl.depth_loss(ad.softmax(t), gt), rng.normal(size=(2, 3, 4))).passed


def test_total_example_values():
    rep = dl.total_loss(0.1, 0.2, 0.3, 0.4)
    assert rep.l_total == 1.0 and rep.l_logit == 0.7
    assert dl.total_loss().l_total == 0.0
