import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monotakd import distill as dl
from monotakd import models as M
from monotakd import train as T
from monotakd.boxes import iou_3d, iou_bev

import small
from oracles import exhaustive_ap


# ---------------------------------------------------------------- schedule

def test_one_cycle_shape():
    total, lr = 101, 1.0
    lrs = [T.one_cycle(k, total, lr) for k in range(total)]
    assert lrs[0] == pytest.approx(lr / 25)
    assert lrs[30] == pytest.approx(lr) and max(lrs) == pytest.approx(lr)
    assert lrs[-1] == pytest.approx(lr / 25)
    assert all(a <= b for a, b in zip(lrs[:31], lrs[1:31]))
    assert all(a >= b for a, b in zip(lrs[30:], lrs[31:]))
    assert T.one_cycle(0, 1, lr) == pytest.approx(lr / 25)


def test_train_config_validation():
    for bad in (dict(stage="x"), dict(mode="KD"), dict(lr_max=0.0), dict(optimizer="rmsprop"),
                dict(warmup_frac=1.0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)


def test_phases():
    assert T.TrainConfig(mode="baseline", epochs=5).phases() == [(5, False, True)]
    assert T.TrainConfig(mode="IMD", epochs=5, feature_epochs=2).phases() == [(2, True, False), (3, True, True)]
    assert T.TrainConfig(stage="ta", epochs=3).phases() == [(3, True, True)]
    assert T.TrainConfig(stage="teacher", epochs=3).phases() == [(3, False, True)]
    assert T.TrainConfig(mode="IMD+CMRD").two_branch and not T.TrainConfig(mode="IMD").two_branch


# ---------------------------------------------------------------- AP



def box(x, y=0.0):
    return np.array([x, y, 0.75, 1.6, 4.0, 1.5, 0.0])


def test_ap_hand_cases():
    gts = [np.array([box(10), box(20)])]
    # hit, miss, hit
    preds = [[(0.9, box(10)), (0.8, box(30)), (0.7, box(20))]]
    assert T.ap_40(preds, gts) == pytest.approx((20 * 1.0 + 20 * 2 / 3) / 40, abs=1e-15)
    assert T.ap_40([[(0.9, box(10)), (0.7, box(20))]], gts) == 1.0
    assert T.ap_40([[]], gts) == 0.0
    assert T.ap_40([[(0.5, box(10))]], [np.zeros((0, 7))]) == T.NO_GT
    # duplicate on the same object is a false positive
    assert T.ap_40([[(0.9, box(10)), (0.8, box(10.1))]], [np.array([box(10)])]) == 1.0
    assert T.ap_40([[(0.8, box(10)), (0.9, box(10.1))]], [np.array([box(10)])]) == 1.0
    # one object per scene, matched only within its own scene
    two = [np.array([box(10)]), np.array([box(20)])]
    assert T.ap_40([[(0.9, box(20))], [(0.8, box(20))]], two) == pytest.approx(exhaustive_ap([0, 1], 2))


def test_ap_five_predictions_three_objects():
    gts = [np.array([box(10), box(20), box(30)])]
    # hit, miss, hit, duplicate, hit
    preds = [[(0.95, box(10)), (0.9, box(40)), (0.8, box(20)), (0.7, box(10.05)), (0.6, box(30))]]
    expected = exhaustive_ap([1, 0, 1, 0, 1], 3)
    assert expected == pytest.approx((13 + 13 * 2 / 3 + 14 * 0.6) / 40, abs=1e-15)
    assert T.ap_40(preds, gts) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_never_drops_when_a_top_scoring_hit_is_added(seed):
    # the new hit covers an object no prediction reaches; a copy of an already
    # matched object would demote its old match to a false positive
    rng = np.random.default_rng(seed)
    gts = [np.array([box(x, y) for x, y in rng.uniform(5, 30, (rng.integers(1, 4), 2))]) for _ in range(2)]
    preds = []
    for g in gts:
        p = [(float(rng.uniform(0, 0.9)), b + np.r_[rng.normal(0, 0.5, 2), np.zeros(5)]) for b in g
             if rng.uniform() < 0.6]
        p += [(float(rng.uniform(0, 0.9)), box(*rng.uniform(5, 30, 2))) for _ in range(rng.integers(0, 3))]
        preds.append(p)
    missed = [(i, j) for i, g in enumerate(gts) for j, b in enumerate(g)
              if all(iou_3d(pb, b) < 0.5 for _, pb in preds[i])]
    if not missed:
        return
    before = T.ap_40(preds, gts)
    i, j = missed[int(rng.integers(len(missed)))]
    preds[i] = [(1.0, gts[i][j].copy())] + preds[i]
    assert T.ap_40(preds, gts) >= before - 1e-15


def test_ap_from_hits_matches_exhaustive_oracle():
    for n in range(1, 8):
        for hits in itertools.product([0, 1], repeat=n):
            for extra in (0, 2):
                n_gt = max(sum(hits), 1) + extra
                assert T.ap_from_hits(hits, n_gt) == pytest.approx(exhaustive_ap(list(hits), n_gt), abs=1e-15)


def test_ap_random_scenes_against_oracle(rng):
    for _ in range(20):
        gts = [np.array([box(x, y) for x, y in rng.uniform(5, 30, (rng.integers(1, 4), 2))]) for _ in range(3)]
        preds = []
        for g in gts:
            p = [(float(rng.uniform()), b + np.r_[rng.normal(0, 0.4, 2), np.zeros(5)]) for b in g]
            p += [(float(rng.uniform()), box(*rng.uniform(5, 30, 2))) for _ in range(2)]
            preds.append(p)
        flat = sorted(((s, i, j, b) for i, p in enumerate(preds) for j, (s, b) in enumerate(p)),
                      key=lambda t: (-t[0], t[1], t[2]))
        used = [set() for _ in gts]
        hits = []
        for s, i, _, b in flat:
            cands = [(iou_bev(b, g), j) for j, g in enumerate(gts[i]) if j not in used[i]]
            best = max(cands, default=(-1.0, -1), key=lambda c: (c[0], -c[1]))
            ok = best[0] >= 0.5
            if ok:
                used[i].add(best[1])
            hits.append(int(ok))
        n_gt = sum(len(g) for g in gts)
        assert T.ap_40(preds, gts, 0.5, iou_bev) == pytest.approx(exhaustive_ap(hits, n_gt), abs=1e-15)


def test_decode_detections_threshold_and_nms():
    from monotakd.models import DetectionSet, encode_box
    centers = np.stack(np.meshgrid(np.arange(4) + 0.5, np.arange(4) + 0.5, indexing="ij"), -1)
    score = np.zeros((4, 4))
    reg = np.zeros((4, 4, 8))
    b = box(2.0, 2.0)
    for (i, j), s in {(1, 1): 0.9, (1, 2): 0.6, (3, 3): 0.05}.items():
        score[i, j] = s
        reg[i, j] = encode_box(b, centers[i, j])
    out = T.decode_detections(DetectionSet(score, reg), centers)
    assert len(out) == 1 and out[0][0] == 0.9 and np.allclose(out[0][1], b)
    assert T.decode_detections(DetectionSet(np.zeros((4, 4)), reg), centers) == []


# ---------------------------------------------------------------- convergence helpers

def test_smooth_and_steps_to_half():
    assert np.allclose(T.smooth([4, 2, 0, 2], 2), [4, 3, 1, 1])
    assert T.steps_to_half([1.0, 0.9, 0.4, 0.1], 1) == 2
    assert T.steps_to_half([1.0, 1.0, 1.0], 5) == T.NOT_REACHED
    assert T.steps_to_half([], 5) == T.NOT_REACHED
    # a single dip is smoothed away
    assert T.steps_to_half([1.0, 0.1, 1.0, 1.0, 1.0], 5) == T.NOT_REACHED


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def data():
    train, ev = small.scenes()
    teacher, ta, frozen = small.frozen(train)
    return train, ev, teacher, ta, frozen


def test_training_is_deterministic(data):
    train = data[0]
    a = T.train_stage(small.tcfg("teacher"), small.MODEL, train, small.CALIB)
    b = T.train_stage(small.tcfg("teacher"), small.MODEL, train, small.CALIB)
    assert T.format_log(a.log) == T.format_log(b.log)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_logged_total_is_exact_sum(data):
    res = T.train_stage(small.tcfg("student", mode="IMD+CMRD", epochs=2), small.MODEL, data[4], small.CALIB)
    for row in res.log:
        _, _, imd, cmrd, cls, reg, total = row
        assert total == imd + cmrd + cls + reg
    # feature-only phase logs no detection terms
    first = res.log[: res.phase_steps[0]]
    assert all(r[4] == 0.0 and r[5] == 0.0 and r[2] > 0 and r[3] > 0 for r in first)
    assert all(r[4] > 0 for r in res.log[res.phase_steps[0]:])


@pytest.mark.parametrize("mode", dl.MODES)
def test_each_mode_fills_its_columns(data, mode):
    res = T.train_stage(small.tcfg("student", mode=mode, epochs=1, feature_epochs=1), small.MODEL, data[4],
                        small.CALIB)
    imd, cmrd = res.column("l_imd"), res.column("l_cmrd")
    assert (imd > 0).all() == (mode.startswith("IMD"))
    assert (cmrd > 0).all() == (mode not in ("baseline", "IMD"))
    if mode == "baseline":
        assert (res.column("l_cls") > 0).all()


def test_distilled_student_needs_targets(data):
    with pytest.raises(ValueError, match="targets"):
        T.train_stage(small.tcfg("student", mode="IMD"), small.MODEL, data[0], small.CALIB)
    with pytest.raises(ValueError, match="empty"):
        T.train_stage(small.tcfg("teacher"), small.MODEL, [], small.CALIB)


def test_loss_decreases_over_fifty_steps(data):
    cfg = small.tcfg("teacher", epochs=17, lr_max=1e-3)  # 3 steps per epoch
    res = T.train_stage(cfg, small.MODEL, data[0], small.CALIB)
    loss = res.column("l_total")
    assert len(loss) >= 50
    assert loss[-5:].mean() < loss[:5].mean()


def test_max_steps_and_callback(data):
    seen = []
    res = T.train_stage(small.tcfg("teacher", max_steps=4), small.MODEL, data[0], small.CALIB,
                        on_step=lambda k, lr, rep: seen.append(k))
    assert seen == [0, 1, 2, 3] and len(res.log) == 4


def test_nan_loss_is_reported_with_step(data):
    bad = [dict(s, heat=np.full_like(s["heat"], np.nan)) for s in data[0]]
    with pytest.raises(FloatingPointError, match="l_cls"):
        T.train_stage(small.tcfg("teacher"), small.MODEL, bad, small.CALIB)


def test_log_and_checkpoint_round_trip(data, tmp_path):
    res = T.train_stage(small.tcfg("teacher", max_steps=3), small.MODEL, data[0], small.CALIB)
    path = T.write_log(tmp_path / "m.tsv", res.log)
    assert T.read_log(path) == [tuple(r) for r in res.log]
    ck = T.save_checkpoint(tmp_path / "t.takd", res.params, "teacher", small.MODEL, res.config)
    back = T.load_checkpoint(ck, small.MODEL, stage="teacher")
    assert all(np.array_equal(back[k], res.params[k]) for k in res.params)
    with pytest.raises(ValueError, match="expected ta"):
        T.load_checkpoint(ck, small.MODEL, stage="ta")
    with pytest.raises(ValueError, match="model configuration"):
        T.load_checkpoint(ck, T.M.ModelConfig(), stage="teacher")
    (tmp_path / "bad.tsv").write_text("x\ty\n")
    with pytest.raises(ValueError):
        T.read_log(tmp_path / "bad.tsv")


def test_evaluate_report(data):
    train, ev, teacher, ta, frozen = data
    st = T.train_stage(small.tcfg("student", mode="IMD", epochs=1), small.MODEL, frozen, small.CALIB).params
    rep = T.evaluate({"teacher": teacher, "ta": ta, "student": st}, ev, small.MODEL, small.CALIB,
                     loss_curve=[1.0, 0.5])
    assert rep.n_scenes == len(ev) and 0.0 <= rep.ap_3d <= 1.0 and 0.0 <= rep.ap_bev <= 1.0
    assert rep.gap_ta_teacher >= 0 and rep.loss_curve == [1.0, 0.5]
    assert T.EvalReport.from_json(rep.to_json()) == rep


def test_teacher_scores_perfectly_against_its_own_predictions(data):
    teacher = data[2]
    centers = small.MODEL.lidar_grid.bev_centers()
    preds = []
    for s in data[1]:
        det = M.teacher_forward(teacher, s["voxels"], small.MODEL)["det"]
        preds.append(T.decode_detections(det, centers, score_thresh=0.0))
    gts = [np.array([b for _, b in p]).reshape(-1, 7) for p in preds]
    assert sum(len(g) for g in gts) > 0
    assert T.ap_40(preds, gts) == 1.0
    assert T.ap_40(preds, gts, iou_fn=iou_bev) == 1.0


def test_convergence_compare_runs_both_modes(data):
    base = small.tcfg("student", epochs=4, feature_epochs=4)
    out = T.convergence_compare(data[4], small.MODEL, small.CALIB, base, budget=6, window=2)
    assert set(out) == {"IMD", "CMD"}
    assert all(v == T.NOT_REACHED or 0 <= v < 6 for v in out.values())
    assert T.convergence_compare(data[4], small.MODEL, small.CALIB, base, budget=0) == \
        {"IMD": T.NOT_REACHED, "CMD": T.NOT_REACHED}


def test_loss_weights_scale_logged_parts(data):
    kw = dict(mode="IMD+CMRD", max_steps=1, feature_epochs=0)
    one = T.train_stage(small.tcfg("student", **kw), small.MODEL, data[4], small.CALIB).log[0]
    w = T.train_stage(small.tcfg("student", w_imd=2.0, w_cmrd=0.0, w_logit=0.5, **kw),
                      small.MODEL, data[4], small.CALIB).log[0]
    assert w[2] == pytest.approx(2 * one[2], rel=1e-12) and w[3] == 0.0
    assert w[4] == pytest.approx(0.5 * one[4], rel=1e-12) and w[5] == pytest.approx(0.5 * one[5], rel=1e-12)
    assert w[6] == w[2] + w[3] + w[4] + w[5]
    with pytest.raises(ValueError):
        T.TrainConfig(w_imd=-1.0)


def test_depth_supervision_toggle_adds_to_regression_column(data):
    kw = dict(mode="baseline", max_steps=2)
    off = T.train_stage(small.tcfg("student", **kw), small.MODEL, data[0], small.CALIB)
    on = T.train_stage(small.tcfg("student", depth_supervision=True, **kw), small.MODEL, data[0], small.CALIB)
    assert on.log[0][4] == off.log[0][4]  # same initial classification loss
    assert on.log[0][5] > off.log[0][5]
