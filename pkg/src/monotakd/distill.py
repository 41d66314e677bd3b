"""Distillation objectives and the detection losses they are combined with.

Feature losses take the student map as a tape tensor and the target as a
plain array, so nothing upstream of the target ever receives a gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

log = logging.getLogger(__name__)

MODES = ("baseline", "CMD", "IMD", "IMD+CMD", "IMD+CMRD")
SCORE_EPS = 1e-6


@dataclass(frozen=True)
class MaskConfig:
    keep_quantile: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.keep_quantile <= 1.0:
            raise ValueError(f"keep_quantile must lie in (0, 1], got {self.keep_quantile}")


def _target(x) -> np.ndarray:
    return x.numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def mse(pred, target) -> Tensor:
    """Mean squared error with ``target`` held fixed."""
    pred = as_tensor(pred)
    target = _target(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return ad.mean(ad.square(ad.sub(pred, target)))


def imd_loss(f_s1, f_ta) -> Tensor:
    """Student branch-1 BEV vs the camera assistant's BEV."""
    return mse(f_s1, f_ta)


def cmd_loss(f_student, f_t) -> Tensor:
    """Student BEV vs the full LiDAR teacher BEV."""
    return mse(f_student, f_t)


def cmrd_loss(f_s2_star, f_res) -> Tensor:
    """Refined student branch-2 BEV vs the masked teacher/assistant residual."""
    return mse(f_s2_star, f_res)


def keep_count(q: float, n: int) -> int:
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    return min(n, max(1, math.ceil(round(q * n, 9))))


def residual_mask(magnitude, q: float) -> np.ndarray:
    """Boolean ``[H,W]`` mask keeping the ``ceil(q*H*W)`` largest cells.

    Ties go to the lower row-major index.
    """
    m = np.asarray(magnitude, dtype=np.float64)
    k = keep_count(q, m.size)
    order = np.argsort(-m.ravel(), kind="stable")
    mask = np.zeros(m.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(m.shape)


def residual_features(f_t, f_ta, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    """``|F_T - F_TA|`` with low-magnitude BEV cells zeroed across all channels."""
    a, b = _target(f_t), _target(f_ta)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    mask = residual_mask(diff.mean(axis=-1), cfg.keep_quantile)
    return diff * mask[..., None]


def qfl(score, target, beta: float = 2.0) -> Tensor:
    """Quality focal loss of predicted probabilities against soft targets."""
    s = ad.clamp(as_tensor(score), SCORE_EPS, 1.0 - SCORE_EPS)
    y = _target(target)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {y.shape}")
    bce = ad.add(ad.mul(y, ad.log(s)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, s))))
    focal = ad.pow_abs(ad.sub(y, s), beta)
    return ad.neg(ad.mean(ad.mul(focal, bce)))


def smooth_l1(pred, target, mask=None) -> Tensor:
    """Huber (delta 1) loss averaged over the selected cells and all channels.

    ``pred`` and ``target`` are ``[..., K]``; ``mask`` selects cells over the
    leading axes. An empty selection gives 0.
    """
    pred = as_tensor(pred)
    target = _target(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        log.warning("smooth_l1: no foreground cells; regression term is 0")
        return ad.mul(ad.sum_(pred), 0.0)
    idx = np.nonzero(mask)
    x = ad.sub(pred[idx], target[idx])
    a = ad.abs_(x)
    m = ad.clamp(a, 0.0, 1.0)
    # 0.5 m^2 + (a - m) is 0.5 x^2 below 1 and |x| - 0.5 above
    return ad.mean(ad.add(ad.mul(ad.square(m), 0.5), ad.sub(a, m)))


def depth_loss(depth_prob, gt_dist) -> Tensor:
    """Cross-entropy of predicted bin probabilities against GT bins, averaged
    over pixels that have a valid depth (sky and out-of-range pixels skipped)."""
    gt = _target(gt_dist)
    valid = gt.sum(axis=-1) > 0
    if not valid.any():
        return ad.mul(ad.sum_(depth_prob), 0.0)
    p = ad.clamp(as_tensor(depth_prob)[np.nonzero(valid)], SCORE_EPS, 1.0)
    return ad.div(ad.neg(ad.sum_(ad.mul(gt[valid], ad.log(p)))), float(valid.sum()))


# ---------------------------------------------------------------- detection targets

def gt_targets(boxes, bev_centers, cell: float, sigma: float = 1.0, fg_thresh: float = 0.5):
    """Gaussian centre heatmap, encoded box targets and foreground mask.

    ``bev_centers`` is ``[H,W,2]`` in metres; ``sigma`` is in cells and
    measured from the continuous box centre. Each cell regresses the box whose
    Gaussian is largest there.
    """
    from .models import encode_box, N_REG

    H, W = bev_centers.shape[:2]
    heat = np.zeros((H, W))
    reg = np.zeros((H, W, N_REG))
    owner = np.full((H, W), -1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    for i, b in enumerate(boxes):
        d2 = ((bev_centers[..., 0] - b[0]) ** 2 + (bev_centers[..., 1] - b[1]) ** 2) / cell ** 2
        g = np.exp(-0.5 * d2 / sigma ** 2)
        take = g > heat
        heat[take] = g[take]
        owner[take] = i
    for i, b in enumerate(boxes):
        sel = owner == i
        if sel.any():
            enc = encode_box(b, (0.0, 0.0))
            reg[sel] = enc
            reg[sel, 0] = b[0] - bev_centers[sel][:, 0]
            reg[sel, 1] = b[1] - bev_centers[sel][:, 1]
    return heat, reg, heat > fg_thresh


def positive_scale(fg) -> float:
    """Cells per positive: turns a per-cell mean into a per-positive sum."""
    fg = np.asarray(fg, dtype=bool)
    return fg.size / max(int(fg.sum()), 1)


def detection_loss(det, heat, reg_target, fg, beta: float = 2.0):
    """``(l_cls, l_reg)`` against ground truth for a :class:`~monotakd.models.DetectionSet`.

    The classification term is normalised by the number of foreground cells
    rather than all cells, so sparse scenes still produce a usable signal.
    """
    cls = ad.mul(qfl(det.score, heat, beta), positive_scale(fg))
    return cls, smooth_l1(det.reg, reg_target, fg)


def logit_loss(det, teacher_score, teacher_reg, fg_thresh: float = 0.5, beta: float = 2.0):
    """Teacher-prediction targets: QFL on scores, SmoothL1 on teacher-confident cells."""
    ts = _target(teacher_score)
    fg = ts > fg_thresh
    cls = ad.mul(qfl(det.score, ts, beta), positive_scale(fg))
    return cls, smooth_l1(det.reg, teacher_reg, fg)


# ---------------------------------------------------------------- total

@dataclass
class LossReport:
    l_imd: float
    l_cmrd: float
    l_cls: float
    l_reg: float
    l_logit: float
    l_total: float
    total: Tensor = None  # differentiable l_total

    def row(self) -> tuple:
        return (self.l_imd, self.l_cmrd, self.l_cls, self.l_reg, self.l_total)


def total_loss(l_imd=None, l_cmrd=None, l_cls=None, l_reg=None) -> LossReport:
    """Unweighted sum ``l_imd + l_cmrd + l_cls + l_reg``, accumulated left to
    right so the logged total equals the plain float sum of the logged parts.

    Missing parts are exact zeros and carry no gradient. A NaN part raises
    :class:`FloatingPointError` naming it.
    """
    parts = {"l_imd": l_imd, "l_cmrd": l_cmrd, "l_cls": l_cls, "l_reg": l_reg}
    tens = {}
    for name, v in parts.items():
        if v is None:
            v = 0.0
        t = v if isinstance(v, Tensor) else as_tensor(np.float64(v))
        if not np.all(np.isfinite(t.numpy())):
            raise FloatingPointError(f"loss part {name} is not finite ({float(t.numpy())})")
        tens[name] = t
    logit = ad.add(tens["l_cls"], tens["l_reg"])
    total = ad.add(ad.add(ad.add(tens["l_imd"], tens["l_cmrd"]), tens["l_cls"]), tens["l_reg"])
    vals = {k: float(t.numpy()) for k, t in tens.items()}
    return LossReport(vals["l_imd"], vals["l_cmrd"], vals["l_cls"], vals["l_reg"],
                      float(logit.numpy()), float(total.numpy()), total)
