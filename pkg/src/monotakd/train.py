"""Staged training (teacher, assistant, student), the one-cycle schedule,
detection decoding and AP@40 evaluation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from . import distill as dl
from . import models as M
from .boxes import iou_3d, iou_bev, nms
from .geometry import CameraCalib, voxelize

log = logging.getLogger(__name__)

STAGES = ("teacher", "ta", "student")
NOT_REACHED = -1  # steps-to-half sentinel
NO_GT = -1.0  # AP sentinel when the evaluation set has no boxes
LOG_COLUMNS = ("step", "lr", "l_imd", "l_cmrd", "l_cls", "l_reg", "l_total")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "student"
    epochs: int = 30
    batch_size: int = 4
    lr_max: float = 2e-3
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    clip_norm: float = 10.0
    seed: int = 0
    mode: str = "IMD+CMRD"
    feature_epochs: int = 10  # feature-only phase before logits join (distilled students)
    keep_quantile: float = 0.3
    qfl_beta: float = 2.0
    fg_thresh: float = 0.5
    heat_sigma: float = 1.0
    ta_align: bool = True  # assistant also regresses the teacher BEV map
    depth_supervision: bool = False  # student depth cross-entropy against GT bins, logged under l_reg
    w_imd: float = 1.0  # loss weights for ablation experiments; logged parts are weighted
    w_cmrd: float = 1.0
    w_logit: float = 1.0  # scales both l_cls and l_reg
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.mode not in dl.MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {dl.MODES}")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.warmup_frac < 1 or self.div_factor <= 1:
            raise ValueError("warmup_frac must lie in (0,1) and div_factor exceed 1")
        if min(self.w_imd, self.w_cmrd, self.w_logit) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def two_branch(self) -> bool:
        return self.mode in ("IMD+CMD", "IMD+CMRD")

    def phases(self) -> list:
        """``[(epochs, with_features, with_logits)]`` for this stage and mode."""
        if self.stage != "student" or self.mode == "baseline":
            return [(self.epochs, self.stage == "ta" and self.ta_align, True)]
        fe = min(self.feature_epochs, self.epochs)
        return [p for p in [(fe, True, False), (self.epochs - fe, True, True)] if p[0] > 0]


def one_cycle(step: int, total: int, lr_max: float, warmup_frac: float = 0.3, div_factor: float = 25.0) -> float:
    """Linear warm-up from ``lr_max/div`` to ``lr_max``, then cosine back to ``lr_max/div``."""
    lo = lr_max / div_factor
    if total <= 1:
        return lo
    peak = warmup_frac * (total - 1)
    if step <= peak:
        return lo + (lr_max - lo) * (step / peak if peak > 0 else 1.0)
    t = (step - peak) / (total - 1 - peak)
    return lo + (lr_max - lo) * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


# ---------------------------------------------------------------- data preparation

def prepare(records: Sequence[Mapping], mcfg: M.ModelConfig, heat_sigma: float = 1.0,
            fg_thresh: float = 0.5) -> list:
    """Per-scene inputs and ground-truth targets shared by every stage."""
    centers = mcfg.lidar_grid.bev_centers()
    cell = float(mcfg.lidar_grid.cell[0])
    out = []
    for r in records:
        heat, reg, fg = dl.gt_targets(r["boxes"], centers, cell, heat_sigma, fg_thresh)
        out.append({
            "image": np.asarray(r["image"]), "depth": np.asarray(r["depth"]),
            "depth_dist": M.gt_depth_distribution(r["depth"], mcfg.bins, mcfg.depth_smoothing),
            "voxels": voxelize(r["points"], mcfg.lidar_grid),
            "boxes": np.asarray(r["boxes"]).reshape(-1, 7),
            "heat": heat, "reg": reg, "fg": fg,
        })
    return out


def frozen_targets(prepared: Sequence[dict], teacher: Mapping, ta: Mapping, mcfg: M.ModelConfig,
                   calib: CameraCalib, keep_quantile: float = 0.3) -> list:
    """Attach teacher and assistant outputs (plain arrays) to prepared scenes."""
    mask = dl.MaskConfig(keep_quantile)
    out = []
    for s in prepared:
        t = M.teacher_forward(teacher, s["voxels"], mcfg)
        a = M.ta_forward(ta, s["image"], s["depth_dist"], calib, mcfg)
        f_t, f_ta = t["bev"].numpy(), a["bev"].numpy()
        out.append({**s, "f_t": f_t, "f_ta": f_ta, "t_score": t["det"].score.numpy(),
                    "t_reg": t["det"].reg.numpy(), "f_res": dl.residual_features(f_t, f_ta, mask)})
    return out


# ---------------------------------------------------------------- per-scene objectives

def _scene_parts(cfg: TrainConfig, mcfg: M.ModelConfig, P, s: dict, calib, features: bool, logits: bool):
    """``{part: tensor}`` for one scene; absent keys are exact zeros."""
    parts = {}
    if cfg.stage == "teacher":
        det = M.teacher_forward(P, s["voxels"], mcfg)["det"]
        parts["l_cls"], parts["l_reg"] = dl.detection_loss(det, s["heat"], s["reg"], s["fg"], cfg.qfl_beta)
        return parts
    if cfg.stage == "ta":
        out = M.ta_forward(P, s["image"], s["depth_dist"], calib, mcfg)
        if features:
            parts["l_cmrd"] = dl.mse(out["bev"], s["f_t"])
        parts["l_cls"], parts["l_reg"] = dl.detection_loss(out["det"], s["heat"], s["reg"], s["fg"], cfg.qfl_beta)
        return parts
    out = M.student_forward(P, s["image"], calib, mcfg, two_branch=cfg.two_branch)
    mode = cfg.mode
    if mode == "baseline":
        parts["l_cls"], parts["l_reg"] = dl.detection_loss(out["det"], s["heat"], s["reg"], s["fg"], cfg.qfl_beta)
        return _with_depth(cfg, parts, out, s)
    if features:
        if mode == "CMD":
            parts["l_cmrd"] = dl.cmd_loss(out["bev1"], s["f_t"])
        else:
            parts["l_imd"] = dl.imd_loss(out["bev1"], s["f_ta"])
        if mode == "IMD+CMD":
            parts["l_cmrd"] = dl.cmd_loss(out["bev2_star"], s["f_t"])
        elif mode == "IMD+CMRD":
            parts["l_cmrd"] = dl.cmrd_loss(out["bev2_star"], s["f_res"])
    if logits:
        parts["l_cls"], parts["l_reg"] = dl.logit_loss(out["det"], s["t_score"], s["t_reg"],
                                                       cfg.fg_thresh, cfg.qfl_beta)
    return _with_depth(cfg, parts, out, s)


def _with_depth(cfg: TrainConfig, parts: dict, out: dict, s: dict) -> dict:
    if cfg.depth_supervision:
        d = dl.depth_loss(out["depth"], s["depth_dist"])
        parts["l_reg"] = d if "l_reg" not in parts else ad.add(parts["l_reg"], d)
    return parts


def init_params(cfg: TrainConfig, mcfg: M.ModelConfig) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, STAGES.index(cfg.stage), 17]))
    if cfg.stage == "teacher":
        return M.init_teacher(rng, mcfg)
    if cfg.stage == "ta":
        return M.init_ta(rng, mcfg)
    return M.init_student(rng, mcfg, two_branch=cfg.two_branch)


def step_loss(cfg, mcfg, params, batch, calib, features=True, logits=True, tape=None):
    """Batch-mean loss parts on one tape, combined by :func:`distill.total_loss`."""
    tape = tape or ad.Tape()
    P = tape.params(params)
    sums: dict = {}
    for s in batch:
        for k, v in _scene_parts(cfg, mcfg, P, s, calib, features, logits).items():
            sums[k] = v if k not in sums else ad.add(sums[k], v)
    n = float(len(batch))
    weights = {"l_imd": cfg.w_imd, "l_cmrd": cfg.w_cmrd, "l_cls": cfg.w_logit, "l_reg": cfg.w_logit}
    parts = {k: ad.div(v, n) if weights[k] == 1.0 else ad.mul(ad.div(v, n), weights[k]) for k, v in sums.items()}
    return tape, dl.total_loss(**parts)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    params: dict
    log: list  # rows of LOG_COLUMNS
    config: TrainConfig
    phase_steps: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[LOG_COLUMNS.index(name)] for row in self.log])


def _clip(grads: dict, max_norm: float) -> dict:
    if not max_norm or max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: Mapping):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adam" else None
        self.t = 0

    def update(self, params: dict, grads: Mapping, lr: float):
        self.t += 1
        if self.v is None:
            for name, g in grads.items():
                m = self.m[name]
                m *= self.cfg.momentum
                m += g
                params[name] -= lr * m
            return
        b1, b2 = self.cfg.adam_betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)


def train_stage(cfg: TrainConfig, mcfg: M.ModelConfig, scenes: Sequence[dict], calib: CameraCalib,
                init: Mapping | None = None, on_step: Callable | None = None) -> TrainResult:
    """Momentum SGD or Adam with a one-cycle rate per phase.

    ``scenes`` come from :func:`prepare`; the assistant (with alignment) and
    every distilled student additionally need :func:`frozen_targets`.
    Raises :class:`FloatingPointError` naming the step if the loss goes NaN.
    """
    if not scenes:
        raise ValueError("training set is empty")
    needs = cfg.stage == "student" and cfg.mode != "baseline" or cfg.stage == "ta" and cfg.ta_align
    if needs and "f_t" not in scenes[0]:
        raise ValueError(f"{cfg.stage} stage ({cfg.mode}) needs teacher/assistant targets; run frozen_targets first")
    params = {k: np.array(v, dtype=np.float64) for k, v in (init or init_params(cfg, mcfg)).items()}
    opt = _Optimizer(cfg, params)
    rows, phase_steps = [], []
    step = 0
    n = len(scenes)
    per_epoch = math.ceil(n / cfg.batch_size)
    for phase, (epochs, features, logits) in enumerate(cfg.phases()):
        total = epochs * per_epoch
        if cfg.max_steps is not None:
            total = min(total, max(cfg.max_steps - step, 0))
        phase_steps.append(total)
        k = 0
        for epoch in range(epochs):
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, phase, epoch, 29])).permutation(n)
            for b in range(per_epoch):
                if k >= total:
                    break
                batch = [scenes[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                lr = one_cycle(k, total, cfg.lr_max, cfg.warmup_frac, cfg.div_factor)
                tape, rep = step_loss(cfg, mcfg, params, batch, calib, features, logits)
                if not math.isfinite(rep.l_total):
                    raise FloatingPointError(f"loss became non-finite at step {step}")
                opt.update(params, _clip(tape.param_grads(rep.total), cfg.clip_norm), lr)
                rows.append((step, lr) + rep.row())
                if on_step is not None:
                    on_step(step, lr, rep)
                step += 1
                k += 1
    return TrainResult(params, rows, cfg, phase_steps)


# ---------------------------------------------------------------- logs and checkpoints

def format_log(rows) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(int(r[0]))] + [repr(float(v)) for v in r[1:]]))
    return "\n".join(lines) + "\n"


def write_log(path, rows) -> Path:
    path = Path(path)
    path.write_text(format_log(rows))
    return path


def read_log(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != LOG_COLUMNS:
        raise ValueError(f"{path}: not a metrics log")
    return [(int(p[0]),) + tuple(float(v) for v in p[1:]) for p in (ln.split("\t") for ln in lines[1:])]


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), dtype=np.uint8).astype(np.int64)


def _untext(a) -> str:
    return bytes(np.asarray(a, dtype=np.uint8)).decode()


def save_checkpoint(path, params: Mapping, stage: str, mcfg: M.ModelConfig, tcfg: TrainConfig | None = None) -> Path:
    recs = [(f"param/{k}", params[k]) for k in sorted(params)]
    recs.append(("meta/stage", _text(stage)))
    recs.append(("meta/model_digest", _text(mcfg.digest())))
    if tcfg is not None:
        recs.append(("meta/train_config", _text(json.dumps(asdict(tcfg), sort_keys=True))))
    return container.write(path, recs)


def load_checkpoint(path, mcfg: M.ModelConfig | None = None, stage: str | None = None) -> dict:
    raw = container.read(path)
    got = _untext(raw.get("meta/stage", np.zeros(0)))
    if stage is not None and got != stage:
        raise ValueError(f"{path} holds a {got or 'unknown'} checkpoint, expected {stage}")
    if mcfg is not None and _untext(raw.get("meta/model_digest", np.zeros(0))) != mcfg.digest():
        raise ValueError(f"{path} was trained with a different model configuration")
    return {k[len("param/"):]: v for k, v in raw.items() if k.startswith("param/")}


# ---------------------------------------------------------------- decoding and AP

def decode_detections(det, centers, score_thresh: float = 0.1, nms_iou: float = 0.1) -> list:
    """``[(score, box[7])]`` sorted by descending score after thresholding and NMS."""
    score = det.score.numpy() if hasattr(det.score, "numpy") else np.asarray(det.score)
    reg = det.reg.numpy() if hasattr(det.reg, "numpy") else np.asarray(det.reg)
    sel = score > score_thresh
    if not sel.any():
        return []
    boxes = M.decode_boxes(reg[sel], centers[sel])
    scores = score[sel]
    keep = nms(boxes, scores, nms_iou)
    return [(float(scores[i]), boxes[i]) for i in keep]


def ap_40(predictions: Sequence, gts: Sequence, iou_thresh: float = 0.5, iou_fn=iou_3d) -> float:
    """AP sampled at 40 recall positions over a set of scenes.

    ``predictions[i]`` is a list of ``(score, box)`` for scene ``i`` and
    ``gts[i]`` that scene's ``[K,7]`` boxes. Predictions are matched greedily
    in descending score order (ties by scene then position) to the unmatched
    ground truth of highest IoU, counting a hit at ``IoU >= iou_thresh``.
    """
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 7) for g in gts]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return NO_GT
    flat = [(s, i, j, b) for i, preds in enumerate(predictions) for j, (s, b) in enumerate(preds)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat))
    for k, (_, i, _, b) in enumerate(flat):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts[i]):
            if used[i][j]:
                continue
            o = iou_fn(b, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[i][best_j] = True
            tp[k] = 1
    return ap_from_hits(tp, n_gt)


def ap_from_hits(tp, n_gt: int) -> float:
    """Interpolated AP@40 from a score-sorted hit vector."""
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.arange(1, 41) / 40.0:
        idx = np.nonzero(recall >= r - 1e-12)[0]
        total += env[idx[0]] if len(idx) else 0.0
    return float(total / 40.0)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    ap_3d: float
    ap_bev: float
    gap_student_ta: float
    gap_student_teacher: float
    gap_ta_teacher: float
    iou_thresh: float
    n_scenes: int
    ap_3d_teacher: float = float("nan")
    ap_3d_ta: float = float("nan")
    loss_curve: list = field(default_factory=list)  # l_total per step

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    score_thresh: float = 0.1
    nms_iou: float = 0.1


def student_outputs(student: Mapping, scenes, mcfg, calib) -> list:
    two = M.is_two_branch(student)
    return [M.student_forward(student, s["image"], calib, mcfg, two_branch=two) for s in scenes]


def evaluate(checkpoints: Mapping, scenes: Sequence[dict], mcfg: M.ModelConfig, calib: CameraCalib,
             ecfg: EvalConfig = EvalConfig(), loss_curve=None) -> EvalReport:
    """AP of the student plus the three pairwise BEV-feature gaps.

    ``checkpoints`` maps ``teacher``, ``ta`` and ``student`` to parameter
    dicts; ``scenes`` come from :func:`prepare` (``frozen_targets`` optional).
    """
    if not scenes:
        raise ValueError("evaluation set is empty")
    if "student" not in checkpoints:
        raise ValueError("evaluate needs a student checkpoint")
    if "f_t" not in scenes[0]:
        scenes = frozen_targets(scenes, checkpoints["teacher"], checkpoints["ta"], mcfg, calib)
    centers = mcfg.lidar_grid.bev_centers()
    preds, t_preds, a_preds, gts = [], [], [], []
    gaps = np.zeros(3)
    for s, out in zip(scenes, student_outputs(checkpoints["student"], scenes, mcfg, calib)):
        f_s = out["fused"].numpy()
        gaps += [np.mean((f_s - s["f_ta"]) ** 2), np.mean((f_s - s["f_t"]) ** 2),
                 np.mean((s["f_ta"] - s["f_t"]) ** 2)]
        preds.append(decode_detections(out["det"], centers, ecfg.score_thresh, ecfg.nms_iou))
        t_preds.append(decode_detections(M.DetectionSet(s["t_score"], s["t_reg"]), centers,
                                         ecfg.score_thresh, ecfg.nms_iou))
        gts.append(s["boxes"])
    for s in scenes:
        det = M.ta_forward(checkpoints["ta"], s["image"], s["depth_dist"], calib, mcfg)["det"]
        a_preds.append(decode_detections(det, centers, ecfg.score_thresh, ecfg.nms_iou))
    gaps /= len(scenes)
    th = ecfg.iou_thresh
    return EvalReport(
        ap_3d=ap_40(preds, gts, th, iou_3d), ap_bev=ap_40(preds, gts, th, iou_bev),
        gap_student_ta=float(gaps[0]), gap_student_teacher=float(gaps[1]), gap_ta_teacher=float(gaps[2]),
        iou_thresh=th, n_scenes=len(scenes),
        ap_3d_teacher=ap_40(t_preds, gts, th, iou_3d), ap_3d_ta=ap_40(a_preds, gts, th, iou_3d),
        loss_curve=[float(v) for v in (() if loss_curve is None else loss_curve)])


# ---------------------------------------------------------------- convergence

def smooth(values, window: int = 5) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_half(values, window: int = 5) -> int:
    """First step where the smoothed curve drops below half its first value."""
    if len(values) == 0:
        return NOT_REACHED
    s = smooth(values, window)
    hit = np.nonzero(s < 0.5 * s[0])[0]
    return int(hit[0]) if len(hit) else NOT_REACHED


def distill_curve(result: TrainResult) -> np.ndarray:
    """The feature-distillation loss (``l_imd + l_cmrd``) of the first phase."""
    n = result.phase_steps[0] if result.phase_steps else 0
    return (result.column("l_imd") + result.column("l_cmrd"))[:n]


def convergence_compare(scenes, mcfg, calib, base: TrainConfig, budget: int,
                        modes=("IMD", "CMD"), window: int = 5) -> dict:
    """Steps-to-half of each mode's own distillation loss within ``budget`` steps."""
    out = {}
    for mode in modes:
        if budget <= 0:
            out[mode] = NOT_REACHED
            continue
        cfg = replace(base, stage="student", mode=mode, max_steps=budget)
        res = train_stage(cfg, mcfg, scenes, calib)
        out[mode] = steps_to_half(distill_curve(res), window)
    return out
