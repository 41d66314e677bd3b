"""File-level workflow shared by the command line and the experiments:
dataset synthesis, staged training with checkpoints and metrics logs,
evaluation, the ablation sweep and BEV heatmap export.

Every function writes under an explicit output directory and echoes the
resolved configuration there.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import distill as dl
from . import models as M
from . import synth
from . import train as T
from .config import RunConfig

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.takd"
CONFIG_FILE = "config.json"


class MissingDependency(ValueError):
    """A stage was asked to run without the checkpoint it depends on."""


def echo_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILE
    path.write_text(cfg.to_json())
    return path


# ---------------------------------------------------------------- data

def synthesize(cfg: RunConfig, out_dir, seed: int | None = None) -> Path:
    seed = cfg.data.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth.make_dataset(seed, cfg.data_config())
    return synth.write_dataset(out / DATASET_FILE, ds)


def _dataset_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / DATASET_FILE
    if not p.exists():
        raise MissingDependency(f"dataset {p} not found; run `synth` first")
    return p


def load_scenes(cfg: RunConfig, data_path) -> tuple:
    """Prepared ``(train, eval)`` scene lists from a dataset file or directory."""
    ds = synth.read_dataset(_dataset_path(data_path))
    kw = dict(heat_sigma=cfg.distill.heat_sigma, fg_thresh=cfg.distill.fg_thresh)
    return T.prepare(ds.get("train", []), cfg.model, **kw), T.prepare(ds.get("eval", []), cfg.model, **kw)


def calib_of(cfg: RunConfig):
    return cfg.data_config().calib()


# ---------------------------------------------------------------- checkpoints

def need_checkpoint(path, stage: str, cfg: RunConfig, fix: str) -> dict:
    if path is None or not Path(path).exists():
        raise MissingDependency(f"missing {stage} checkpoint{f' {path}' if path else ''}; {fix}")
    return T.load_checkpoint(path, cfg.model, stage=stage)


def _train_and_save(cfg: RunConfig, tcfg: T.TrainConfig, scenes, out_dir, name: str,
                    on_step: Callable | None = None) -> tuple:
    res = T.train_stage(tcfg, cfg.model, scenes, calib_of(cfg), on_step=on_step)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = T.save_checkpoint(out / f"{name}.takd", res.params, tcfg.stage, cfg.model, tcfg)
    T.write_log(out / f"{name}_metrics.tsv", res.log)
    return res, ckpt


def train_teacher(cfg: RunConfig, train_scenes, out_dir, seed=None, on_step=None):
    return _train_and_save(cfg, cfg.train_config("teacher", seed=seed), train_scenes, out_dir, "teacher", on_step)


def _with_teacher_bev(scenes, teacher, cfg):
    return [dict(s, f_t=M.teacher_forward(teacher, s["voxels"], cfg.model)["bev"].numpy()) for s in scenes]


def train_ta(cfg: RunConfig, train_scenes, teacher: Mapping, out_dir, seed=None, on_step=None):
    tcfg = cfg.train_config("ta", seed=seed)
    scenes = _with_teacher_bev(train_scenes, teacher, cfg) if tcfg.ta_align else train_scenes
    return _train_and_save(cfg, tcfg, scenes, out_dir, "ta", on_step)


def with_targets(cfg: RunConfig, scenes, teacher, ta):
    return T.frozen_targets(scenes, teacher, ta, cfg.model, calib_of(cfg), cfg.distill.keep_quantile)


def train_student(cfg: RunConfig, scenes_with_targets, out_dir, mode: str, seed=None, on_step=None):
    tcfg = cfg.train_config("student", mode=mode, seed=seed)
    return _train_and_save(cfg, tcfg, scenes_with_targets, out_dir, f"student_{mode_tag(mode)}", on_step)


def mode_tag(mode: str) -> str:
    return mode.replace("+", "_").lower()


# ---------------------------------------------------------------- evaluation

def evaluate(cfg: RunConfig, checkpoints: Mapping, eval_scenes, loss_curve=None) -> T.EvalReport:
    return T.evaluate(checkpoints, eval_scenes, cfg.model, calib_of(cfg), cfg.eval, loss_curve)


def write_report(report: T.EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(report.to_json())
    return path


# ---------------------------------------------------------------- heatmaps

def heatmap(feature) -> np.ndarray:
    """Channel-mean magnitude of ``[H,W,C]`` min-max scaled to ``uint8``.

    Any cell above the minimum maps to at least 1 (ceil), and a constant map
    is all zero. Rows run from far to near (+x first), columns from left to
    right (+y first), so the image reads like a top-down view ahead of the car.
    """
    m = np.abs(np.asarray(feature, dtype=np.float64)).mean(axis=-1)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        img = np.zeros(m.shape, dtype=np.uint8)
    else:
        img = np.ceil((m - lo) / (hi - lo) * 255.0).clip(0, 255).astype(np.uint8)
    return np.ascontiguousarray(img[::-1, ::-1])


def write_pgm(path, img) -> Path:
    img = np.asarray(img, dtype=np.uint8)
    H, W = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    W, H = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=H * W).reshape(H, W)


HEATMAP_KEYS = ("F_T", "F_TA", "F_S1", "F_S2_star", "F_res", "F_S")


def bev_maps(checkpoints: Mapping, scene: dict, cfg: RunConfig) -> dict:
    calib = calib_of(cfg)
    f_t = M.teacher_forward(checkpoints["teacher"], scene["voxels"], cfg.model)["bev"].numpy()
    f_ta = M.ta_forward(checkpoints["ta"], scene["image"], scene["depth_dist"], calib, cfg.model)["bev"].numpy()
    st = checkpoints["student"]
    out = M.student_forward(st, scene["image"], calib, cfg.model, two_branch=M.is_two_branch(st))
    maps = {"F_T": f_t, "F_TA": f_ta, "F_S1": out["bev1"].numpy(),
            "F_res": dl.residual_features(f_t, f_ta, dl.MaskConfig(cfg.distill.keep_quantile)),
            "F_S": out["fused"].numpy()}
    if "bev2_star" in out:
        maps["F_S2_star"] = out["bev2_star"].numpy()
    return {k: maps[k] for k in HEATMAP_KEYS if k in maps}


def export_heatmaps(checkpoints: Mapping, scene: dict, cfg: RunConfig, out_dir, tag: str) -> list:
    """One PGM per BEV map, named ``<tag>_<map>.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [write_pgm(out / f"{tag}_{k}.pgm", heatmap(v)) for k, v in bev_maps(checkpoints, scene, cfg).items()]


# ---------------------------------------------------------------- ablation

@dataclass
class SeedResult:
    seed: int
    reports: dict  # mode -> EvalReport
    steps_to_half: dict  # mode -> int (IMD and CMD only)


def run_seed(cfg: RunConfig, seed: int, out_dir, modes: Sequence[str], progress: Callable = print) -> SeedResult:
    out = Path(out_dir)
    data_path = synthesize(cfg, out, seed)
    train_sc, eval_sc = load_scenes(cfg, data_path)
    progress(f"seed {seed}: training teacher")
    teacher, _ = train_teacher(cfg, train_sc, out, seed=seed)
    progress(f"seed {seed}: training assistant")
    ta, _ = train_ta(cfg, train_sc, teacher.params, out, seed=seed)
    train_t = with_targets(cfg, train_sc, teacher.params, ta.params)
    eval_t = with_targets(cfg, eval_sc, teacher.params, ta.params)
    reports, s2h = {}, {}
    for mode in modes:
        progress(f"seed {seed}: training student {mode}")
        res, _ = train_student(cfg, train_t, out, mode, seed=seed)
        rep = T.evaluate({"teacher": teacher.params, "ta": ta.params, "student": res.params}, eval_t,
                         cfg.model, calib_of(cfg), cfg.eval, res.column("l_total"))
        write_report(rep, out / f"eval_{mode_tag(mode)}.json")
        reports[mode] = rep
        if mode in ("IMD", "CMD"):
            s2h[mode] = T.steps_to_half(T.distill_curve(res), cfg.ablation.smooth_window)
        progress(f"seed {seed}: {mode} AP_3D={rep.ap_3d:.4f} AP_BEV={rep.ap_bev:.4f}")
    (out / "convergence.json").write_text(json.dumps(s2h, indent=2, sort_keys=True) + "\n")
    return SeedResult(seed, reports, s2h)


def summarize(results: Sequence[SeedResult], modes: Sequence[str]) -> dict:
    ordered = [m for m in dl.MODES if m in modes]
    table = []
    for m in ordered:
        ap3 = [r.reports[m].ap_3d for r in results]
        apb = [r.reports[m].ap_bev for r in results]
        gap = [r.reports[m].gap_student_teacher for r in results]
        table.append({"setting": dl.MODES.index(m) + 1, "mode": m, "ap_3d": ap3, "ap_bev": apb,
                      "ap_3d_median": float(np.median(ap3)), "ap_bev_median": float(np.median(apb)),
                      "gap_student_teacher_median": float(np.median(gap))})
    first = ordered[0] if ordered else None
    ta_gap = [r.reports[first].gap_ta_teacher for r in results] if first else []
    s2h = {m: [r.steps_to_half.get(m, T.NOT_REACHED) for r in results] for m in ("IMD", "CMD")}
    return {"seeds": [r.seed for r in results], "table": table,
            "gap_ta_teacher": ta_gap, "steps_to_half": s2h}


def format_table(summary: dict) -> str:
    lines = ["setting\tmode\tap_3d_median\tap_bev_median\tap_3d_per_seed"]
    for row in summary["table"]:
        per = ",".join(f"{v:.4f}" for v in row["ap_3d"])
        lines.append(f"{row['setting']}\t{row['mode']}\t{row['ap_3d_median']:.4f}\t{row['ap_bev_median']:.4f}\t{per}")
    return "\n".join(lines) + "\n"


def ablate(cfg: RunConfig, out_dir, modes: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
           progress: Callable = print) -> dict:
    modes = list(modes or cfg.ablation.modes)
    seeds = list(cfg.ablation.seeds if seeds is None else seeds)
    bad = [m for m in modes if m not in dl.MODES]
    if bad:
        raise ValueError(f"unknown mode(s) {bad}; expected a subset of {dl.MODES}")
    out = Path(out_dir)
    echo_config(cfg, out)
    cfg = cfg.for_ablation()
    (out / "ablation_config.json").write_text(cfg.to_json())
    results = [run_seed(cfg, s, out / f"seed{s}", modes, progress) for s in seeds]
    summary = summarize(results, modes)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "summary.tsv").write_text(format_table(summary))
    return summary
