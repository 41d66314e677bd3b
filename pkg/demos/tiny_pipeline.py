"""The whole teacher -> assistant -> student chain on a small dataset.

Trains a LiDAR teacher, a camera assistant fed true depth, and two students
(one without distillation, one with both distillation branches), then
reports detection AP and how far each model's BEV features sit from the
teacher's. Takes a minute or two on one core. The results at this size are
noisy; `monotakd ablate` runs the full comparison.

Run: python3 demos/tiny_pipeline.py [out_dir]
"""
import logging
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from monotakd import config as C
from monotakd import pipeline as P

logging.getLogger("monotakd").setLevel(logging.ERROR)  # early batches often have no confident teacher cells

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="monotakd_"))
base = C.RunConfig()
cfg = replace(base, data=replace(base.data, n_train=96, n_eval=32),
              teacher=replace(base.teacher, epochs=12), ta=replace(base.ta, epochs=12),
              student=replace(base.student, epochs=9, feature_epochs=3))

P.echo_config(cfg, out)
train, evals = P.load_scenes(cfg, P.synthesize(cfg, out))
print(f"{len(train)} train / {len(evals)} eval scenes in {out}")

teacher, _ = P.train_teacher(cfg, train, out)
ta, _ = P.train_ta(cfg, train, teacher.params, out)
print(f"teacher loss {teacher.column('l_total')[0]:.3f} -> {teacher.column('l_total')[-1]:.3f}")

targets = P.with_targets(cfg, train, teacher.params, ta.params)
for mode in ("baseline", "IMD+CMRD"):
    student, _ = P.train_student(cfg, targets, out, mode)
    ckpts = {"teacher": teacher.params, "ta": ta.params, "student": student.params}
    rep = P.evaluate(cfg, ckpts, evals)
    print(f"{mode:9s} AP_3D {rep.ap_3d:.3f}  AP_BEV {rep.ap_bev:.3f}  "
          f"MSE to teacher: student {rep.gap_student_teacher:.4f}, assistant {rep.gap_ta_teacher:.4f}")

# heatmaps of the last student's features on the first eval scene
files = P.export_heatmaps(ckpts, P.with_targets(cfg, evals[:1], teacher.params, ta.params)[0], cfg,
                          out, "demo_scene0")
print("heatmaps:", ", ".join(Path(f).name for f in files))
print(f"teacher AP_3D {rep.ap_3d_teacher:.3f}, assistant AP_3D {rep.ap_3d_ta:.3f}")
