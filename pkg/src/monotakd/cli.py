"""``monotakd`` command line.

Exit status: 0 on success, 1 for invalid input (bad config, unknown mode,
missing dataset or checkpoint), 2 when a run fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from . import container
from . import distill as dl
from . import pipeline as P
from . import train as T

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p: argparse.ArgumentParser, out=True):
    p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the run seed")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output run directory")


def _deps(p, *names):
    for n in names:
        p.add_argument(f"--{n}", type=Path, help=f"{n} checkpoint (.takd)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monotakd", description="Teaching-assistant distillation on synthetic scenes.")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate the train/eval dataset")
    _common(p)

    for name, deps in (("train-teacher", ()), ("train-ta", ("teacher",)), ("train-student", ("teacher", "ta"))):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} stage")
        _common(p)
        p.add_argument("--data", type=Path, required=True, help="dataset file or synth output directory")
        _deps(p, *deps)
        if name == "train-student":
            p.add_argument("--mode", choices=dl.MODES, help="ablation mode (default from config)")

    p = sub.add_parser("eval", help="evaluate a student against the eval split")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    _deps(p, "teacher", "ta", "student")

    p = sub.add_parser("ablate", help="teacher, assistant and every student mode per seed")
    _common(p)
    p.add_argument("--modes", help="comma-separated subset of " + ",".join(dl.MODES))
    p.add_argument("--seeds", help="comma-separated seeds (default from config)")

    p = sub.add_parser("compare-convergence", help="steps to halve the distillation loss, IMD vs CMD")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    _deps(p, "teacher", "ta")
    p.add_argument("--budget", type=int, default=None, help="step budget per mode (default: feature phase)")

    p = sub.add_parser("export-heatmaps", help="write BEV feature heatmaps as PGM images")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    _deps(p, "teacher", "ta", "student")
    p.add_argument("--scene", type=int, default=0, help="eval scene index")
    return ap


def _config(args) -> C.RunConfig:
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg = C.build(C.RunConfig, {"seed": args.seed, "data": {"seed": args.seed}}, base=cfg)
    return cfg


def _say(msg: str):
    print(msg, flush=True)


def _run(args) -> int:
    cfg = _config(args)
    out = args.out
    P.echo_config(cfg, out)
    cmd = args.command
    if cmd == "synth":
        path = P.synthesize(cfg, out)
        _say(f"wrote {path}")
        return EXIT_OK

    if cmd == "train-teacher":
        train, _ = P.load_scenes(cfg, args.data)
        _, ckpt = P.train_teacher(cfg, train, out)
        _say(f"wrote {ckpt}")
        return EXIT_OK

    if cmd == "train-ta":
        teacher = P.need_checkpoint(args.teacher, "teacher", cfg, "run `train-teacher` first and pass --teacher")
        train, _ = P.load_scenes(cfg, args.data)
        _, ckpt = P.train_ta(cfg, train, teacher, out)
        _say(f"wrote {ckpt}")
        return EXIT_OK

    if cmd == "train-student":
        teacher = P.need_checkpoint(args.teacher, "teacher", cfg, "run `train-teacher` first and pass --teacher")
        ta = P.need_checkpoint(args.ta, "ta", cfg, "run `train-ta` first and pass --ta")
        train, _ = P.load_scenes(cfg, args.data)
        mode = args.mode or cfg.mode
        scenes = train if mode == "baseline" else P.with_targets(cfg, train, teacher, ta)
        _, ckpt = P.train_student(cfg, scenes, out, mode)
        _say(f"wrote {ckpt}")
        return EXIT_OK

    if cmd == "eval":
        ck = _three(args, cfg)
        _, ev = P.load_scenes(cfg, args.data)
        rep = P.evaluate(cfg, ck, P.with_targets(cfg, ev, ck["teacher"], ck["ta"]))
        path = P.write_report(rep, out / "eval_report.json")
        _say(f"AP_3D={rep.ap_3d:.4f} AP_BEV={rep.ap_bev:.4f}; wrote {path}")
        return EXIT_OK

    if cmd == "ablate":
        modes = args.modes.split(",") if args.modes else None
        if modes:
            bad = [m for m in modes if m not in dl.MODES]
            if bad:
                raise C.ConfigError(f"unknown mode(s) {bad}; choose from {','.join(dl.MODES)}")
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        summary = P.ablate(cfg, out, modes, seeds, progress=_say)
        _say(P.format_table(summary).rstrip())
        return EXIT_OK

    if cmd == "compare-convergence":
        teacher = P.need_checkpoint(args.teacher, "teacher", cfg, "run `train-teacher` first and pass --teacher")
        ta = P.need_checkpoint(args.ta, "ta", cfg, "run `train-ta` first and pass --ta")
        train, _ = P.load_scenes(cfg, args.data)
        scenes = P.with_targets(cfg, train, teacher, ta)
        base = cfg.train_config("student")
        per_epoch = -(-len(scenes) // base.batch_size)
        budget = args.budget if args.budget is not None else base.feature_epochs * per_epoch
        res = T.convergence_compare(scenes, cfg.model, P.calib_of(cfg), base, budget,
                                    window=cfg.ablation.smooth_window)
        (out / "convergence.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        _say(" ".join(f"{k}={v}" for k, v in res.items()))
        return EXIT_OK

    if cmd == "export-heatmaps":
        ck = _three(args, cfg)
        _, ev = P.load_scenes(cfg, args.data)
        if not 0 <= args.scene < len(ev):
            raise C.ConfigError(f"--scene {args.scene} out of range (eval split has {len(ev)} scenes)")
        tag = f"{Path(args.student).stem}_scene{args.scene:05d}"
        paths = P.export_heatmaps(ck, ev[args.scene], cfg, out, tag)
        _say(f"wrote {len(paths)} heatmaps to {out}")
        return EXIT_OK
    raise C.ConfigError(f"unknown command {cmd!r}")


def _three(args, cfg) -> dict:
    return {"teacher": P.need_checkpoint(args.teacher, "teacher", cfg, "run `train-teacher` and pass --teacher"),
            "ta": P.need_checkpoint(args.ta, "ta", cfg, "run `train-ta` and pass --ta"),
            "student": P.need_checkpoint(args.student, "student", cfg, "run `train-student` and pass --student")}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        return _run(args)
    except (C.ConfigError, P.MissingDependency) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (container.ContainerError, FloatingPointError, RuntimeError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
