"""Command-line entry points for dataset generation, training, scoring,
evaluation, and ensembling.

Every subcommand reads an optional YAML config plus --set overrides, writes
its outputs under --out, and exits 0 on success, 1 on runtime failure, and 2
on usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfg
from .checkpoint import (
    checkpoint_hash,
    load_model,
    save_model_checkpoint,
)
from .datasets import load_dataset, split_tensors
from .distill import save_soft_label_cache
from .evaluation import ScoreFile, ensemble, evaluate, ground_truth_from_annotations
from .pipelines import (
    soft_label_sets,
    train_base,
    train_student,
    train_teacher,
    train_vnrm,
)
from .scoring import make_scorefile
from .synthetic import export_dataset, generate_synthetic


def _common_config(args) -> dict:
    doc = cfg.load_config(args.config)
    return cfg.apply_overrides(doc, args.set or [])


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synthetic(args) -> int:
    doc = _common_config(args)
    run = cfg.make_synthetic_config(doc)
    dataset = generate_synthetic(
        run.grammar,
        run.n_videos,
        run.clips_per_video,
        anticipation_time=run.anticipation_time,
        observed_duration=run.observed_duration,
    )
    out = _outdir(args)
    export_dataset(dataset, out)
    n_train = len(dataset.annotations_for(dataset.train_video_ids))
    n_val = len(dataset.annotations_for(dataset.val_video_ids))
    print(
        f"wrote {len(dataset.timelines)} videos "
        f"({n_train} train / {n_val} val segments) to {out}"
    )
    return 0


def _load_split_tensors(data_dir: str):
    bundle = load_dataset(data_dir)
    return bundle, split_tensors(bundle, "train"), split_tensors(bundle, "val")


def cmd_train_teacher(args) -> int:
    doc = _common_config(args)
    bundle, train_t, val_t = _load_split_tensors(args.data)
    model_config = cfg.make_model_config(doc, bundle.task, train_t.observed.shape[-1])
    train_config = cfg.make_train_config(doc)
    out = _outdir(args)
    cfg.dump_config(doc, out / "config.yaml")
    trained = train_teacher(
        train_t, val_t, model_config, train_config,
        actions=bundle.actions, log_path=out / "metrics.csv",
    )
    save_model_checkpoint(
        out / "teacher.ckpt", trained, model_config, trained.result.steps
    )
    print(
        f"teacher: best val action recall {trained.result.best_recall:.2f}% "
        f"at epoch {trained.result.best_epoch}; saved to {out / 'teacher.ckpt'}"
    )
    return 0


def cmd_train_student(args) -> int:
    doc = _common_config(args)
    bundle, train_t, val_t = _load_split_tensors(args.data)
    model_config = cfg.make_model_config(doc, bundle.task, train_t.observed.shape[-1])
    train_config = cfg.make_train_config(doc)
    distill_config = cfg.make_distill_config(doc)
    out = _outdir(args)
    cfg.dump_config(doc, out / "config.yaml")

    teachers = []
    for path in args.teacher or []:
        model, ckpt = load_model(path)
        if ckpt.model_kind != "anticipation":
            raise ValueError(f"{path}: student distillation expects a full-video teacher")
        teachers.append(model)

    if teachers and distill_config.kd_weight > 0:
        sets = soft_label_sets(teachers, train_t, distill_config.temperature)
        tag = "+".join(checkpoint_hash(p)[:16] for p in args.teacher)
        save_soft_label_cache(
            out / "soft_labels.bin", train_t.segment_ids, sets, teacher_hash=tag
        )

    trained = train_student(
        train_t, val_t, teachers, model_config, distill_config, train_config,
        actions=bundle.actions, log_path=out / "metrics.csv",
    )
    save_model_checkpoint(
        out / "student.ckpt", trained, model_config, trained.result.steps
    )
    print(
        f"student: best val action recall {trained.result.best_recall:.2f}% "
        f"at epoch {trained.result.best_epoch}; saved to {out / 'student.ckpt'}"
    )
    return 0


def cmd_train_base(args) -> int:
    doc = _common_config(args)
    bundle, train_t, val_t = _load_split_tensors(args.data)
    model_config = cfg.make_model_config(doc, bundle.task, train_t.observed.shape[-1])
    train_config = cfg.make_train_config(doc)
    out = _outdir(args)
    cfg.dump_config(doc, out / "config.yaml")
    trained = train_base(
        train_t, val_t, model_config, train_config,
        actions=bundle.actions, log_path=out / "metrics.csv",
    )
    save_model_checkpoint(out / "base.ckpt", trained, model_config, trained.result.steps)
    print(
        f"base: best val action recall {trained.result.best_recall:.2f}% "
        f"at epoch {trained.result.best_epoch}; saved to {out / 'base.ckpt'}"
    )
    return 0


def cmd_train_vnrm(args) -> int:
    doc = _common_config(args)
    bundle, train_t, val_t = _load_split_tensors(args.data)
    model_config = cfg.make_model_config(doc, bundle.task, train_t.observed.shape[-1])
    train_config = cfg.make_train_config(doc)
    vnrm_config = cfg.make_vnrm_config(doc)
    out = _outdir(args)
    cfg.dump_config(doc, out / "config.yaml")

    teacher = None
    if args.teacher:
        model, ckpt = load_model(args.teacher)
        if ckpt.model_kind != "vnrm":
            raise ValueError(f"{args.teacher}: vnrm distillation expects a vnrm teacher")
        teacher = model
        if args.variant == "student":
            vnrm_config.use_kd = True

    trained = train_vnrm(
        train_t, val_t, model_config, vnrm_config, train_config,
        teacher=teacher, variant=args.variant,
        actions=bundle.actions, log_path=out / "metrics.csv",
    )
    name = f"vnrm_{args.variant}.ckpt"
    save_model_checkpoint(
        out / name, trained, model_config, trained.result.steps,
        vnrm_config=vnrm_config,
    )
    print(
        f"vnrm {args.variant}: best val action recall "
        f"{trained.result.best_recall:.2f}% at epoch {trained.result.best_epoch}; "
        f"saved to {out / name}"
    )
    return 0


def cmd_score(args) -> int:
    bundle = load_dataset(args.data)
    tensors = split_tensors(bundle, args.split)
    model, ckpt = load_model(args.checkpoint)
    tag = args.tag or Path(args.checkpoint).stem
    scores = make_scorefile(
        model, ckpt.input_mode if args.mode == "auto" else args.mode,
        tensors, tag, actions=bundle.actions,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    scores.save(args.out)
    print(f"scored {len(scores.segment_ids)} segments ({args.split}) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_dataset(args.data)
    scores = ScoreFile.load(args.scores)
    labels = ground_truth_from_annotations(bundle.train_rows + bundle.val_rows)
    report = evaluate(scores, labels, bundle.split, actions=bundle.actions)
    print(report.to_table())
    if args.out:
        out = _outdir(args)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        print(f"report written to {out / 'report.json'}")
    return 0


def cmd_ensemble(args) -> int:
    files = [ScoreFile.load(p) for p in args.inputs]
    combined = ensemble(files)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    combined.save(args.out)
    print(f"ensembled {len(files)} score files into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anticipation",
        description="Feature-level egocentric action anticipation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML run configuration")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-teacher", help="train a full-video teacher")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a gap-blind student")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--teacher", action="append", metavar="CKPT",
        help="teacher checkpoint (repeatable; soft labels are averaged)",
    )
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("train-base", help="train the observed-only baseline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-vnrm", help="train a verb-noun relation model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("student", "teacher"), default="student")
    p.add_argument("--teacher", metavar="CKPT", help="vnrm teacher checkpoint for KD")
    p.set_defaults(func=cmd_train_vnrm)

    p = sub.add_parser("score", help="run a checkpoint over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default=None, help="model tag recorded in the score file")
    p.add_argument(
        "--mode", choices=("auto", "observed", "student", "full"), default="auto",
        help="input regime (default: the regime the checkpoint was trained in)",
    )
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a score file against a dataset")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="directory for the JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average score files entrywise")
    p.add_argument("inputs", nargs="+", help="score files to combine")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> diagnostic, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
