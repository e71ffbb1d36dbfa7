"""
Command-line entry points.

    hallucinet <subcommand> ...     (see `hallucinet --help`)
    synthvid build --config <path> --out <dir> [--overwrite]

Exit codes: 0 success, 1 runtime failure, 2 missing input file,
3 config parse or validation error. Relative output paths are resolved
against $HALLUCINET_OUTPUT_ROOT when it is set.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, __version__

EXIT_OK, EXIT_RUNTIME, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "HALLUCINET_OUTPUT_ROOT"
METRIC_CHOICES = ("top1", "attributes", "spearman", "hallucination")

log = logging.getLogger("hallucinet")


def resolve_out(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def require(path, what):
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _seed_override(cfg, seed):
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


def _train_config(args, **overrides):
    from .trainer import TrainConfig

    cfg = TrainConfig.from_file(require(args.config, "train config")) if args.config else TrainConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return dataclasses.replace(cfg, **overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _out_dir(args):
    from .experiment import _prepare

    return _prepare(resolve_out(args.out), args.overwrite)


def _print_provenance(command, config, seed):
    from .config import config_hash

    header = {"command": command, "code_version": __version__, "config_hash": config_hash(config), "seed": seed}
    print("# provenance " + json.dumps(header, sort_keys=True))


def _load_teacher(path):
    from .checkpoint import load_checkpoint

    return load_checkpoint(require(path, "teacher checkpoint"), expected_kind="teacher")


def _load_data(path):
    from .synthvid import load_dataset

    return load_dataset(require(path, "dataset directory"))


# -- commands -----------------------------------------------------------------


def cmd_build_data(args):
    from .experiment import write_provenance
    from .synthvid import GeneratorConfig, build_dataset

    cfg = GeneratorConfig.from_file(require(args.config, "generator config"))
    out = resolve_out(args.out)
    manifests = build_dataset(cfg, out, overwrite=args.overwrite, jobs=args.jobs)
    write_provenance(out, "build-data", cfg, cfg.seed)
    for split, m in manifests.items():
        print(f"{split}\t{len(m.records)}\t{out / (split + '.manifest')}")
    return EXIT_OK


def cmd_train_teacher(args):
    from .experiment import write_provenance
    from .evaluator import evaluate_teacher
    from .trainer import train_teacher

    data = _load_data(args.data)
    cfg = _train_config(args, seed=args.seed)
    out = _out_dir(args)
    teacher, tlog = train_teacher(data, cfg, out_dir=out)
    evaluate_teacher(teacher, data["test"]).write(out / "eval_test.jsonl")
    write_provenance(out, "train-teacher", cfg, cfg.seed)
    print(f"teacher\t{tlog.checkpoint}\ttrain_top1={tlog.records[-1]['train_top1']:.4f}")
    return EXIT_OK


def cmd_train_student(args):
    from .experiment import write_provenance
    from .evaluator import evaluate_student
    from .trainer import train_student

    teacher = _load_teacher(args.teacher)
    data = _load_data(args.data)
    cfg = _train_config(args, mode=args.mode, seed=args.seed, lam=args.lam)
    out = _out_dir(args)
    student, tlog = train_student(data, teacher, cfg, out_dir=out)
    rep = evaluate_student(student, data["test"], teacher, k=cfg.k)
    rep.write(out / "eval_test.jsonl")
    write_provenance(out, "train-student", cfg, cfg.seed)
    print(f"student\t{tlog.checkpoint}\ttest_top1={rep.metrics['top1']:.4f}")
    return EXIT_OK


def cmd_train_sequence(args):
    from .checkpoint import load_checkpoint
    from .evaluator import evaluate_sequence
    from .experiment import write_provenance
    from .trainer import train_sequence_model

    teacher = _load_teacher(args.teacher) if args.teacher else None
    student = load_checkpoint(require(args.student, "student checkpoint"), expected_kind="student") if args.student else None
    data = _load_data(args.data)
    cfg = _train_config(args, mode=args.mode, seed=args.seed, task=args.task)
    out = _out_dir(args)
    model, tlog = train_sequence_model(data, cfg, student=student, teacher=teacher, out_dir=out)
    rep = evaluate_sequence(model, data["test"], teacher, cfg.stride, cfg.k)
    rep.write(out / "eval_test.jsonl")
    write_provenance(out, "train-sequence", cfg, cfg.seed)
    print(f"sequence\t{tlog.checkpoint}")
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_pretrain_finetune(args):
    from .experiment import write_provenance
    from .trainer import TrainConfig, pretrain_then_finetune

    teacher = _load_teacher(args.teacher)
    pre = _seed_override(TrainConfig.from_file(require(args.pretrain_config, "pretrain config")), args.seed)
    fine = _seed_override(TrainConfig.from_file(require(args.finetune_config, "finetune config")), args.seed)
    fine = dataclasses.replace(fine, task="attributes")
    pre_data, fine_data = _load_data(args.pretrain_data), _load_data(args.finetune_data)
    out = _out_dir(args)
    report = pretrain_then_finetune(pre_data, fine_data, teacher, pre, fine, out_dir=out)
    write_provenance(out, "pretrain-finetune", {"pretrain": pre, "finetune": fine}, pre.seed)
    for c in report["cells"]:
        print(
            f"pretrain_hallu={int(c['pretrain_hallucination'])}\tfinetune_hallu={int(c['finetune_hallucination'])}"
            f"\tval_mean_attr={c.get('val_mean_attribute_accuracy', float('nan')):.4f}"
        )
    return EXIT_OK


def cmd_compare_frames(args):
    from .evaluator import compare_single_vs_multiframe
    from .experiment import write_provenance

    teacher = _load_teacher(args.teacher)
    data = _load_data(args.data)
    cfg = _train_config(args)
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    res = compare_single_vs_multiframe(
        data,
        teacher,
        dataclasses.replace(cfg, mode="hallucinet"),
        dataclasses.replace(cfg, mode="multiframe"),
        seeds=seeds,
        runs=args.runs,
        warmup=args.warmup,
        out_dir=out,
    )
    write_provenance(out, "compare-frames", cfg, seeds)
    for r in res["rows"]:
        print(f"{r['method']}\ttop1={r['top1']:.4f}\tL_hallu={r['hallucination_error'] * 1e3:.3f}e-3")
    print(f"reduction\t{res['reduction_percent']:.2f}%")
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .evaluator import evaluate_model
    from .experiment import write_provenance
    from .synthvid import load_split

    model = load_checkpoint(require(args.checkpoint, "checkpoint"))
    arrays = load_split(require(args.manifest, "manifest"))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRIC_CHOICES]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {METRIC_CHOICES}")
    teacher = None
    if "hallucination" in metrics and model.kind != "teacher":
        if not args.teacher:
            raise ConfigError("the hallucination metric needs --teacher")
        teacher = _load_teacher(args.teacher)
    meta = getattr(model, "checkpoint_meta", {})
    rep = evaluate_model(
        model, arrays, teacher, metrics, k=meta.get("k", 3), stride=meta.get("stride", 16)
    )
    prov = {"checkpoint": rep.checkpoint_hash, "manifest": arrays.manifest.split, "metrics": metrics}
    if args.out:
        out = resolve_out(args.out)
        rep.write(out)
        write_provenance(out.parent, "eval", prov, None)
    _print_provenance("eval", prov, None)
    print(rep.to_text(), end="")
    print(json.dumps({"summary": rep.summary()}, sort_keys=True))
    return EXIT_OK


def cmd_profile(args):
    from .checkpoint import load_checkpoint
    from .experiment import write_provenance
    from .models import parameter_checksum
    from .profiler import cost_report, cost_report_dict, layer_costs

    model = load_checkpoint(require(args.checkpoint, "checkpoint"))
    shape = None
    if model.kind == "sequence":
        s = model.student.config.input_shape
        shape = (args.steps, *s)
    out = resolve_out(args.out) if args.out else None
    raw = out / "timing" / "profile.ns.txt" if out else None
    rep = cost_report(model, model.kind, shape, args.runs, args.warmup, raw_path=raw)
    d = cost_report_dict(rep)
    prov = {"checkpoint": parameter_checksum(model)[:16], "runs": args.runs, "warmup": args.warmup, "steps": args.steps}
    _print_provenance("profile", prov, None)
    if out:
        write_provenance(out, "profile", prov, None)
        out.mkdir(parents=True, exist_ok=True)
        static = {k: d[k] for k in ("model_name", "params", "flops", "input_shape", "flop_convention")}
        static["layers"] = layer_costs(model, rep.input_shape)
        (out / "cost_report.json").write_text(json.dumps(static, indent=1, sort_keys=True) + "\n")
        timing = {k: d[k] for k in ("mean_s", "std_s", "runs", "warmup", "hardware")}
        (out / "timing" / "profile_timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    print(f"model\t{rep.model_name}\nparams\t{rep.params}\nflops\t{rep.flops}\t({d['flop_convention']})")
    print(f"time_per_inference_ms\t{rep.mean_s * 1e3:.4f}\t+-{rep.std_s * 1e3:.4f}\truns={rep.runs}\twarmup={rep.warmup}")
    print(f"hardware\t{rep.hardware}")
    return EXIT_OK


def cmd_cost_table(args):
    from .experiment import write_provenance
    from .profiler import cost_accuracy_table

    ckpts = {
        "vanilla": require(args.vanilla, "vanilla checkpoint"),
        "direct": require(args.direct, "direct checkpoint"),
        "teacher": require(args.teacher, "teacher checkpoint"),
    }
    data = _load_data(args.data)
    out = _out_dir(args)
    res = cost_accuracy_table(ckpts, data, args.runs, args.warmup, out_dir=out)
    write_provenance(out, "cost-table", {"runs": args.runs, "warmup": args.warmup}, None)
    for r in res["rows"]:
        t = res["timing"]["rows"][r["key"]]
        print(f"{r['model']}\ttest_top1={r['accuracy'].get('test', float('nan')):.4f}\t{t['mean_s'] * 1e3:.3f}ms\t{r['flops']}\t{r['params']}")
    print(f"time_ratio_teacher_over_student\t{res['timing']['time_ratio_teacher_over_student']:.2f}")
    return EXIT_OK


def cmd_report(args):
    from .report import write_report

    results = require(resolve_out(args.results), "results directory")
    out = resolve_out(args.out) if args.out else results / "report"
    written = write_report(results, out, figures=not args.no_figures)
    if not written:
        raise FileNotFoundError(f"no stored results found under {results}")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_pipeline(args):
    from .experiment import ExperimentConfig, run_pipeline

    exp = ExperimentConfig.from_file(require(args.config, "experiment config"))
    if args.seed is not None:
        exp = dataclasses.replace(exp, seed=args.seed)
    out = resolve_out(args.out or Path(exp.output_root) / exp.name)
    for p in run_pipeline(exp, out, overwrite=args.overwrite):
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_out(p, what="output directory"):
    p.add_argument("--out", required=True, help=f"{what} (relative paths go under ${OUTPUT_ROOT_ENV} when set)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing non-empty output directory")


def _add_train(p, modes=True):
    p.add_argument("--config", help="train config TOML (all TrainConfig fields; unknown keys are errors)")
    p.add_argument("--seed", type=int, help="override the config seed")
    if modes:
        p.add_argument("--mode", choices=("vanilla", "hallucinet", "direct", "multiframe"), help="override the config mode")


def _add_timing(p):
    p.add_argument("--runs", type=int, default=30, help="timed batch-1 inferences (>= 10)")
    p.add_argument("--warmup", type=int, default=3, help="untimed warmup inferences (>= 3)")


def build_parser():
    parser = argparse.ArgumentParser(prog="hallucinet", description="Teacher-student hallucination experiments on synthetic video.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="generator config TOML")
    _add_out(p, "dataset directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for clip generation")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train-teacher", help="train and freeze the 3D teacher")
    p.add_argument("--data", required=True, help="dataset directory with train/val/test manifests")
    _add_train(p, modes=False)
    _add_out(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a 2D student (vanilla, hallucinet, direct, multiframe)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    _add_train(p)
    p.add_argument("--lambda", dest="lam", type=float, help="override the hallucination loss weight")
    _add_out(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("train-sequence", help="train the sparse-sampling LSTM pipeline")
    p.add_argument("--data", required=True, help="dataset directory of long clips")
    p.add_argument("--teacher", help="frozen teacher checkpoint (required unless mode is vanilla)")
    p.add_argument("--student", help="student checkpoint to initialize the frame encoder")
    p.add_argument("--task", choices=("attributes", "quality"), help="override the config task")
    _add_train(p)
    _add_out(p)
    p.set_defaults(func=cmd_train_sequence)

    p = sub.add_parser("pretrain-finetune", help="run the 2x2 pretrain/finetune hallucination grid")
    p.add_argument("--pretrain-data", required=True, help="dataset used for student pretraining")
    p.add_argument("--finetune-data", required=True, help="long-clip dataset used for sequence finetuning")
    p.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    p.add_argument("--pretrain-config", required=True, help="train config TOML for pretraining")
    p.add_argument("--finetune-config", required=True, help="train config TOML for finetuning")
    p.add_argument("--seed", type=int, help="override both config seeds")
    _add_out(p)
    p.set_defaults(func=cmd_pretrain_finetune)

    p = sub.add_parser("compare-frames", help="HalluciNet(1f) vs HalluciNet(2f)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    p.add_argument("--config", help="train config TOML shared by both variants")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated student seeds")
    _add_timing(p)
    _add_out(p)
    p.set_defaults(func=cmd_compare_frames)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one manifest")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--manifest", required=True, help="split manifest file")
    p.add_argument("--metrics", default="top1", help=f"comma-separated subset of {','.join(METRIC_CHOICES)}")
    p.add_argument("--teacher", help="frozen teacher checkpoint (needed for the hallucination metric)")
    p.add_argument("--out", help="write the line-delimited report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameters, FLOPs and batch-1 latency of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    _add_timing(p)
    p.add_argument("--steps", type=int, default=6, help="sampled frames per sequence (sequence checkpoints)")
    p.add_argument("--out", help="directory for cost_report.json and raw timing files")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("cost-table", help="accuracy vs time vs FLOPs vs params for 2D, direct and teacher")
    p.add_argument("--vanilla", required=True, help="vanilla 2D student checkpoint")
    p.add_argument("--direct", required=True, help="HalluciNet_direct checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    _add_timing(p)
    _add_out(p)
    p.set_defaults(func=cmd_cost_table)

    p = sub.add_parser("report", help="write table files and figures from stored results")
    p.add_argument("--results", required=True, help="pipeline output directory")
    p.add_argument("--out", help="report directory (default: <results>/report)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage from an experiment config")
    p.add_argument("--config", required=True, help="experiment TOML")
    p.add_argument("--out", help="output directory (default: <output_root>/<name>)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--overwrite", action="store_true", help="replace an existing non-empty output directory")
    p.set_defaults(func=cmd_pipeline)
    return parser


def run(func, args):
    """Call a command, mapping failures to exit codes."""
    try:
        return func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _setup_logging(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return run(args.func, args)


def synthvid_main(argv=None):
    parser = argparse.ArgumentParser(prog="synthvid", description="Synthetic labeled video generator.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("build", help="generate train/val/test splits")
    p.add_argument("--config", required=True, help="generator config TOML")
    p.add_argument("--out", required=True, help=f"dataset directory (relative paths go under ${OUTPUT_ROOT_ENV} when set)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for clip generation")
    args = parser.parse_args(argv)
    _setup_logging(False)
    return run(cmd_build_data, args)


if __name__ == "__main__":
    sys.exit(main())
