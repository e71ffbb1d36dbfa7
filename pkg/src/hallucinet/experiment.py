"""
Experiment config and the end-to-end pipeline:
build data -> teacher -> students (per mode and seed) -> 1f/2f comparison ->
sequence tasks -> pretrain/finetune grid -> cost table -> report.
"""

import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, __version__, canonical_json, config_hash, from_mapping, load_toml
from .evaluator import compare_single_vs_multiframe, evaluate_sequence, evaluate_student, evaluate_teacher
from .profiler import cost_accuracy_table
from .report import write_report
from .synthvid import GeneratorConfig, build_dataset, load_dataset
from .trainer import TrainConfig, pretrain_then_finetune, train_sequence_model, train_student, train_teacher

log = logging.getLogger(__name__)

PATH_FIELDS = (
    "generator",
    "dive_generator",
    "teacher",
    "student",
    "sequence_attributes",
    "sequence_quality",
    "pretrain",
    "finetune",
)
STAGES = ("data", "teacher", "students", "frames", "sequence", "pretrain_finetune", "cost", "report")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0  # master seed: generator seeds and the teacher seed
    output_root: str = "runs"
    generator: str = ""
    dive_generator: str = ""
    teacher: str = ""
    student: str = ""
    sequence_attributes: str = ""
    sequence_quality: str = ""
    pretrain: str = ""
    finetune: str = ""
    student_seeds: tuple = (0, 1, 2)
    student_modes: tuple = ("vanilla", "hallucinet", "direct")
    sequence_modes: tuple = ("vanilla", "hallucinet", "multiframe")
    runs: int = 30
    warmup: int = 3
    stages: tuple = STAGES
    base_dir: str = ""  # directory the relative paths above are resolved against

    def path(self, key):
        value = getattr(self, key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir or ".") / p

    def validate(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}")
        if self.runs < 10 or self.warmup < 3:
            raise ConfigError("runs must be >= 10 and warmup >= 3")
        for key in PATH_FIELDS:
            p = self.path(key)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{key} config not found: {p}")

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        data = load_toml(path)
        cfg = from_mapping(cls, data.get("experiment", data), where=str(path))
        if not cfg.base_dir:
            cfg.base_dir = str(path.parent)
        cfg.validate()
        return cfg

    def snapshot(self):
        """Config plus the content of every referenced file, for hashing."""
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d.pop("output_root")
        d["files"] = {k: load_toml(self.path(k)) for k in PATH_FIELDS if self.path(k) is not None}
        return d

    def generator_config(self, key):
        cfg = GeneratorConfig.from_file(self.path(key))
        return dataclasses.replace(cfg, seed=self.seed)

    def train_config(self, key, **overrides):
        return dataclasses.replace(TrainConfig.from_file(self.path(key)), **overrides)


def write_provenance(out_dir, command, config, seed, extra=None):
    """provenance.json (deterministic) plus a timestamp sidecar."""
    import datetime

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = json.loads(canonical_json(config)) if config is not None else None
    record = {
        "command": command,
        "code_version": __version__,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "seed": seed,
        "config": cfg,
        **(extra or {}),
    }
    (out / "provenance.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    stamp = {"written_at": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    (out / "provenance.timing.json").write_text(json.dumps(stamp) + "\n")
    return record


def _prepare(out, overwrite):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_pipeline(exp, out_dir, overwrite=False):
    """Run every configured stage under `out_dir`; returns the list of report files."""
    out = _prepare(out_dir, overwrite)
    stages = set(exp.stages)
    write_provenance(out, "pipeline", exp.snapshot(), exp.seed)

    # data
    action_cfg = exp.generator_config("generator")
    build_dataset(action_cfg, out / "data" / "action")
    action = load_dataset(out / "data" / "action")
    dive = None
    if exp.dive_generator and stages & {"sequence", "pretrain_finetune"}:
        build_dataset(exp.generator_config("dive_generator"), out / "data" / "dive")
        dive = load_dataset(out / "data" / "dive")

    # teacher
    tcfg = exp.train_config("teacher", seed=exp.seed)
    teacher, _ = train_teacher(action, tcfg, out_dir=out / "teacher")
    evaluate_teacher(teacher, action["test"]).write(out / "teacher" / "eval_test.jsonl")
    log.info("teacher done")

    scfg = exp.train_config("student")
    if "students" in stages or "cost" in stages:
        for mode in exp.student_modes:
            for seed in exp.student_seeds:
                run = out / "students" / mode / f"seed{seed}"
                student, _ = train_student(action, teacher, dataclasses.replace(scfg, mode=mode, seed=seed), out_dir=run)
                evaluate_student(student, action["test"], teacher, k=scfg.k).write(run / "eval_test.jsonl")
                log.info("student %s seed %d done", mode, seed)

    if "frames" in stages:
        compare_single_vs_multiframe(
            action,
            teacher,
            dataclasses.replace(scfg, mode="hallucinet"),
            dataclasses.replace(scfg, mode="multiframe"),
            seeds=exp.student_seeds,
            runs=exp.runs,
            warmup=exp.warmup,
            out_dir=out / "frames",
        )
        log.info("frame comparison done")

    if "sequence" in stages and dive is not None:
        for key, task in (("sequence_attributes", "attributes"), ("sequence_quality", "quality")):
            if not exp.path(key):
                continue
            qcfg = exp.train_config(key, task=task)
            modes = exp.sequence_modes if task == "attributes" else [m for m in exp.sequence_modes if m != "multiframe"]
            for mode in modes:
                run = out / "sequence" / task / mode
                model, _ = train_sequence_model(dive, dataclasses.replace(qcfg, mode=mode), teacher=teacher, out_dir=run)
                evaluate_sequence(model, dive["test"], teacher, qcfg.stride, qcfg.k).write(run / "eval_test.jsonl")
                log.info("sequence %s %s done", task, mode)

    if "pretrain_finetune" in stages and dive is not None and exp.pretrain and exp.finetune:
        pretrain_then_finetune(
            action,
            dive,
            teacher,
            exp.train_config("pretrain"),
            exp.train_config("finetune", task="attributes"),
            out_dir=out / "pretrain_finetune",
        )
        log.info("pretrain/finetune grid done")

    if "cost" in stages and {"vanilla", "direct"} <= set(exp.student_modes):
        seed = exp.student_seeds[0]
        cost_accuracy_table(
            {
                "vanilla": out / "students" / "vanilla" / f"seed{seed}" / "student.hnck",
                "direct": out / "students" / "direct" / f"seed{seed}" / "student.hnck",
                "teacher": out / "teacher" / "teacher.hnck",
            },
            action,
            runs=exp.runs,
            warmup=exp.warmup,
            out_dir=out / "cost",
        )

    written = []
    if "report" in stages:
        written = write_report(out, out / "report")
    return written

