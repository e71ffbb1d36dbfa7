"""
Training loops: teacher pretraining, student multitask training (vanilla,
hallucinet, direct, multiframe), sparse-frame sequence training and the
pretrain -> finetune grid.

Batch order is a pure function of (seed, epoch): each epoch draws its
permutation from a generator seeded with SeedSequence([seed, epoch]).
Teacher targets are computed once per split under no_grad; the teacher is
frozen, so they equal per-batch recomputation.
"""

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import inputs
from .checkpoint import save_checkpoint
from .config import ConfigError, __version__, config_hash, from_mapping, load_toml
from .evaluator import evaluate_sequence, evaluate_student, evaluate_teacher
from .losses import (
    LossBundle,
    attribute_loss,
    classification_loss,
    hallucination_loss,
    mtl_loss,
    quality_loss,
)
from .models import (
    SequenceConfig,
    SequenceModel,
    StudentConfig,
    StudentModel,
    TeacherConfig,
    TeacherModel,
    parameter_checksum,
)

log = logging.getLogger(__name__)

MODES = ("vanilla", "hallucinet", "direct", "multiframe")
TASKS = ("classification", "attributes", "quality")
STEP_EVERY = 5
STEP_FACTOR = 10.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    lam: float = 50.0
    mode: str = "hallucinet"
    k: int = 3
    schedule: str = "constant"  # or "step": divide lr by 10 every 5 epochs
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    task: str = "classification"
    stride: int = 16
    channels: tuple = ()  # empty = model default
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.schedule not in ("constant", "step"):
            raise ConfigError("schedule must be 'constant' or 'step'")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.k < 0 or self.stride < 1:
            raise ConfigError("k must be >= 0 and stride >= 1")
        self.channels = tuple(self.channels)

    @property
    def effective_lambda(self):
        return 0.0 if self.mode == "vanilla" else self.lam

    @classmethod
    def from_mapping(cls, data, where="train config"):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return from_mapping(cls, data, where=where)

    @classmethod
    def from_file(cls, path):
        data = load_toml(path)
        return cls.from_mapping(data.get("train", data), where=str(path))


@dataclass
class TrainingLog:
    """Per-epoch records. Wall-clock times are kept apart so the log file is reproducible."""

    config: dict
    records: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    checkpoint: str = ""

    def header(self):
        return {
            "config_hash": config_hash(self.config),
            "code_version": __version__,
            "config": self.config,
        }

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"header": self.header()}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        timing = [json.dumps({"epoch": i + 1, "wall_clock_s": t}) for i, t in enumerate(self.wall_clock)]
        path.with_suffix(".timing.jsonl").write_text("\n".join(timing) + "\n")

    @classmethod
    def read(cls, path):
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])["header"]
        return cls(config=header["config"], records=[json.loads(x) for x in lines[1:] if x])


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def epoch_batches(n, batch_size, seed, epoch):
    gen = torch.Generator().manual_seed(epoch_seed(seed, epoch))
    perm = torch.randperm(n, generator=gen)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def _optimizer(model, config):
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.lr)
    sched = None
    if config.schedule == "step":
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=STEP_EVERY, gamma=1.0 / STEP_FACTOR)
    return opt, sched


def _config_dict(config, **extra):
    d = json.loads(json.dumps(dataclasses.asdict(config)))
    d.update(extra)
    return d


def _finish_epoch(tlog, record, t0, model, out_dir, epoch, config, name):
    tlog.records.append(record)
    tlog.wall_clock.append(time.perf_counter() - t0)
    if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
        save_checkpoint(model, Path(out_dir) / f"{name}.epoch{epoch:03d}.hnck")
    log.info("%s epoch %d: %s", name, epoch, {k: v for k, v in record.items() if k != "epoch"})


def _bundle_means(bundles):
    return {
        "train_L_mt": float(np.mean([b.L_mt for b in bundles])),
        "train_L_hallu": float(np.mean([b.L_hallu for b in bundles])),
        "train_L_MTL": float(np.mean([b.L_MTL for b in bundles])),
    }


# -- teacher ------------------------------------------------------------------


def train_teacher(data, config, out_dir=None):
    """Fit the 3D teacher on full clips, then freeze it."""
    train = data["train"]
    n, T, C, H, W = train.frames.shape
    if train.class_ids is None:
        raise ValueError("teacher training needs clip-level class labels")
    n_classes = len(train.manifest.class_names) if train.manifest else int(train.class_ids.max()) + 1
    tcfg = TeacherConfig(
        in_channels=C,
        frames=T,
        height=H,
        width=W,
        num_classes=n_classes,
        init_seed=config.seed,
        **({"channels": config.channels} if config.channels else {}),
    )
    torch.manual_seed(config.seed)
    teacher = TeacherModel(tcfg)
    x = torch.from_numpy(train.frames)
    y = torch.from_numpy(train.class_ids)
    opt, sched = _optimizer(teacher, config)
    tlog = TrainingLog(config=_config_dict(config, model="teacher", arch=dataclasses.asdict(tcfg)))
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        teacher.train()
        losses = []
        for idx in epoch_batches(n, config.batch_size, config.seed, epoch):
            _, logits = teacher(x[idx])
            loss = classification_loss(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if sched:
            sched.step()
        record = {"epoch": epoch, "train_L_mt": float(np.mean(losses))}
        record["train_top1"] = evaluate_teacher(teacher, train).metrics["top1"]
        if "val" in data:
            record["val_top1"] = evaluate_teacher(teacher, data["val"]).metrics["top1"]
        _finish_epoch(tlog, record, t0, teacher, out_dir, epoch, config, "teacher")
    teacher.freeze()
    if out_dir:
        path = Path(out_dir) / "teacher.hnck"
        save_checkpoint(teacher, path)
        tlog.checkpoint = str(path)
        tlog.write(Path(out_dir) / "train_log.jsonl")
    return teacher, tlog


# -- student ------------------------------------------------------------------


def student_config_for(data, teacher, config):
    _, T, C, H, W = data["train"].frames.shape
    manifest = data["train"].manifest
    n_classes = len(manifest.class_names) if manifest else int(data["train"].class_ids.max()) + 1
    return StudentConfig(
        in_channels=C,
        height=H,
        width=W,
        feature_dim=teacher.config.feature_dim,
        num_classes=n_classes,
        frames=2 if config.mode == "multiframe" else 1,
        direct=config.mode == "direct",
        init_seed=config.seed,
        **({"channels": config.channels} if config.channels else {}),
    )


def _check_teacher(teacher, feature_dim):
    if not getattr(teacher, "frozen", False):
        raise ValueError("teacher must be frozen before student training")
    if teacher.config.feature_dim != feature_dim:
        raise ValueError(
            f"teacher feature width {teacher.config.feature_dim} != student hallucination width {feature_dim}"
        )


def train_student(data, teacher, config, out_dir=None, student=None):
    """Minimize L_mt + lambda * L_hallu on center frames (pairs in multiframe mode).

    Vanilla mode runs the same loop with lambda forced to 0.
    """
    scfg = student.config if student is not None else student_config_for(data, teacher, config)
    _check_teacher(teacher, scfg.feature_dim)
    checksum = parameter_checksum(teacher)
    torch.manual_seed(config.seed)
    if student is None:
        student = StudentModel(scfg)
    lam = config.effective_lambda
    train = data["train"]
    x = inputs.student_inputs(train, scfg.frames, config.k)
    y = torch.from_numpy(train.class_ids)
    targets = inputs.clip_targets(teacher, train)
    val = data.get("val")
    val_targets = inputs.clip_targets(teacher, val) if val is not None else None
    opt, sched = _optimizer(student, config)
    tlog = TrainingLog(config=_config_dict(config, model="student", arch=dataclasses.asdict(scfg)))
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        student.train()
        bundles = []
        for idx in epoch_batches(len(x), config.batch_size, config.seed, epoch):
            out = student(x[idx])
            l_mt = classification_loss(out.class_logits, y[idx])
            l_h = hallucination_loss(out.hallucinated, targets[idx])
            loss = mtl_loss(l_mt, l_h, lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            bundles.append(LossBundle(l_mt.item(), l_h.item(), loss.item(), lam))
        if sched:
            sched.step()
        tlog.batches.extend(bundles)
        record = {"epoch": epoch, "lambda": lam, **_bundle_means(bundles)}
        if val is not None:
            record.update(_student_val_metrics(student, val, val_targets, lam, config.k))
        _finish_epoch(tlog, record, t0, student, out_dir, epoch, config, "student")
    student.eval()
    if parameter_checksum(teacher) != checksum:
        raise RuntimeError("teacher parameters changed during student training")
    if out_dir:
        path = Path(out_dir) / "student.hnck"
        save_checkpoint(student, path, meta={"mode": config.mode, "lambda": lam, "k": config.k})
        tlog.checkpoint = str(path)
        tlog.write(Path(out_dir) / "train_log.jsonl")
    return student, tlog


def _student_val_metrics(student, val, val_targets, lam, k):
    student.eval()
    with torch.no_grad():
        out = student(inputs.student_inputs(val, student.config.frames, k))
        l_mt = classification_loss(out.class_logits, torch.from_numpy(val.class_ids)).item()
        l_h = hallucination_loss(out.hallucinated, val_targets).item()
        top1 = float((out.class_logits.argmax(-1).numpy() == val.class_ids).mean())
    return {"val_L_mt": l_mt, "val_L_hallu": l_h, "val_L_MTL": l_mt + lam * l_h, "val_top1": top1}


# -- sequence -----------------------------------------------------------------


def _sequence_task_loss(agg, attrs, quality, task):
    if task == "attributes":
        return attribute_loss(agg.attribute_logits, attrs)
    if task == "quality":
        return quality_loss(agg.quality, quality)
    raise ValueError(f"sequence training needs task 'attributes' or 'quality', not {task!r}")


def train_sequence_model(data, config, student=None, teacher=None, out_dir=None):
    """Sparse-sample each sequence, encode frames with the student, aggregate with the LSTM.

    In hallucinet mode every sampled frame also regresses the teacher
    features of the T-frame window starting at that frame.
    """
    train = data["train"]
    if train.frames.shape[1] < config.stride:
        raise ValueError(f"sequence shorter than stride {config.stride}")
    lam = config.effective_lambda
    if teacher is None and lam > 0:
        raise ValueError("hallucination training needs a teacher")
    if teacher is not None:
        _check_teacher(teacher, teacher.config.feature_dim)
        checksum = parameter_checksum(teacher)
    torch.manual_seed(config.seed)
    if student is not None:
        student = copy.deepcopy(student)
        for p in student.parameters():
            p.requires_grad_(True)
    else:
        _, _, C, H, W = train.frames.shape
        student = StudentModel(
            StudentConfig(
                in_channels=C,
                height=H,
                width=W,
                feature_dim=teacher.config.feature_dim if teacher is not None else 64,
                frames=2 if config.mode == "multiframe" else 1,
                init_seed=config.seed,
                **({"channels": config.channels} if config.channels else {}),
            )
        )
    if teacher is not None and student.config.feature_dim != teacher.config.feature_dim:
        raise ValueError("student hallucination width differs from teacher feature width")
    model = SequenceModel(SequenceConfig(hidden=config.hidden, init_seed=config.seed), student=student)
    nf = student.config.frames
    x = inputs.sequence_inputs(train, config.stride, nf, config.k)
    attrs = torch.from_numpy(train.attributes)
    quality = torch.from_numpy(train.quality).float()
    targets = inputs.window_targets(teacher, train, config.stride) if teacher is not None else None
    val = data.get("val")
    val_targets = inputs.window_targets(teacher, val, config.stride) if teacher is not None and val is not None else None
    opt, sched = _optimizer(model, config)
    tlog = TrainingLog(
        config=_config_dict(config, model="sequence", arch=dataclasses.asdict(model.config))
    )
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        bundles = []
        for idx in epoch_batches(len(x), config.batch_size, config.seed, epoch):
            agg, hallucinated = model(x[idx])
            l_mt = _sequence_task_loss(agg, attrs[idx], quality[idx], config.task)
            if targets is not None:
                l_h = hallucination_loss(hallucinated, targets[idx])
            else:
                l_h = torch.zeros(())
            loss = mtl_loss(l_mt, l_h, lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            bundles.append(LossBundle(l_mt.item(), l_h.item(), loss.item(), lam))
        if sched:
            sched.step()
        tlog.batches.extend(bundles)
        record = {"epoch": epoch, "lambda": lam, **_bundle_means(bundles)}
        if val is not None:
            metrics = ["attributes", "spearman"] + (["hallucination"] if teacher is not None else [])
            rep = evaluate_sequence(model, val, teacher, config.stride, config.k, metrics, targets=val_targets)
            record["val_attribute_accuracy"] = rep.metrics["attribute_accuracy"]
            record["val_mean_attribute_accuracy"] = rep.metrics["mean_attribute_accuracy"]
            record["val_spearman"] = rep.metrics["spearman"]
            if teacher is not None:
                record["val_L_hallu"] = rep.metrics["hallucination_error"]
        _finish_epoch(tlog, record, t0, model, out_dir, epoch, config, "sequence")
    model.eval()
    if teacher is not None and parameter_checksum(teacher) != checksum:
        raise RuntimeError("teacher parameters changed during sequence training")
    if out_dir:
        path = Path(out_dir) / "sequence.hnck"
        save_checkpoint(
            model, path, meta={"mode": config.mode, "lambda": lam, "task": config.task, "stride": config.stride, "k": config.k}
        )
        tlog.checkpoint = str(path)
        tlog.write(Path(out_dir) / "train_log.jsonl")
    return model, tlog


# -- pretrain -> finetune -----------------------------------------------------


def config_diff(a, b):
    da, db = dataclasses.asdict(a), dataclasses.asdict(b)
    return sorted(k for k in da if da[k] != db[k])


def pretrain_then_finetune(pretrain_data, finetune_data, teacher, config_pre, config_fine, out_dir=None):
    """The 2x2 grid: pretrain with/without hallucination x finetune with/without.

    Cells share every setting except lambda; with-hallucination cells use the
    lambda given in each config.
    """
    geo_pre = pretrain_data["train"].frames.shape[2:]
    geo_fine = finetune_data["train"].frames.shape[2:]
    if geo_pre != geo_fine:
        raise ValueError(f"frame geometry differs: {geo_pre} vs {geo_fine}")
    pre_cfgs = {
        False: dataclasses.replace(config_pre, mode="hallucinet", lam=0.0),
        True: dataclasses.replace(config_pre, mode="hallucinet"),
    }
    fine_cfgs = {
        False: dataclasses.replace(config_fine, mode="hallucinet", lam=0.0),
        True: dataclasses.replace(config_fine, mode="hallucinet"),
    }
    out = Path(out_dir) if out_dir else None
    cells = []
    for pre_h, pcfg in pre_cfgs.items():
        pdir = out / f"pretrain_{'hallu' if pre_h else 'plain'}" if out else None
        pretrained, _ = train_student(pretrain_data, teacher, pcfg, out_dir=pdir)
        for fine_h, fcfg in fine_cfgs.items():
            fdir = out / f"cell_pre-{int(pre_h)}_fine-{int(fine_h)}" if out else None
            model, _ = train_sequence_model(finetune_data, fcfg, student=pretrained, teacher=teacher, out_dir=fdir)
            cell = {
                "pretrain_hallucination": pre_h,
                "finetune_hallucination": fine_h,
                "pretrain_lambda": pcfg.lam,
                "finetune_lambda": fcfg.lam,
                "checkpoint": f"{fdir.name}/sequence.hnck" if fdir else "",
            }
            for split in ("val", "test"):
                if split in finetune_data:
                    rep = evaluate_sequence(model, finetune_data[split], None, fcfg.stride, fcfg.k, ["attributes"])
                    cell[f"{split}_attribute_accuracy"] = rep.metrics["attribute_accuracy"]
                    cell[f"{split}_mean_attribute_accuracy"] = rep.metrics["mean_attribute_accuracy"]
            cells.append(cell)
    report = {
        "cells": cells,
        "pretrain_config_diff": config_diff(pre_cfgs[False], pre_cfgs[True]),
        "finetune_config_diff": config_diff(fine_cfgs[False], fine_cfgs[True]),
    }
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "pretrain_finetune.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report
