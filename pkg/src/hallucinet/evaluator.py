"""Metrics, evaluation passes and machine-readable reports."""

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from . import inputs
from .losses import hallucination_loss
from .models import parameter_checksum


class MetricError(ValueError):
    pass


def top1_accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels differ in length")
    if predictions.size == 0:
        raise MetricError("empty input")
    return float(np.mean(predictions == labels))


def spearman_correlation(pred_scores, true_scores):
    """Pearson correlation of average ranks (ties share the mean rank)."""
    a = np.asarray(pred_scores, dtype=np.float64)
    b = np.asarray(true_scores, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("score vectors must be 1-d and equal length")
    if len(a) < 2:
        raise MetricError("need at least 2 scores")
    ra, rb = rankdata(a) - (len(a) + 1) / 2, rankdata(b) - (len(b) + 1) / 2
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0:
        raise MetricError("constant score vector: rank correlation undefined")
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))


def _to_labels(group):
    if torch.is_tensor(group):
        group = group.detach().cpu().numpy()
    group = np.asarray(group)
    return group.argmax(axis=-1) if group.ndim == 2 else group


def attribute_accuracies(pred_attribute_groups, labels):
    """Per-group top-1; groups are logits [N, A] or predicted indices [N]."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != len(pred_attribute_groups):
        raise MetricError(
            f"{len(pred_attribute_groups)} groups but labels of shape {labels.shape}"
        )
    return [
        top1_accuracy(_to_labels(g), labels[:, i]) for i, g in enumerate(pred_attribute_groups)
    ]


def confusion_counts(predictions, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


# -- model evaluation ---------------------------------------------------------


def _batched(model, x, batch_size=64):
    x = x.to(next(model.parameters()).dtype)
    outs = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(model(x[s : s + batch_size]))
    return outs


def student_predictions(student, arrays, k=3):
    """Run a student over the center frame (pair) of every clip in a split."""
    student.eval()
    x = inputs.student_inputs(arrays, student.config.frames, k)
    outs = _batched(student, x)
    return {
        "hallucinated": torch.cat([o.hallucinated for o in outs]),
        "class_logits": torch.cat([o.class_logits for o in outs]),
        "attribute_logits": [
            torch.cat([o.attribute_logits[g] for o in outs]) for g in range(len(outs[0].attribute_logits))
        ],
        "quality": torch.cat([o.quality for o in outs]),
    }


def per_clip_hallucination(hallucinated, targets):
    """Loss of each sample on its own; works for [N, D] and [N, S, D]."""
    return np.array([hallucination_loss(h, t).item() for h, t in zip(hallucinated, targets)])


def hallucination_error(student, teacher, arrays, k=3):
    """Mean per-clip hallucination loss of a student over a split."""
    if len(arrays) == 0:
        raise MetricError("empty split")
    if not getattr(teacher, "frozen", False):
        raise ValueError("teacher must be frozen")
    if student.config.feature_dim != teacher.config.feature_dim:
        raise ValueError("student hallucination width differs from teacher feature width")
    pred = student_predictions(student, arrays, k)["hallucinated"]
    targets = inputs.clip_targets(teacher, arrays)
    return float(np.mean(per_clip_hallucination(pred, targets)))


@dataclass
class EvalReport:
    split: str
    metrics: dict
    confusion: list
    sample_count: int
    checkpoint_hash: str
    per_sample: list = field(default_factory=list)

    def __post_init__(self):
        if self.confusion and int(np.sum(self.confusion)) != self.sample_count:
            raise MetricError("confusion counts do not sum to the sample count")

    def summary(self):
        d = asdict(self)
        d.pop("per_sample")
        return d

    def write(self, path):
        """Line-delimited per-sample records followed by one summary record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r, sort_keys=True) for r in self.per_sample]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        lines = Path(path).read_text().splitlines()
        summary = json.loads(lines[-1])["summary"]
        return cls(per_sample=[json.loads(x) for x in lines[:-1]], **summary)

    def to_text(self):
        rows = [f"split: {self.split}  samples: {self.sample_count}  checkpoint: {self.checkpoint_hash}"]
        for key, value in self.metrics.items():
            if isinstance(value, list):
                value = " ".join(f"{v:.4f}" for v in value)
            elif isinstance(value, float):
                value = f"{value:.6f}"
            rows.append(f"  {key:<28} {value}")
        return "\n".join(rows) + "\n"


def evaluate_student(student, arrays, teacher=None, k=3, metrics=None):
    metrics = set(metrics or ("top1", "attributes", "hallucination"))
    out = student_predictions(student, arrays, k)
    pred = out["class_logits"].argmax(-1).numpy()
    labels = arrays.class_ids
    res = {}
    if "top1" in metrics:
        res["top1"] = top1_accuracy(pred, labels)
    if "attributes" in metrics:
        res["attribute_accuracy"] = attribute_accuracies(out["attribute_logits"], arrays.attributes)
    if "spearman" in metrics:
        res["spearman"] = spearman_correlation(out["quality"].numpy(), arrays.quality)
    per_clip = None
    if teacher is not None and "hallucination" in metrics:
        targets = inputs.clip_targets(teacher, arrays)
        per_clip = per_clip_hallucination(out["hallucinated"], targets)
        res["hallucination_error"] = float(np.mean(per_clip))
    samples = []
    for i, cid in enumerate(arrays.clip_ids):
        rec = {"clip_id": cid, "label": int(labels[i]), "pred": int(pred[i])}
        if per_clip is not None:
            rec["hallucination"] = float(per_clip[i])
        samples.append(rec)
    n_classes = out["class_logits"].shape[1]
    return EvalReport(
        split=arrays.manifest.split if arrays.manifest else "",
        metrics=res,
        confusion=confusion_counts(pred, labels, n_classes).tolist(),
        sample_count=len(labels),
        checkpoint_hash=parameter_checksum(student)[:16],
        per_sample=samples,
    )


def evaluate_teacher(teacher, arrays):
    teacher.eval()
    outs = _batched(teacher, torch.from_numpy(arrays.frames))
    logits = torch.cat([o[1] for o in outs])
    pred = logits.argmax(-1).numpy()
    return EvalReport(
        split=arrays.manifest.split if arrays.manifest else "",
        metrics={"top1": top1_accuracy(pred, arrays.class_ids)},
        confusion=confusion_counts(pred, arrays.class_ids, logits.shape[1]).tolist(),
        sample_count=len(pred),
        checkpoint_hash=parameter_checksum(teacher)[:16],
        per_sample=[
            {"clip_id": c, "label": int(l), "pred": int(p)}
            for c, l, p in zip(arrays.clip_ids, arrays.class_ids, pred)
        ],
    )


def sequence_predictions(model, arrays, stride=16, k=3):
    model.eval()
    x = inputs.sequence_inputs(arrays, stride, model.student.config.frames, k)
    outs = _batched(model, x, batch_size=32)
    return {
        "attribute_logits": [
            torch.cat([o[0].attribute_logits[g] for o in outs])
            for g in range(len(outs[0][0].attribute_logits))
        ],
        "quality": torch.cat([o[0].quality for o in outs]),
        "hallucinated": torch.cat([o[1] for o in outs]),
    }


def evaluate_sequence(model, arrays, teacher=None, stride=16, k=3, metrics=None, targets=None):
    """`targets` may carry precomputed window features; otherwise they come from `teacher`."""
    metrics = set(metrics or ("attributes", "spearman", "hallucination"))
    out = sequence_predictions(model, arrays, stride, k)
    res = {}
    attr_pred = [g.argmax(-1).numpy() for g in out["attribute_logits"]]
    if "attributes" in metrics:
        accs = attribute_accuracies(attr_pred, arrays.attributes)
        res["attribute_accuracy"] = accs
        res["mean_attribute_accuracy"] = float(np.mean(accs))
    if "spearman" in metrics:
        q = out["quality"].numpy()
        try:
            res["spearman"] = spearman_correlation(q, arrays.quality)
        except MetricError:
            res["spearman"] = None
    per_seq = None
    if (teacher is not None or targets is not None) and "hallucination" in metrics:
        if targets is None:
            targets = inputs.window_targets(teacher, arrays, stride)
        per_seq = per_clip_hallucination(out["hallucinated"], targets)
        res["hallucination_error"] = float(np.mean(per_seq))
    samples = []
    for i, cid in enumerate(arrays.clip_ids):
        rec = {
            "clip_id": cid,
            "attributes": [int(a) for a in arrays.attributes[i]],
            "pred_attributes": [int(g[i]) for g in attr_pred],
            "quality": float(arrays.quality[i]),
            "pred_quality": float(out["quality"][i]),
        }
        if per_seq is not None:
            rec["hallucination"] = float(per_seq[i])
        samples.append(rec)
    return EvalReport(
        split=arrays.manifest.split if arrays.manifest else "",
        metrics=res,
        confusion=[],
        sample_count=len(arrays),
        checkpoint_hash=parameter_checksum(model)[:16],
        per_sample=samples,
    )


def evaluate_model(model, arrays, teacher=None, metrics=None, k=3, stride=16):
    if model.kind == "teacher":
        return evaluate_teacher(model, arrays)
    if model.kind == "student":
        return evaluate_student(model, arrays, teacher, k, metrics)
    return evaluate_sequence(model, arrays, teacher, stride, k, metrics)


def reduction_percent(single, multi):
    """Relative drop from the 1-frame to the 2-frame hallucination error, in percent."""
    return 100.0 * (single - multi) / single


FRAME_METHODS = {"hallucinet": "HalluciNet(1f)", "multiframe": "HalluciNet(2f)"}


def compare_single_vs_multiframe(data, teacher, config_1f, config_2f, seeds=(0,), split="test", runs=30, warmup=3, out_dir=None):
    """Train HalluciNet(1f) and HalluciNet(2f) with matched seeds and compare them.

    The two configs may differ only in mode ("hallucinet" vs "multiframe").
    Returns {"reports": {method: [EvalReport per seed]}, "rows": [...],
    "reduction_percent": ..., "timing": {...}}; wall times stay in "timing".
    """
    # imported here: trainer and profiler both import this module
    from .profiler import measure_latency
    from .trainer import config_diff, train_student

    if config_1f.mode != "hallucinet" or config_2f.mode != "multiframe":
        raise ValueError("expected a hallucinet config and a multiframe config")
    extra = [k for k in config_diff(config_1f, config_2f) if k not in ("mode", "seed")]
    if extra:
        raise ValueError(f"configs differ beyond frame count: {extra}")
    out = Path(out_dir) if out_dir else None
    reports, timing = {}, {}
    for cfg in (config_1f, config_2f):
        method = FRAME_METHODS[cfg.mode]
        for seed in seeds:
            cfg_s = dataclasses.replace(cfg, seed=seed)
            run_dir = out / cfg.mode / f"seed{seed}" if out else None
            student, _ = train_student(data, teacher, cfg_s, out_dir=run_dir)
            rep = evaluate_student(student, data[split], teacher, k=cfg.k, metrics=["top1", "hallucination"])
            reports.setdefault(method, []).append(rep)
            if run_dir:
                rep.write(run_dir / f"eval_{split}.jsonl")
        shape = student.config.input_shape
        raw = out / "timing" / f"{cfg.mode}.ns.txt" if out else None
        mean, std = measure_latency(student, shape, runs, warmup, raw)
        timing[method] = {"mean_s": mean, "std_s": std}
    rows = []
    for method, reps in reports.items():
        rows.append(
            {
                "method": method,
                "seeds": list(seeds),
                "top1": float(np.mean([r.metrics["top1"] for r in reps])),
                "hallucination_error": float(np.mean([r.metrics["hallucination_error"] for r in reps])),
                "per_seed_hallucination_error": [r.metrics["hallucination_error"] for r in reps],
                "per_seed_top1": [r.metrics["top1"] for r in reps],
            }
        )
    reduction = reduction_percent(rows[0]["hallucination_error"], rows[1]["hallucination_error"])
    result = {"split": split, "k": config_2f.k, "rows": rows, "reduction_percent": reduction}
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "frame_comparison.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        (out / "timing").mkdir(exist_ok=True)
        (out / "timing" / "frame_timing.json").write_text(
            json.dumps({"runs": runs, "warmup": warmup, "rows": timing}, indent=1, sort_keys=True) + "\n"
        )
    return {**result, "reports": reports, "timing": timing}
