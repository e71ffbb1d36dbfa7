"""
Cost accounting: analytic FLOPs, parameter counts and batch-1 latency.

FLOP convention: a multiply-accumulate is 2 FLOPs. A convolution costs
2 * output_elements * kernel_volume * in_channels, an affine map 2 * in * out,
ReLU and pooling 1 FLOP per output element, and an LSTM step
2 * 4H * (I + H) for the gate affines plus 9H elementwise ops.
"""

import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .evaluator import evaluate_student, evaluate_teacher
from .models import SequenceModel, StudentModel, TeacherModel, conv_stack_shapes

FLOP_CONVENTION = "multiply-accumulate = 2 FLOPs"


@dataclass
class CostReport:
    model_name: str
    params: int
    flops: int
    mean_s: float
    std_s: float
    runs: int
    warmup: int
    input_shape: tuple
    hardware: str


def conv_output_sizes(in_sizes, kernel=3, padding=0, stride=1):
    return tuple((n + 2 * padding - kernel) // stride + 1 for n in in_sizes)


def conv_flops(in_sizes, in_channels, out_channels, kernel=3, padding=0, stride=1):
    """2 * output_elements * kernel_volume * in_channels, output_elements counting channels."""
    positions = math.prod(conv_output_sizes(in_sizes, kernel, padding, stride))
    return 2 * positions * out_channels * kernel ** len(in_sizes) * in_channels


def linear_flops(in_features, out_features):
    return 2 * in_features * out_features


def _conv_stack_costs(stack, in_channels, in_sizes, prefix):
    rows = []
    sizes = conv_stack_shapes(in_sizes, len(stack.convs))
    cin = in_channels
    for i, conv in enumerate(stack.convs):
        cout = conv.out_channels
        positions = math.prod(sizes[i])
        rows.append(
            {
                "name": f"{prefix}.conv{i}",
                "flops": conv_flops(sizes[i], cin, cout, conv.kernel_size[0], conv.padding[0]),
                "params": sum(p.numel() for p in conv.parameters()),
            }
        )
        rows.append({"name": f"{prefix}.relu{i}", "flops": positions * cout, "params": 0})
        if sizes[i + 1] != sizes[i]:
            rows.append(
                {"name": f"{prefix}.pool{i}", "flops": math.prod(sizes[i + 1]) * cout, "params": 0}
            )
        cin = cout
    rows.append({"name": f"{prefix}.global_pool", "flops": cin, "params": 0})
    return rows


def _linear_row(name, layer):
    return {
        "name": name,
        "flops": linear_flops(layer.in_features, layer.out_features),
        "params": sum(p.numel() for p in layer.parameters()),
    }


def _student_costs(student, shape, prefix="student"):
    c = student.config
    frame_shape = shape[-3:]
    if frame_shape[0] != c.in_channels:
        raise ValueError(f"student expects {c.in_channels} channels, got shape {tuple(shape)}")
    rows = []
    for f in range(c.frames):
        tag = f"{prefix}.backbone" if c.frames == 1 else f"{prefix}.backbone[{f}]"
        backbone = _conv_stack_costs(student.backbone, c.in_channels, frame_shape[1:], tag)
        if f > 0:  # shared weights are counted once
            for r in backbone:
                r["params"] = 0
        rows += backbone
    rows.append(_linear_row(f"{prefix}.hallucinate", student.hallucinate))
    rows.append(_linear_row(f"{prefix}.classifier", student.classifier))
    for i, head in enumerate(student.attribute_heads):
        rows.append(_linear_row(f"{prefix}.attribute_head{i}", head))
    rows.append(_linear_row(f"{prefix}.quality_head", student.quality_head))
    return rows


def layer_costs(model, input_shape=None):
    """Per-layer {name, flops, params} rows for one batch-1 forward pass."""
    if input_shape is None:
        if isinstance(model, SequenceModel):
            raise ValueError("sequence models need an explicit input shape [S, C, H, W]")
        input_shape = model.config.input_shape
    shape = tuple(input_shape)
    if isinstance(model, TeacherModel):
        T, C, H, W = shape
        if C != model.config.in_channels:
            raise ValueError(f"teacher expects {model.config.in_channels} channels, got {C}")
        rows = _conv_stack_costs(model.backbone, C, (T, H, W), "teacher.backbone")
        rows.append(_linear_row("teacher.classifier", model.classifier))
        return rows
    if isinstance(model, StudentModel):
        return _student_costs(model, shape)
    if isinstance(model, SequenceModel):
        steps = shape[0]
        student = model.student
        rows = []
        one_step = _student_costs(student, shape[1:])
        # task heads of the student are not evaluated in the sequence path
        one_step = [r for r in one_step if "backbone" in r["name"] or "hallucinate" in r["name"]]
        for s in range(steps):
            for r in one_step:
                rows.append({**r, "name": f"step{s}.{r['name']}", "params": r["params"] if s == 0 else 0})
        lstm = model.aggregator.lstm
        I, Hd = lstm.input_size, lstm.hidden_size
        lstm_params = sum(p.numel() for p in lstm.parameters())
        for s in range(steps):
            rows.append(
                {"name": f"step{s}.lstm", "flops": 2 * 4 * Hd * (I + Hd) + 9 * Hd, "params": lstm_params if s == 0 else 0}
            )
        for i, head in enumerate(model.aggregator.attribute_heads):
            rows.append(_linear_row(f"aggregator.attribute_head{i}", head))
        rows.append(_linear_row("aggregator.quality_head", model.aggregator.quality_head))
        # the student's unused heads still hold parameters
        unused = sum(
            p.numel()
            for name, p in student.named_parameters()
            if not name.startswith(("backbone", "hallucinate"))
        )
        rows.append({"name": "student.unused_heads", "flops": 0, "params": unused})
        return rows
    raise TypeError(f"no cost model for {type(model).__name__}")


def estimate_flops(model, input_shape=None):
    return int(sum(r["flops"] for r in layer_costs(model, input_shape)))


def hardware_string():
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return (
        f"{cpu}; logical_cpus={os.cpu_count()}; torch={torch.__version__}; "
        f"intra_op_threads={torch.get_num_threads()}"
    )


def _example_input(model, input_shape):
    shape = tuple(input_shape or model.config.input_shape)
    gen = torch.Generator().manual_seed(0)
    return torch.rand((1,) + shape, generator=gen)


def time_inferences(model, input_shape=None, runs=30, warmup=3):
    """Nanosecond durations of `runs` batch-1 forward passes after `warmup` untimed ones."""
    if runs < 10:
        raise ValueError("need at least 10 timed runs")
    if warmup < 3:
        raise ValueError("need at least 3 warmup runs")
    x = _example_input(model, input_shape)
    model.eval()
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            samples = []
            for _ in range(runs):
                t0 = time.perf_counter_ns()
                model(x)
                samples.append(time.perf_counter_ns() - t0)
    finally:
        torch.set_num_threads(threads)
    return samples


def write_timing_file(path, samples_ns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{int(s)}\n" for s in samples_ns))


def read_timing_file(path):
    return [int(x) for x in Path(path).read_text().split()]


def timing_summary(samples_ns):
    s = np.asarray(samples_ns, dtype=np.float64) * 1e-9
    return float(s.mean()), float(s.std(ddof=1))


def measure_latency(model, input_shape=None, runs=30, warmup=3, raw_path=None):
    """(mean, stddev) seconds per inference, computed from the raw timing file when one is written."""
    samples = time_inferences(model, input_shape, runs, warmup)
    if raw_path is not None:
        write_timing_file(raw_path, samples)
        samples = read_timing_file(raw_path)
    return timing_summary(samples)


def cost_report(model, name, input_shape=None, runs=30, warmup=3, raw_path=None):
    from .models import count_parameters

    shape = tuple(input_shape or model.config.input_shape)
    mean, std = measure_latency(model, shape, runs, warmup, raw_path)
    return CostReport(
        model_name=name,
        params=count_parameters(model),
        flops=estimate_flops(model, shape),
        mean_s=mean,
        std_s=std,
        runs=runs,
        warmup=warmup,
        input_shape=shape,
        hardware=hardware_string(),
    )


ROW_NAMES = {"vanilla": "2D-CNN", "direct": "HalluciNet_direct", "teacher": "3D-CNN (teacher)"}


def cost_accuracy_table(checkpoints, data, runs=30, warmup=3, out_dir=None, splits=("val", "test")):
    """Accuracy vs time/inference vs FLOPs vs params for the two 2D rows and the teacher.

    `checkpoints` maps "vanilla", "direct" and "teacher" to checkpoint paths.
    The deterministic columns go to cost_accuracy.json; timings (raw
    nanosecond files plus their summary) go under timing/.
    """
    for key in ROW_NAMES:
        if key not in checkpoints or not Path(checkpoints[key]).exists():
            raise FileNotFoundError(f"missing {key} checkpoint: {checkpoints.get(key)}")
    out = Path(out_dir) if out_dir else None
    rows, timing = [], {}
    for key, label in ROW_NAMES.items():
        model = load_checkpoint(checkpoints[key])
        acc = {}
        for split in splits:
            if split in data:
                if key == "teacher":
                    rep = evaluate_teacher(model, data[split])
                else:
                    rep = evaluate_student(model, data[split], metrics=["top1"])
                acc[split] = rep.metrics["top1"]
        shape = tuple(model.config.input_shape)
        rows.append(
            {
                "key": key,
                "model": label,
                "accuracy": acc,
                "flops": estimate_flops(model, shape),
                "params": sum(p.numel() for p in model.parameters()),
                "input_shape": list(shape),
            }
        )
        raw = out / "timing" / f"{key}.ns.txt" if out else None
        mean, std = measure_latency(model, shape, runs, warmup, raw)
        timing[key] = {"mean_s": mean, "std_s": std, "raw": str(raw) if raw else None}
    by_key = {r["key"]: r for r in rows}
    deterministic = {
        "flop_convention": FLOP_CONVENTION,
        "rows": rows,
        "flops_ratio_student_over_teacher": by_key["vanilla"]["flops"] / by_key["teacher"]["flops"],
    }
    timing_block = {
        "runs": runs,
        "warmup": warmup,
        "hardware": hardware_string(),
        "batch_size": 1,
        "rows": timing,
        "time_ratio_teacher_over_student": timing["teacher"]["mean_s"] / timing["vanilla"]["mean_s"],
        "time_fraction_student_of_teacher": timing["vanilla"]["mean_s"] / timing["teacher"]["mean_s"],
    }
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost_accuracy.json").write_text(json.dumps(deterministic, indent=1, sort_keys=True) + "\n")
        (out / "timing" / "cost_timing.json").write_text(json.dumps(timing_block, indent=1, sort_keys=True) + "\n")
    return {**deterministic, "timing": timing_block}


def cost_report_dict(report):
    d = asdict(report)
    d["input_shape"] = list(d["input_shape"])
    d["flop_convention"] = FLOP_CONVENTION
    return d
