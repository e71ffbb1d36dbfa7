"""
Table files (tab-separated) and figures built from stored machine-readable results.

Expected layout under the results directory (what `run_pipeline` writes):

    students/<mode>/seed<s>/eval_test.jsonl, train_log.jsonl
    teacher/eval_test.jsonl
    cost/cost_accuracy.json, cost/timing/cost_timing.json
    frames/frame_comparison.json, frames/timing/frame_timing.json
    sequence/<task>/<mode>/eval_test.jsonl
    pretrain_finetune/pretrain_finetune.json

Missing inputs simply skip the tables that need them. Wall-clock columns go
to *_timing.tsv files so the remaining tables are reproducible byte for byte.
"""

import json
from pathlib import Path

import numpy as np

from .evaluator import EvalReport, reduction_percent
from .synthvid import ATTRIBUTE_NAMES
from .trainer import TrainingLog

STUDENT_LABELS = {
    "vanilla": "2D-CNN",
    "hallucinet": "HalluciNet",
    "direct": "HalluciNet_direct",
    "multiframe": "HalluciNet(2f)",
}
SEQUENCE_LABELS = {
    "vanilla": "w/o hallucination",
    "hallucinet": "HalluciNet(1f)",
    "multiframe": "HalluciNet(2f)",
}


def _fmt(v, digits=4):
    if v is None:
        return "NA"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x, digits) for x in v)
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def write_tsv(path, header, rows):
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def read_tsv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def _seed_dirs(mode_dir):
    return sorted(
        (p for p in Path(mode_dir).glob("seed*") if (p / "eval_test.jsonl").exists()),
        key=lambda p: int(p.name[4:]),
    )


def student_results(results):
    """{mode: [(seed, EvalReport), ...]} for every evaluated student run."""
    out = {}
    root = Path(results) / "students"
    for mode in STUDENT_LABELS:
        dirs = _seed_dirs(root / mode)
        if dirs:
            out[mode] = [(int(d.name[4:]), EvalReport.read(d / "eval_test.jsonl")) for d in dirs]
    return out


def table_1a(results, out):
    runs = student_results(results)
    if not runs:
        return None
    rows = []
    teacher_eval = Path(results) / "teacher" / "eval_test.jsonl"
    if teacher_eval.exists():
        rep = EvalReport.read(teacher_eval)
        rows.append(["3D-CNN (teacher)", "-", 100 * rep.metrics["top1"], "NA", "NA"])
    for mode, reps in runs.items():
        top1 = [r.metrics["top1"] * 100 for _, r in reps]
        err = [r.metrics.get("hallucination_error") for _, r in reps]
        rows.append(
            [
                STUDENT_LABELS[mode],
                ",".join(str(s) for s, _ in reps),
                float(np.mean(top1)),
                top1,
                float(np.mean(err)) * 1e3 if None not in err else None,
            ]
        )
    return write_tsv(
        out / "table1a.tsv",
        ["method", "seeds", "top1_mean_pct", "top1_per_seed_pct", "hallucination_error_x1e-3"],
        rows,
    )


def table_3(results, out):
    path = Path(results) / "cost" / "cost_accuracy.json"
    if not path.exists():
        return None
    cost = json.loads(path.read_text())
    rows = []
    for r in cost["rows"]:
        acc = r["accuracy"]
        rows.append(
            [r["model"], 100 * acc["val"] if "val" in acc else None, 100 * acc["test"] if "test" in acc else None, r["flops"], r["params"]]
        )
    written = [
        write_tsv(out / "table3.tsv", ["model", "val_top1_pct", "test_top1_pct", "flops", "params"], rows)
    ]
    timing_path = Path(results) / "cost" / "timing" / "cost_timing.json"
    if timing_path.exists():
        timing = json.loads(timing_path.read_text())
        trows = [
            [r["model"], 1e3 * timing["rows"][r["key"]]["mean_s"], 1e3 * timing["rows"][r["key"]]["std_s"]]
            for r in cost["rows"]
        ]
        trows.append(["teacher/student time ratio", timing["time_ratio_teacher_over_student"], None])
        trows.append(["student/teacher time fraction", timing["time_fraction_student_of_teacher"], None])
        written.append(write_tsv(out / "table3_timing.tsv", ["model", "time_per_inference_ms", "std_ms"], trows))
    return written


def _sequence_reports(results, task):
    root = Path(results) / "sequence" / task
    out = {}
    for mode in SEQUENCE_LABELS:
        p = root / mode / "eval_test.jsonl"
        if p.exists():
            out[mode] = EvalReport.read(p)
    return out


def table_4a(results, out):
    reps = _sequence_reports(results, "attributes")
    if not reps:
        return None
    rows = []
    for mode, rep in reps.items():
        accs = [100 * a for a in rep.metrics["attribute_accuracy"]]
        rows.append([SEQUENCE_LABELS[mode], *accs, float(np.mean(accs))])
    header = ["method", *(f"{n}_pct" for n in ATTRIBUTE_NAMES), "mean_pct"]
    return write_tsv(out / "table4a.tsv", header, rows)


def table_4b(results, out):
    reps = _sequence_reports(results, "quality")
    if not reps:
        return None
    rows = [[SEQUENCE_LABELS[m], r.metrics.get("spearman")] for m, r in reps.items()]
    return write_tsv(out / "table4b.tsv", ["method", "spearman"], rows)


def _frame_rows(e1, e2, extra1=(), extra2=()):
    return [
        ["HalluciNet(1f)", *extra1, e1 * 1e3, "-"],
        ["HalluciNet(2f)", *extra2, e2 * 1e3, f"{-reduction_percent(e1, e2):+.2f}%"],
    ]


def table_6a(results, out):
    path = Path(results) / "frames" / "frame_comparison.json"
    if not path.exists():
        return None
    cmp = json.loads(path.read_text())
    by = {r["method"]: r for r in cmp["rows"]}
    r1, r2 = by["HalluciNet(1f)"], by["HalluciNet(2f)"]
    rows = _frame_rows(r1["hallucination_error"], r2["hallucination_error"], [100 * r1["top1"]], [100 * r2["top1"]])
    written = [
        write_tsv(out / "table6a.tsv", ["method", "top1_pct", "hallucination_error_x1e-3", "change"], rows)
    ]
    timing_path = Path(results) / "frames" / "timing" / "frame_timing.json"
    if timing_path.exists():
        timing = json.loads(timing_path.read_text())["rows"]
        trows = [[m, 1e3 * t["mean_s"], 1e3 * t["std_s"]] for m, t in timing.items()]
        written.append(write_tsv(out / "table6a_timing.tsv", ["method", "time_per_inference_ms", "std_ms"], trows))
    return written


def table_6b(results, out):
    reps = _sequence_reports(results, "attributes")
    if "hallucinet" not in reps or "multiframe" not in reps:
        return None
    r1, r2 = reps["hallucinet"], reps["multiframe"]
    rows = _frame_rows(
        r1.metrics["hallucination_error"],
        r2.metrics["hallucination_error"],
        [100 * r1.metrics["mean_attribute_accuracy"]],
        [100 * r2.metrics["mean_attribute_accuracy"]],
    )
    return write_tsv(
        out / "table6b.tsv", ["method", "mean_attribute_pct", "hallucination_error_x1e-3", "change"], rows
    )


def table_7(results, out):
    path = Path(results) / "pretrain_finetune" / "pretrain_finetune.json"
    if not path.exists():
        return None
    grid = json.loads(path.read_text())
    rows = []
    for c in grid["cells"]:
        accs = [100 * a for a in c["test_attribute_accuracy"]]
        rows.append(
            [
                "yes" if c["pretrain_hallucination"] else "no",
                "yes" if c["finetune_hallucination"] else "no",
                *accs,
                float(np.mean(accs)),
            ]
        )
    header = ["pretrain_hallucination", "finetune_hallucination", *(f"{n}_pct" for n in ATTRIBUTE_NAMES), "mean_pct"]
    return write_tsv(out / "table7.tsv", header, rows)


def _figures(results, out):
    from . import plotting

    written = []
    logs = {}
    for mode in STUDENT_LABELS:
        dirs = _seed_dirs(Path(results) / "students" / mode)
        if dirs and (dirs[0] / "train_log.jsonl").exists():
            logs[f"{STUDENT_LABELS[mode]} ({dirs[0].name})"] = TrainingLog.read(dirs[0] / "train_log.jsonl").records
    if logs:
        written.append(plotting.plot_loss_curves(logs, out / "loss_curves.png"))
    cost = Path(results) / "cost"
    if (cost / "cost_accuracy.json").exists() and (cost / "timing" / "cost_timing.json").exists():
        rows = json.loads((cost / "cost_accuracy.json").read_text())["rows"]
        timing = json.loads((cost / "timing" / "cost_timing.json").read_text())["rows"]
        written.append(plotting.plot_cost_accuracy(rows, timing, out / "cost_accuracy.png"))
    frames = Path(results) / "frames" / "frame_comparison.json"
    if frames.exists():
        rows = json.loads(frames.read_text())["rows"]
        written.append(plotting.plot_frame_comparison(rows, out / "frame_comparison.png"))
    return written


TABLES = (table_1a, table_3, table_4a, table_4b, table_6a, table_6b, table_7)


def write_report(results, out_dir, figures=True):
    """Write every table whose inputs exist; returns the list of files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fn in TABLES:
        res = fn(results, out)
        if res is None:
            continue
        written += res if isinstance(res, list) else [res]
    if figures:
        written += _figures(results, out)
    return [Path(p) for p in written]
