"""Figures written next to the delimited report tables."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(logs, path):
    """One panel for the main-task loss and one for validation hallucination loss.

    `logs` maps a run label to its list of per-epoch records.
    """
    with plt.rc_context(RC):
        fig, (ax_mt, ax_h) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for label, records in logs.items():
            epochs = [r["epoch"] for r in records]
            ax_mt.plot(epochs, [r["train_L_mt"] for r in records], label=label)
            if all("val_L_hallu" in r for r in records):
                ax_h.plot(epochs, [r["val_L_hallu"] * 1e3 for r in records], label=label)
        ax_mt.set_xlabel("epoch")
        ax_mt.set_ylabel("train main-task loss")
        ax_h.set_xlabel("epoch")
        ax_h.set_ylabel(r"val $L_{hallu}$ ($\times 10^{-3}$)")
        ax_mt.legend(frameon=False)
        return _save(fig, path)


def plot_cost_accuracy(rows, timing, path, split="test"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        for row in rows:
            t_ms = timing[row["key"]]["mean_s"] * 1e3
            acc = row["accuracy"].get(split, float("nan")) * 100
            ax.scatter([t_ms], [acc], s=12 + row["flops"] / 2e5)
            ax.annotate(row["model"], (t_ms, acc), textcoords="offset points", xytext=(4, 4))
        ax.set_xscale("log")
        ax.set_xlabel("time / inference (ms, log)")
        ax.set_ylabel(f"{split} top-1 (%)")
        return _save(fig, path)


def plot_frame_comparison(rows, path):
    """Bar chart of held-out hallucination error, 1-frame vs 2-frame."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        labels = [r["method"] for r in rows]
        values = [r["hallucination_error"] * 1e3 for r in rows]
        ax.bar(labels, values, color=["0.6", "0.3"][: len(rows)])
        ax.set_ylabel(r"$L_{hallu}$ ($\times 10^{-3}$)")
        return _save(fig, path)
