"""Metrics tables (TSV) and their matplotlib figure counterparts.

Tables are the machine-readable artifacts (byte-stable across reruns);
figures are rendered next to them for quick inspection.
"""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .config import format_value


def write_metrics(history: list[dict], path: str) -> None:
    """One row per training step: step, train_loss, val_score."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step\ttrain_loss\tval_score\n")
        for row in history:
            f.write(f"{row['step']}\t{format_value(float(row['train_loss']))}\t"
                    f"{format_value(float(row['val_score']))}\n")


def plot_training_curve(history: list[dict], path: str, title: str) -> None:
    steps = [row["step"] for row in history]
    losses = [row["train_loss"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, color="tab:blue", linewidth=1.0, label="query loss")
    ax.set_xlabel("step")
    ax.set_ylabel("query loss", color="tab:blue")
    val_points = [(r["step"], r["val_score"]) for r in history
                  if not math.isnan(r["val_score"])]
    if val_points:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val_points), color="tab:orange", marker="o",
                 linewidth=1.0, label="validation score")
        ax2.set_ylabel("validation score", color="tab:orange")
        ax2.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_eval_table(reports: list[dict], path: str) -> None:
    """Per-episode precision/recall/F1 plus a mean/std summary row."""
    f1s = [r["f1"] for r in reports]
    with open(path, "w", encoding="utf-8") as f:
        f.write("episode\tprecision\trecall\tf1\tpredicted\tgold\tcorrect\n")
        for r in reports:
            f.write(f"{r['episode']}\t{format_value(r['precision'])}\t"
                    f"{format_value(r['recall'])}\t{format_value(r['f1'])}\t"
                    f"{r['predicted']}\t{r['gold']}\t{r['correct']}\n")
        mean = float(sum(f1s) / len(f1s)) if f1s else 0.0
        std = float(math.sqrt(sum((x - mean) ** 2 for x in f1s) / len(f1s))) if f1s else 0.0
        f.write(f"mean\t-\t-\t{format_value(mean)}\t-\t-\t-\n")
        f.write(f"std\t-\t-\t{format_value(std)}\t-\t-\t-\n")


def plot_eval_scores(reports: list[dict], path: str, title: str) -> None:
    f1s = [r["f1"] for r in reports]
    labels = [str(r["episode"]) for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(f1s)), f1s, color="tab:blue")
    if f1s:
        mean = sum(f1s) / len(f1s)
        ax.axhline(mean, color="tab:orange", linestyle="--",
                   label=f"mean {mean:.3f}")
        ax.legend()
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("episode")
    ax.set_ylabel("micro F1")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
