"""Report rendering: score CSVs, the systems-by-attacks FAR table, and the
matplotlib figures written next to the delimited outputs."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport


def write_score_csv(path, template_ids, probe_ids, matrix) -> None:
    """Score matrix as CSV: header row of template ids, one row per probe."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe"] + list(template_ids))
        for pid, row in zip(probe_ids, matrix):
            writer.writerow([pid] + [repr(float(v)) for v in row])


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "k", "far", "target_mass_before", "target_mass_after"])
        for r in rows:
            writer.writerow(
                [
                    repr(r["fraction"]),
                    r["k"],
                    repr(r["far"]),
                    repr(r["target_mass_before"]),
                    repr(r["target_mass_after"]),
                ]
            )


def far_table(reports: list[EvalReport]):
    """Rows (attack name, {system: FAR}) with the bona fide baseline first."""
    attacks = []
    for rep in reports:
        for name in rep.master_fars:
            if name not in attacks:
                attacks.append(name)
    header = [f"{rep.system} ({rep.mode})" if rep.mode else rep.system for rep in reports]
    rows = [("bona fide", [rep.impostor_far for rep in reports])]
    for name in attacks:
        rows.append((name, [rep.master_fars.get(name) for rep in reports]))
    return header, rows


def write_far_table_csv(path, reports: list[EvalReport]) -> None:
    header, rows = far_table(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack"] + header)
        for name, fars in rows:
            writer.writerow([name] + ["" if v is None else repr(v) for v in fars])


def format_far_table(reports: list[EvalReport]) -> str:
    """Human-readable systems-by-attacks FAR table (percentages)."""
    header, rows = far_table(reports)
    names = ["attack \\ system"] + header
    widths = [max(len(names[0]), max(len(r[0]) for r in rows))]
    widths += [max(len(h), 8) for h in header]
    lines = ["  ".join(n.ljust(w) for n, w in zip(names, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for name, fars in rows:
        cells = [name.ljust(widths[0])]
        for v, w in zip(fars, widths[1:]):
            cells.append(("-" if v is None else f"{100 * v:.2f}%").rjust(w))
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def plot_score_distributions(path, genuine, impostor, threshold) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(
        min(np.min(genuine), np.min(impostor)), max(np.max(genuine), np.max(impostor)), 40
    )
    ax.hist(impostor, bins=bins, alpha=0.6, label="impostor", color="tab:red", density=True)
    ax.hist(genuine, bins=bins, alpha=0.6, label="genuine", color="tab:green", density=True)
    ax.axvline(threshold, color="k", linestyle="--", label=f"threshold {threshold:.3f}")
    ax.set_xlabel("match score")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attack_trace(path, best_scores, title="evolution of the best match score") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(best_scores, label="generation best")
    ax.plot(np.maximum.accumulate(best_scores), linestyle="--", label="running best")
    ax.set_xlabel("generation")
    ax.set_ylabel("mean match score")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_trace(path, losses) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel("targeted loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_topk_fars(path, rows) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    fracs = [100 * r["fraction"] for r in rows]
    fars = [100 * r["far"] for r in rows]
    ax.plot(fracs, fars, marker="o")
    ax.set_xlabel("top-k fraction (%)")
    ax.set_ylabel("FAR (%)")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_image_grid(path, images: dict) -> None:
    """Labelled grayscale images side by side (masters, probes)."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3))
    if n == 1:
        axes = [axes]
    for ax, (label, img) in zip(axes, images.items()):
        ax.imshow(img.pixels, cmap="gray", vmin=0, vmax=1)
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
