"""Figures and a delimited summary from a finished run directory.

Everything is read back from the CSV files the search wrote, so a report
can be produced long after the run and on another machine.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import read_metrics  # noqa: E402

__all__ = ["read_credits", "render", "summary_rows"]

FIGURES = ("entropy.png", "accuracy.png", "cost.png", "credits.png")


def read_credits(path) -> list[tuple[int, int, int, int, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch,cell,i,j,credit":
        raise ValueError(f"{path}: unexpected credits header")
    out = []
    for line in lines[1:]:
        if line.strip():
            e, c, i, j, r = line.split(",")
            out.append((int(e), int(c), int(i), int(j), float(r)))
    return out


def summary_rows(run_dir) -> list[tuple[str, str]]:
    """Key/value pairs describing the final epoch."""
    rows = read_metrics(Path(run_dir) / "metrics.csv")
    last = rows[-1]
    return [
        ("epochs", str(last.epoch)),
        ("final_train_loss", f"{last.train_loss:.6f}"),
        ("final_search_val_acc", f"{last.search_val_acc:.6f}"),
        ("final_child_val_acc", f"{last.child_val_acc:.6f}"),
        ("final_gap", f"{abs(last.search_val_acc - last.child_val_acc):.6f}"),
        ("first_entropy", f"{rows[0].mean_entropy:.6f}"),
        ("final_entropy", f"{last.mean_entropy:.6f}"),
        ("final_expected_cost", f"{last.expected_cost:.6f}"),
    ]


def render(run_dir, out_dir=None) -> list[Path]:
    """Write the standard figures for one run; returns their paths."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run
    out.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(run / "metrics.csv")
    ep = np.array([r.epoch for r in rows])
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r.mean_entropy for r in rows], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean edge entropy (nats)")
    ax2 = ax.twinx()
    ax2.plot(ep, [r.temperature for r in rows], color="gray", ls="--", lw=1)
    ax2.set_ylabel("temperature", color="gray")
    fig.tight_layout()
    written.append(_save(fig, out / "entropy.png"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r.search_val_acc for r in rows], label="search")
    ax.plot(ep, [r.child_val_acc for r in rows], label="child")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    written.append(_save(fig, out / "accuracy.png"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r.expected_cost for r in rows])
    ax.set_xlabel("epoch")
    ax.set_ylabel("expected normalised cost")
    fig.tight_layout()
    written.append(_save(fig, out / "cost.png"))

    cpath = run / "credits.csv"
    if cpath.exists():
        credits = read_credits(cpath)
        if credits:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            keys = sorted({(c, i, j) for _, c, i, j, _ in credits})
            for key in keys:
                pts = [(e, r) for e, c, i, j, r in credits if (c, i, j) == key]
                ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1, label=f"cell {key[0]} ({key[1]},{key[2]})")
            ax.set_xlabel("epoch")
            ax.set_ylabel("edge credit")
            if len(keys) <= 8:
                ax.legend(fontsize=7)
            fig.tight_layout()
            written.append(_save(fig, out / "credits.png"))
    return written


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
