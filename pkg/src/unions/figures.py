"""Matplotlib rendering for the report paths.

Every delimited output (separation trajectories, 2-D projections,
per-direction scores, tuning dynamics) gets a figure rendered next to it.
Import stays lazy so library use never pays for a matplotlib import.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


_MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*")


def cwr_scatter(coords, labels: Sequence[str], title: str, path: str | Path) -> Path:
    """2-D projected decoder states, one color/marker per language."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    langs = sorted(set(labels))
    for i, lang in enumerate(langs):
        pick = [j for j, l in enumerate(labels) if l == lang]
        ax.scatter(coords[pick, 0], coords[pick, 1], s=8, alpha=0.6,
                   marker=_MARKERS[i % len(_MARKERS)], label=lang)
    ax.set_title(title)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def sep_curve(steps: Sequence[int], seps: Sequence[float],
              selected_step: int | None, path: str | Path) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(steps, seps, marker="o", lw=1.2)
    if selected_step is not None:
        ax.axvline(selected_step, color="tab:red", ls="--", lw=1.0,
                   label=f"selected @ {selected_step}")
        ax.legend(fontsize=8)
    ax.set_xlabel("tuning step")
    ax.set_ylabel("separation degree")
    ax.set_title("separation trajectory")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def score_bars(report: dict, path: str | Path) -> Path:
    """Per-direction BLEU and off-target ratio from one evaluation report."""
    plt = _plt()
    keys = sorted(report["directions"])
    bleus = [report["directions"][k]["bleu"] for k in keys]
    otrs = [100.0 * report["directions"][k]["otr"] for k in keys]
    x = range(len(keys))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 4.6), sharex=True)
    ax1.bar(x, bleus, color="tab:blue")
    ax1.set_ylabel("BLEU")
    ax2.bar(x, otrs, color="tab:orange")
    ax2.set_ylabel("OTR %")
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(keys, rotation=45, ha="right", fontsize=8)
    ax1.set_title(f"per-direction scores ({report['phase']} @ {report['checkpoint_step']})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def tune_dynamics(steps: Sequence[int], otrs: Sequence[float],
                  bleus: Sequence[float], selected_step: int | None,
                  path: str | Path) -> Path:
    """Zero-shot OTR/BLEU against tuning step, with the selected checkpoint."""
    plt = _plt()
    fig, ax1 = plt.subplots(figsize=(5.5, 3.4))
    ax1.plot(steps, [100.0 * o for o in otrs], color="tab:orange", marker="o",
             lw=1.2, label="OTR %")
    ax1.set_xlabel("tuning step")
    ax1.set_ylabel("zero-shot OTR %", color="tab:orange")
    ax2 = ax1.twinx()
    ax2.plot(steps, bleus, color="tab:blue", marker="s", lw=1.2, label="BLEU")
    ax2.set_ylabel("zero-shot BLEU", color="tab:blue")
    if selected_step is not None:
        ax1.axvline(selected_step, color="tab:red", ls="--", lw=1.0)
    ax1.set_title("tuning dynamics")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
