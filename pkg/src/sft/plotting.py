"""Robustness-curve SVGs built from sweep CSV rows."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_TITLES = {"cls": "classification", "loc": "localization"}
MODEL_STYLES = {"ref": ("Ref", "tab:blue", "o"), "sft": ("SFT", "tab:red", "s")}


def plot_robustness(rows: list, family: str, metric: str, path) -> Path:
    """One SVG: robustness vs maximum added intensity, all models overlaid.

    Output bytes depend only on ``rows`` (fixed hash salt, no date stamp).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sel = [r for r in rows if r["family"] == family and r["metric"] == metric]
    models = sorted({r["model"] for r in sel})
    with matplotlib.rc_context({"svg.hashsalt": "sft", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        for m in models:
            pts = sorted((float(r["level"]), float(r["robustness"])) for r in sel if r["model"] == m)
            label, color, marker = MODEL_STYLES.get(m, (m, None, "^"))
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=marker, color=color, label=label)
        ax.set_xlabel("maximum added intensity")
        ax.set_ylabel(f"{METRIC_TITLES.get(metric, metric)} robustness")
        ax.set_title(family)
        ax.set_ylim(0.0, 1.05)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def plot_sweep_rows(rows: list, out_dir, stem: str | None = None) -> list:
    """Write one SVG per (family, metric) present in ``rows``."""
    out = []
    for family in sorted({r["family"] for r in rows}):
        for metric in ("cls", "loc"):
            if any(r["family"] == family and r["metric"] == metric for r in rows):
                name = f"{stem or family}_{metric}.svg"
                out.append(plot_robustness(rows, family, metric, Path(out_dir) / name))
    return out
