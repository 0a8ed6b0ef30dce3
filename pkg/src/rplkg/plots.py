"""Figure rendering for the report path.

Renders method-accuracy bars and per-class selected-prompt histograms
to image files next to the delimited report output.
"""

from __future__ import annotations

import json
import math
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evalharness import EvalReport


def plot_method_accuracies(reports: list[EvalReport], out_path: str) -> str:
    """Grouped accuracy bars, one bar per report row."""
    labels = [f"{r.method}" + (f" (k={r.k})" if r.k is not None else "") for r in reports]
    accs = [100.0 * r.accuracy for r in reports]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels) + 2), 4))
    ax.bar(range(len(labels)), accs, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    title = reports[0].dataset if reports else ""
    ax.set_title(title or "method comparison")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_selection_histograms(dump_lines: Iterable[str], out_path: str,
                              max_classes: int = 12) -> str:
    """Per-class bar charts of how often each prompt was selected.

    Input is the selected-prompt JSONL dump ({class_id, prompt_text,
    count} per line).
    """
    by_class: dict[int, list[tuple[str, int]]] = {}
    for line in dump_lines:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        by_class.setdefault(int(obj["class_id"]), []).append(
            (obj.get("prompt_text", ""), int(obj["count"])))
    class_ids = sorted(by_class)[:max_classes]
    n = max(len(class_ids), 1)
    cols = min(3, n)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(5 * cols, 3 * rows), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for i, c in enumerate(class_ids):
        ax = axes[i // cols][i % cols]
        ax.set_axis_on()
        texts, counts = zip(*sorted(by_class[c], key=lambda tc: -tc[1]))
        short = [t if len(t) <= 32 else t[:29] + "..." for t in texts]
        ax.barh(range(len(short)), counts, color="tab:orange")
        ax.set_yticks(range(len(short)))
        ax.set_yticklabels(short, fontsize=7)
        ax.invert_yaxis()
        ax.set_title(f"class {c}", fontsize=9)
        ax.set_xlabel("selections")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
