"""Figures rendered from a run's trace, written next to ``trace.txt``.

* ``frames.png``: delivered and tampered frame counts per link type and frame kind.
* ``timeline.png``: every frame by sequence number and link, marked by adversary action.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .netsim import Kind, LinkKind, Trace  # noqa: E402

ACTION_STYLE = {
    "pass": ("o", "tab:blue"),
    "drop": ("x", "tab:red"),
    "modify": ("D", "tab:orange"),
    "inject": ("^", "tab:purple"),
    "record": ("s", "tab:green"),
    "blocked": ("v", "tab:gray"),
}
PNG_METADATA = {"Software": None}


def frame_action(action: str) -> str:
    """Collapse a trace action column to one category for plotting."""
    if action in ("pass", ""):
        return "pass"
    first = action.split(",")[0].split(":")[0]
    return first if first in ACTION_STYLE else "blocked"


def kind_counts(trace: Trace) -> dict[tuple[str, str], int]:
    counts: Counter = Counter()
    for frame, _ in trace.frames:
        counts[(frame.link.kind.value, frame.kind.value)] += 1
    return dict(counts)


def plot_frame_counts(trace: Trace, path: Path, title: str = "") -> Path:
    counts = kind_counts(trace)
    links = [k.value for k in LinkKind]
    kinds = [k.value for k in Kind]
    fig, ax = plt.subplots(figsize=(7, 4))
    bottom = [0] * len(links)
    for kind in kinds:
        values = [counts.get((link, kind), 0) for link in links]
        if any(values):
            ax.bar(links, values, bottom=bottom, label=kind)
            bottom = [b + v for b, v in zip(bottom, values)]
    ax.set_ylabel("frames")
    ax.set_title(f"{title}: frames by link" if title else "frames by link")
    if any(bottom):
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_timeline(trace: Trace, path: Path, title: str = "") -> Path:
    rows = sorted({str(f.link) for f, _ in trace.frames})
    index = {name: i for i, name in enumerate(rows)}
    fig, ax = plt.subplots(figsize=(9, max(2.5, 0.4 * len(rows) + 1.5)))
    by_action: dict[str, list[tuple[int, int]]] = {}
    for frame, action in trace.frames:
        by_action.setdefault(frame_action(action), []).append((frame.seq, index[str(frame.link)]))
    for action, points in sorted(by_action.items()):
        marker, color = ACTION_STYLE[action]
        xs, ys = zip(*points)
        ax.scatter(xs, ys, marker=marker, color=color, s=18, label=action)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows, fontsize="small")
    ax.set_xlabel("sequence number")
    ax.set_title(f"{title}: frame timeline" if title else "frame timeline")
    if by_action:
        ax.legend(fontsize="small", loc="upper left")
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def write_figures(trace: Trace, out_dir: str | Path, title: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [plot_frame_counts(trace, out / "frames.png", title),
            plot_timeline(trace, out / "timeline.png", title)]
