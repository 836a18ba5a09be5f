"""Static PNG charts from report, slot-dump and training-log CSVs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def plot_report(report_csv: str | Path, out_png: str | Path) -> Path:
    """OWTA per threshold, one line per class group (bucket ``all``)."""
    rows = [r for r in _read_csv(report_csv) if r["bucket"] == "all" and r["alpha"] != "mean"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for group in ("all", "known", "unknown"):
        pts = [(float(r["alpha"]), float(r["OWTA"])) for r in rows if r["group"] == group]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=group)
    ax.set_xlabel("localization threshold")
    ax.set_ylabel("OWTA")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, out_png)


def plot_slots(slots_csv: str | Path, out_png: str | Path) -> Path:
    """Box-center trace of every slot across the sliding-window frames."""
    traces: dict[int, list[tuple[float, float]]] = defaultdict(list)
    for r in _read_csv(slots_csv):
        traces[int(r["slot"])].append((float(r["cx"]), float(r["cy"])))
    fig, ax = plt.subplots(figsize=(5, 5))
    for slot, pts in sorted(traces.items()):
        ax.plot(*zip(*pts), marker=".", label=f"slot {slot}")
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_aspect("equal")
    if traces:
        ax.legend(fontsize="small")
    return _save(fig, out_png)


def plot_training_log(log_csv: str | Path, out_png: str | Path) -> Path:
    rows = _read_csv(log_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for key in ("loss", "loss_cls", "loss_l1", "loss_giou"):
        vals = [float(r[key]) if r.get(key) else float("nan") for r in rows]
        ax.plot(steps, vals, label=key)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, out_png)


def _save(fig, out_png: str | Path) -> Path:
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
