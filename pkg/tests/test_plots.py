import csv
from pathlib import Path

import plots
from model import SLOT_DUMP_COLUMNS
from trainloss import LOG_COLUMNS


def _write(path: Path, columns, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _is_png(path: Path) -> bool:
    return path.read_bytes()[:4] == b"\x89PNG"


def test_plot_slots(tmp_path: Path):
    rows = [
        {"slot": s, "frame": t, "cx": 0.1 * t, "cy": 0.2 * s, "w": 0.1, "h": 0.1, "objectness": 1.0}
        for s in range(2)
        for t in range(4)
    ]
    out = plots.plot_slots(_write(tmp_path / "slots.csv", SLOT_DUMP_COLUMNS, rows), tmp_path / "png" / "slots.png")
    assert _is_png(out)


def test_plot_slots_without_rows(tmp_path: Path):
    out = plots.plot_slots(_write(tmp_path / "slots.csv", SLOT_DUMP_COLUMNS, []), tmp_path / "slots.png")
    assert _is_png(out)


def test_plot_training_log_with_blank_eval_columns(tmp_path: Path):
    rows = [
        {"step": 1, "phase": "pseudo", "lr": 1e-4, "loss": 2.0, "loss_cls": 1.0, "loss_l1": 0.5, "loss_giou": 0.5},
        {"step": 2, "phase": "mixed", "lr": 2e-4, "loss": 1.5, "loss_cls": 0.8, "loss_l1": 0.4, "loss_giou": 0.3,
         "owta_known": 0.2, "owta_unknown": 0.1},
    ]
    out = plots.plot_training_log(_write(tmp_path / "log.csv", LOG_COLUMNS, rows), tmp_path / "log.png")
    assert _is_png(out)
