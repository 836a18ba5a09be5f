"""
Open-world tracking evaluation.

OWTA at a localization threshold is ``sqrt(DetRe * AssAcc)``: detection recall
ignores false positives, association accuracy scores identity consistency over
the true positives. Scores are averaged over the threshold set and reported per
class group (all / known / unknown) and per track-length bucket.

Before matching, predictions can be calibrated (frames whose score falls below
a fraction of the slot's best score become background) and made
non-overlapping (each grid cell goes to one instance).
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

import config as cfgmod
from assignment import solve_assignment
from geometry import Box, area, box_from_owned_cells, intersection, iou, rasterize
from predictions import Detection, VideoPredictions, check_alignment, gt_at, restrict_to_annotated
from synthdata import ClassCatalog, GtTrack, SceneVideo, annotated_frames

GROUPS = ("all", "known", "unknown")
BUCKETS = ("all", "short", "medium", "long")
REPORT_COLUMNS = ("group", "bucket", "alpha", "DetRe", "AssAcc", "OWTA")
SOT_COLUMNS = ("video_id", "track_id", "frames", "sot_3d_iou")


# ---------------------------------------------------------------------------
# Calibration and the non-overlap constraint
# ---------------------------------------------------------------------------
def calibrate_track(scores: Sequence[float], factor: float) -> list[bool]:
    """Keep frame i iff ``scores[i] >= factor * max(scores)``."""
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"calibration factor must be in [0, 1], got {factor}")
    if len(scores) == 0:
        return []
    cut = factor * max(scores)
    return [s >= cut for s in scores]


def calibrate(preds: VideoPredictions, factor: float) -> VideoPredictions:
    """Per-slot calibration in probability space (sigmoid of the objectness logit)."""
    if factor == 0.0:
        return preds
    best: dict[int, float] = {}
    for dets in preds.frames:
        for d in dets:
            best[d.slot_id] = max(best.get(d.slot_id, 0.0), float(expit(d.objectness)))
    frames = [[d for d in dets if float(expit(d.objectness)) >= factor * best[d.slot_id]] for dets in preds.frames]
    return VideoPredictions(preds.video_id, list(preds.frame_indices), frames)


def overlap_ranks(detections: Sequence[Detection], grid_size: int) -> list[float]:
    cell = 1.0 / (grid_size * grid_size)
    return [float(expit(d.objectness)) / max(area(d.box), cell) for d in detections]


def enforce_non_overlap(detections: Sequence[Detection], grid_size: int) -> list[Detection]:
    """Give every grid cell to at most one detection; shrink boxes to the cells they own.

    Rank is ``sigmoid(objectness) / max(area, one cell)``; detections that own no
    cell are dropped.
    """
    if not detections:
        return []
    ranks = overlap_ranks(detections, grid_size)
    grid = rasterize([d.box for d in detections], ranks, (grid_size, grid_size))
    out = []
    for i, d in enumerate(detections):
        box = box_from_owned_cells(grid, i)
        if box is not None:
            out.append(Detection(d.slot_id, box, d.objectness))
    return out


def constrain(preds: VideoPredictions, grid_size: int) -> VideoPredictions:
    return VideoPredictions(
        preds.video_id, list(preds.frame_indices), [enforce_non_overlap(dets, grid_size) for dets in preds.frames]
    )


# ---------------------------------------------------------------------------
# Matching and counting
# ---------------------------------------------------------------------------
@dataclass
class TrackMatchSet:
    """Matching result at one threshold.

    ``tps`` holds ``(frame, slot, gt)`` triples, ``fns`` ``(frame, gt)`` pairs and
    ``unmatched_preds`` ``(frame, slot)`` pairs, which are never scored.
    """

    alpha: float
    tps: list[tuple[int, int, int]] = field(default_factory=list)
    fns: list[tuple[int, int]] = field(default_factory=list)
    unmatched_preds: list[tuple[int, int]] = field(default_factory=list)


def match_frame(dets: Sequence[Detection], gts: Sequence[Box], alpha: float) -> list[tuple[int, int]]:
    """Max-cardinality, min-cost (1 - IoU) matching; pairs below ``alpha`` IoU are forbidden.

    Returns ``(detection index, gt index)`` pairs.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not dets or not gts:
        return []
    overlaps = np.array([[iou(d.box, g) for g in gts] for d in dets])
    cost = np.where(overlaps >= alpha, 1.0 - overlaps, math.inf)
    return solve_assignment(cost).pairs


def match_frames(
    preds: VideoPredictions, tracks: Sequence[GtTrack], frame_indices: Sequence[int], alpha: float
) -> TrackMatchSet:
    out = TrackMatchSet(alpha)
    for idx in frame_indices:
        dets = preds.at(idx)
        gts = gt_at(tracks, idx)
        pairs = match_frame(dets, [b for _, b in gts], alpha)
        det_hit = {r for r, _ in pairs}
        gt_hit = {c for _, c in pairs}
        out.tps.extend((idx, dets[r].slot_id, gts[c][0]) for r, c in pairs)
        out.fns.extend((idx, gts[c][0]) for c in range(len(gts)) if c not in gt_hit)
        out.unmatched_preds.extend((idx, dets[r].slot_id) for r in range(len(dets)) if r not in det_hit)
    return out


@dataclass
class Counts:
    """Sums that combine across videos before any ratio is taken."""

    tp: int = 0
    fn: int = 0
    assoc: float = 0.0  # sum over TPs of the per-TP association score

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fn + other.fn, self.assoc + other.assoc)


def association_sum(matches: TrackMatchSet) -> float:
    """Sum over TPs c of |TPA(c)| / (|TPA(c)| + |FNA(c)| + |FPA(c)|)."""
    pair_tp = Counter((slot, gt) for _, slot, gt in matches.tps)
    slot_tp = Counter(slot for _, slot, _ in matches.tps)
    gt_frames = Counter(gt for _, _, gt in matches.tps) + Counter(gt for _, gt in matches.fns)
    total = 0.0
    for (slot, gt), tpa in pair_tp.items():
        fna = gt_frames[gt] - tpa
        fpa = slot_tp[slot] - tpa
        total += tpa * tpa / (tpa + fna + fpa)
    return total


def counts_of(matches: TrackMatchSet) -> Counts:
    return Counts(len(matches.tps), len(matches.fns), association_sum(matches))


def detection_recall(c: Counts) -> float:
    """TP / (TP + FN); vacuously 1.0 without ground truth."""
    if c.tp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn)


def association_accuracy(c: Counts) -> float:
    """Mean per-TP association score; 0.0 without TPs, vacuously 1.0 without ground truth."""
    if c.tp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.assoc / c.tp


def owta_at(c: Counts) -> tuple[float, float, float]:
    det, ass = detection_recall(c), association_accuracy(c)
    return det, ass, math.sqrt(det * ass)


# ---------------------------------------------------------------------------
# Track selection
# ---------------------------------------------------------------------------
def track_length_buckets(
    tracks: Sequence[GtTrack], fps: float, annotation_fps: float, edges: tuple[float, float] = (3.0, 10.0)
) -> dict[int, str]:
    """short / medium / long per track, by the span between its first and last annotated frame.

    The span of a track seen on annotated frames a..b is ``(b - a + 1) / annotation_fps``
    seconds.
    """
    step = fps / annotation_fps
    out = {}
    for tr in tracks:
        frames = [i for i in tr.present_frames() if round(i / step) * step == i]
        if not frames:
            continue
        span = (round(frames[-1] / step) - round(frames[0] / step) + 1) / annotation_fps
        out[tr.track_id] = "short" if span < edges[0] else ("long" if span > edges[1] else "medium")
    return out


def select_tracks(video: SceneVideo, catalog: ClassCatalog, group: str, bucket: str, edges=(3.0, 10.0)) -> list[GtTrack]:
    if group not in GROUPS or bucket not in BUCKETS:
        raise ValueError(f"unknown group/bucket {group}/{bucket}")
    tracks = video.tracks
    if group == "known":
        tracks = [t for t in tracks if catalog.is_known(t.class_id)]
    elif group == "unknown":
        tracks = [t for t in tracks if not catalog.is_known(t.class_id)]
    if bucket != "all":
        buckets = track_length_buckets(tracks, video.fps, video.annotation_fps, edges)
        tracks = [t for t in tracks if buckets.get(t.track_id) == bucket]
    return tracks


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
def prepare(preds: VideoPredictions, video: SceneVideo, cfg: cfgmod.EvalConfig) -> VideoPredictions:
    """Annotated frames only, then calibration, then the non-overlap constraint."""
    out = restrict_to_annotated(preds, annotated_frames(video))
    out = calibrate(out, cfg.calibration_factor)
    if cfg.enforce_constraint:
        out = constrain(out, cfg.grid_size)
    return out


def video_counts(
    preds: VideoPredictions, tracks: Sequence[GtTrack], frame_indices: Sequence[int], thresholds: Sequence[float]
) -> list[Counts]:
    return [counts_of(match_frames(preds, tracks, frame_indices, a)) for a in thresholds]


@dataclass
class Report:
    rows: list[dict]

    def get(self, group: str = "all", bucket: str = "all", alpha: str | float = "mean") -> dict:
        for row in self.rows:
            if row["group"] == group and row["bucket"] == bucket and row["alpha"] == alpha:
                return row
        raise KeyError((group, bucket, alpha))

    def owta(self, group: str = "all", bucket: str = "all") -> float:
        return float(self.get(group, bucket)["OWTA"])


def _rows(group: str, bucket: str, thresholds: Sequence[float], counts: Sequence[Counts]) -> list[dict]:
    rows = []
    for a, c in zip(thresholds, counts):
        det, ass, score = owta_at(c)
        rows.append({"group": group, "bucket": bucket, "alpha": a, "DetRe": det, "AssAcc": ass, "OWTA": score})
    rows.append(
        {
            "group": group,
            "bucket": bucket,
            "alpha": "mean",
            "DetRe": float(np.mean([r["DetRe"] for r in rows])),
            "AssAcc": float(np.mean([r["AssAcc"] for r in rows])),
            "OWTA": float(np.mean([r["OWTA"] for r in rows])),
        }
    )
    return rows


def evaluate_dataset(
    preds_by_video: Mapping[str, VideoPredictions],
    videos: Sequence[SceneVideo],
    catalog: ClassCatalog,
    cfg: cfgmod.EvalConfig,
) -> Report:
    """Score predictions against every video; counts are summed over videos per threshold."""
    check_alignment(preds_by_video, videos)
    thresholds = list(cfg.thresholds)
    totals = {(g, b): [Counts() for _ in thresholds] for g in GROUPS for b in BUCKETS}
    for video in videos:
        prepared = prepare(preds_by_video[video.video_id], video, cfg)
        frame_indices = [int(i) for i in np.flatnonzero(annotated_frames(video))]
        for g in GROUPS:
            for b in BUCKETS:
                tracks = select_tracks(video, catalog, g, b, tuple(cfg.bucket_edges))
                per = video_counts(prepared, tracks, frame_indices, thresholds)
                totals[(g, b)] = [x + y for x, y in zip(totals[(g, b)], per)]
    rows = []
    for (g, b), counts in totals.items():
        rows.extend(_rows(g, b, thresholds, counts))
    return Report(rows)


def write_report(report: Report, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    csv_path = out / "report.csv"
    json_path.write_text(json.dumps({"rows": report.rows}, indent=2) + "\n", encoding="utf-8")
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)
    return json_path, csv_path


def read_report(path: str | Path) -> Report:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Report(list(doc["rows"]))


# ---------------------------------------------------------------------------
# Single-object tracking
# ---------------------------------------------------------------------------
def sot_3d_iou(pred: Sequence[Box | None], gt: Sequence[Box | None]) -> float:
    """Time-summed intersection over time-summed union of two frame-aligned tracks."""
    if len(pred) != len(gt):
        raise ValueError(f"tracks are not frame-aligned: {len(pred)} vs {len(gt)}")
    if all(g is None for g in gt):
        raise ValueError("ground-truth track is never present")
    inter = union = 0.0
    for p, g in zip(pred, gt):
        if p is None and g is None:
            continue
        if p is None or g is None:
            union += area(p if g is None else g)
            continue
        overlap = intersection(p, g)
        i = 0.0 if overlap is None else area(overlap)
        inter += i
        union += area(p) + area(g) - i
    return inter / union if union > 0 else 0.0


def select_sot_slot(detections: Sequence[Detection], gt_box: Box) -> int | None:
    """Slot whose box best overlaps the initial ground-truth box; ties go to the lower slot id."""
    best: tuple[float, int] | None = None
    for d in sorted(detections, key=lambda d: d.slot_id):
        score = iou(d.box, gt_box)
        if best is None or score > best[0]:
            best = (score, d.slot_id)
    return None if best is None else best[1]


def sot_predictions(preds: VideoPredictions, track: GtTrack) -> VideoPredictions:
    """Keep only the slot picked on the first evaluated frame where ``track`` is present."""
    for idx, dets in zip(preds.frame_indices, preds.frames):
        if track.boxes[idx] is not None:
            slot = select_sot_slot(dets, track.boxes[idx])
            return preds.only_slots([] if slot is None else [slot])
    raise ValueError(f"track {track.track_id} is not present on any predicted frame")


def sot_score(preds: VideoPredictions, track: GtTrack) -> float:
    """3D IoU of the single followed slot against ``track`` over the predicted frames."""
    single = sot_predictions(preds, track)
    pred_boxes = [dets[0].box if dets else None for dets in single.frames]
    gt_boxes = [track.boxes[i] for i in single.frame_indices]
    return sot_3d_iou(pred_boxes, gt_boxes)


def write_sot_report(
    out_dir: str | Path, video_id: str, track_id: int, num_frames: int, score: float
) -> tuple[Path, Path]:
    """One-row ``sot_report.json`` / ``sot_report.csv`` for a single followed track."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row = {"video_id": video_id, "track_id": track_id, "frames": num_frames, "sot_3d_iou": score}
    json_path = out / "sot_report.json"
    csv_path = out / "sot_report.csv"
    json_path.write_text(json.dumps({"rows": [row]}, indent=2) + "\n", encoding="utf-8")
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SOT_COLUMNS)
        writer.writeheader()
        writer.writerow(row)
    return json_path, csv_path
