"""
Prediction interchange: what a tracker hands to the evaluator.

One JSON file per video, ``<video_id>.json``, listing for each evaluated frame
the detections as ``(slot_id, box, objectness)``. The slot id is the track
identity. Both the end-to-end model and the tracking-by-detection baseline
write this format, so they are scored by the same code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from geometry import Box
from model import FramePredictions, VideoOwl, frames_tensor
from synthdata import GtTrack, SceneVideo, annotated_frames, annotation_step

SCHEMA_VERSION = 1

# Logit given to oracle detections; sigmoid(10) is ~0.99995.
ORACLE_OBJECTNESS = 10.0


class PredictionMismatchError(ValueError):
    """Predictions and annotations disagree about a video."""

    def __init__(self, video_id: str, reason: str):
        super().__init__(f"video {video_id}: {reason}")
        self.video_id = video_id


@dataclass(frozen=True)
class Detection:
    slot_id: int
    box: Box
    objectness: float  # logit


@dataclass
class VideoPredictions:
    video_id: str
    frame_indices: list[int]  # native frame index of each evaluated frame
    frames: list[list[Detection]]

    def __post_init__(self) -> None:
        if len(self.frame_indices) != len(self.frames):
            raise ValueError(f"{len(self.frame_indices)} frame indices for {len(self.frames)} frames")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame indices must be strictly increasing")
        for dets in self.frames:
            slots = [d.slot_id for d in dets]
            if len(set(slots)) != len(slots):
                raise ValueError(f"video {self.video_id}: a slot appears twice in one frame")

    def slot_ids(self) -> list[int]:
        return sorted({d.slot_id for dets in self.frames for d in dets})

    def at(self, frame_index: int) -> list[Detection]:
        try:
            return self.frames[self.frame_indices.index(frame_index)]
        except ValueError:
            return []

    def only_slots(self, keep: Iterable[int]) -> "VideoPredictions":
        keep = set(keep)
        return VideoPredictions(
            self.video_id, list(self.frame_indices), [[d for d in dets if d.slot_id in keep] for dets in self.frames]
        )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------
def predictions_to_json(preds: VideoPredictions) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "video_id": preds.video_id,
        "frames": [
            {
                "frame": idx,
                "detections": [
                    {"slot_id": d.slot_id, "box": list(d.box), "objectness": d.objectness} for d in dets
                ],
            }
            for idx, dets in zip(preds.frame_indices, preds.frames)
        ],
    }


def predictions_from_json(doc: dict) -> VideoPredictions:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported prediction schema_version {doc.get('schema_version')!r}")
    frames = doc["frames"]
    return VideoPredictions(
        str(doc["video_id"]),
        [int(f["frame"]) for f in frames],
        [
            [
                Detection(int(d["slot_id"]), Box(*(float(x) for x in d["box"])), float(d["objectness"]))
                for d in f["detections"]
            ]
            for f in frames
        ],
    )


def write_predictions(path: str | Path, preds: Iterable[VideoPredictions]) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for p in preds:
        text = json.dumps(predictions_to_json(p), indent=2, sort_keys=True) + "\n"
        (out / f"{p.video_id}.json").write_text(text, encoding="utf-8")
    return out


def read_predictions(path: str | Path) -> dict[str, VideoPredictions]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no prediction directory at {root}")
    out: dict[str, VideoPredictions] = {}
    for file in sorted(root.glob("*.json")):
        try:
            preds = predictions_from_json(json.loads(file.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PredictionMismatchError(file.stem, f"unreadable prediction file {file.name}: {exc}") from exc
        out[preds.video_id] = preds
    return out


def check_alignment(preds_by_video: Mapping[str, VideoPredictions], videos: Sequence[SceneVideo]) -> None:
    """Every video has predictions, and every prediction refers to a known video frame."""
    known = {v.video_id: v for v in videos}
    for video_id in preds_by_video:
        if video_id not in known:
            raise PredictionMismatchError(video_id, "predictions for a video that is not in the dataset")
    for video in videos:
        preds = preds_by_video.get(video.video_id)
        if preds is None:
            raise PredictionMismatchError(video.video_id, "no predictions")
        bad = [i for i in preds.frame_indices if not 0 <= i < video.num_frames]
        if bad:
            raise PredictionMismatchError(video.video_id, f"frame index {bad[0]} outside 0..{video.num_frames - 1}")


# ---------------------------------------------------------------------------
# Producing predictions
# ---------------------------------------------------------------------------
def eval_frame_indices(video: SceneVideo, eval_fps: float) -> list[int]:
    """Native frame indices a tracker running at ``eval_fps`` sees.

    ``eval_fps`` must be an integer multiple of the annotation rate and divide
    the native rate, so every annotated frame is among the returned ones.
    """
    annotation_step(eval_fps, video.annotation_fps)
    step = annotation_step(video.fps, eval_fps)
    return list(range(0, video.num_frames, step))


def restrict_to_annotated(preds: VideoPredictions, mask: np.ndarray | Sequence[bool]) -> VideoPredictions:
    """Drop every frame the boolean ``mask`` (indexed by native frame) leaves out."""
    mask = np.asarray(mask, dtype=bool)
    keep = [k for k, idx in enumerate(preds.frame_indices) if idx < mask.size and mask[idx]]
    return VideoPredictions(preds.video_id, [preds.frame_indices[k] for k in keep], [preds.frames[k] for k in keep])


def from_rollout(
    video_id: str, frame_indices: Sequence[int], pred: FramePredictions, objectness_floor: float = -np.inf
) -> VideoPredictions:
    """Turn a single-clip ``(T, Q, ...)`` rollout into interchange form; slot q keeps id q."""
    boxes = pred.boxes.detach().cpu().double().numpy()
    obj = pred.objectness.detach().cpu().double().numpy()
    if boxes.shape[0] != len(frame_indices):
        raise ValueError(f"rollout has {boxes.shape[0]} frames for {len(frame_indices)} indices")
    frames = [
        [
            Detection(q, Box(*(float(v) for v in boxes[t, q])), float(obj[t, q]))
            for q in range(boxes.shape[1])
            if obj[t, q] > objectness_floor
        ]
        for t in range(boxes.shape[0])
    ]
    return VideoPredictions(video_id, list(frame_indices), frames)


@torch.no_grad()
def track_video(
    model: VideoOwl, video: SceneVideo, prompts: torch.Tensor, eval_fps: float, propagate: bool = True
) -> VideoPredictions:
    """Roll the model over the video at ``eval_fps`` and keep the annotated frames."""
    indices = eval_frame_indices(video, eval_fps)
    model.eval()
    frames = frames_tensor(video.frames[indices], model.dtype)
    pred = model.rollout(frames, prompts, propagate=propagate).clip(0)
    return restrict_to_annotated(from_rollout(video.video_id, indices, pred), annotated_frames(video))


def oracle_predictions(video: SceneVideo, objectness: float = ORACLE_OBJECTNESS) -> VideoPredictions:
    """Ground truth copied into prediction form at every annotated frame."""
    indices = [int(i) for i in np.flatnonzero(annotated_frames(video))]
    frames = [
        [Detection(tr.track_id, tr.boxes[i], objectness) for tr in video.tracks if tr.boxes[i] is not None]
        for i in indices
    ]
    return VideoPredictions(video.video_id, indices, frames)


def gt_at(tracks: Sequence[GtTrack], frame_index: int) -> list[tuple[int, Box]]:
    return [(tr.track_id, tr.boxes[frame_index]) for tr in tracks if tr.boxes[frame_index] is not None]
