"""
Tracking-by-detection baseline.

Per-frame proposals come from the same model run without query propagation;
consecutive frames are linked by optimal bipartite matching on cosine
similarity of the proposals' class embeddings. A random-association control
links the same proposals with shuffled identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from assignment import FORBIDDEN, solve_assignment
from geometry import Box
from model import VideoOwl, frames_tensor
from predictions import Detection, VideoPredictions, eval_frame_indices, restrict_to_annotated
from synthdata import SceneVideo, annotated_frames


@dataclass(frozen=True)
class Proposal:
    frame: int  # position in the proposal sequence
    box: Box
    embedding: np.ndarray
    objectness: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("proposal embedding must be finite")


@dataclass
class LinkedTrack:
    track_id: int
    proposals: dict[int, Proposal] = field(default_factory=dict)  # frame -> proposal

    @property
    def last_frame(self) -> int:
        return max(self.proposals)

    def last(self) -> Proposal:
        return self.proposals[self.last_frame]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


@torch.no_grad()
def proposals_from_model(
    model: VideoOwl, frames: torch.Tensor, prompts: torch.Tensor, top_k: int
) -> list[list[Proposal]]:
    """Top-k slots per frame by objectness from independent per-frame runs."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    model.eval()
    pred = model.rollout(frames, prompts, propagate=False).clip(0)
    boxes = pred.boxes.double().numpy()
    obj = pred.objectness.double().numpy()
    emb = pred.embeddings.double().numpy()
    out = []
    for t in range(boxes.shape[0]):
        # stable sort keeps the lower slot first on equal objectness
        order = np.argsort(-obj[t], kind="stable")[:top_k]
        out.append([Proposal(t, Box(*(float(v) for v in boxes[t, q])), emb[t, q], float(obj[t, q])) for q in order])
    return out


def _similarity_matrix(prev: Sequence[Proposal], cur: Sequence[Proposal]) -> np.ndarray:
    return np.array([[cosine_similarity(p.embedding, c.embedding) for c in cur] for p in prev])


def tbd_link(per_frame: Sequence[Sequence[Proposal]], sim_threshold: float) -> list[LinkedTrack]:
    """Link proposals frame to frame; a track not extended at some frame stays ended."""
    if not per_frame:
        raise ValueError("need at least one frame of proposals")
    tracks: list[LinkedTrack] = []
    active: list[LinkedTrack] = []
    for t, props in enumerate(per_frame):
        nxt: list[LinkedTrack] = []
        matched: set[int] = set()
        if active and props:
            sim = _similarity_matrix([tr.last() for tr in active], props)
            cost = np.where(sim >= sim_threshold, 1.0 - sim, FORBIDDEN)
            for r, c in solve_assignment(cost).pairs:
                active[r].proposals[t] = props[c]
                nxt.append(active[r])
                matched.add(c)
        for c, prop in enumerate(props):
            if c not in matched:
                track = LinkedTrack(len(tracks), {t: prop})
                tracks.append(track)
                nxt.append(track)
        active = nxt
    return tracks


def random_link(per_frame: Sequence[Sequence[Proposal]], seed: int) -> list[LinkedTrack]:
    """Association control: each frame's proposals continue randomly chosen active tracks."""
    if not per_frame:
        raise ValueError("need at least one frame of proposals")
    rng = np.random.default_rng(seed)
    tracks: list[LinkedTrack] = []
    active: list[LinkedTrack] = []
    for t, props in enumerate(per_frame):
        nxt: list[LinkedTrack] = []
        order = rng.permutation(len(props))
        pool = list(rng.permutation(len(active)))
        for c in order:
            if pool:
                track = active[int(pool.pop())]
            else:
                track = LinkedTrack(len(tracks))
                tracks.append(track)
            track.proposals[t] = props[int(c)]
            nxt.append(track)
        active = nxt
    return tracks


def tracks_to_predictions(video_id: str, frame_indices: Sequence[int], tracks: Sequence[LinkedTrack]) -> VideoPredictions:
    frames: list[list[Detection]] = [[] for _ in frame_indices]
    for tr in tracks:
        for t, prop in tr.proposals.items():
            frames[t].append(Detection(tr.track_id, prop.box, prop.objectness))
    for dets in frames:
        dets.sort(key=lambda d: d.slot_id)
    return VideoPredictions(video_id, list(frame_indices), frames)


def baseline_video(
    model: VideoOwl,
    video: SceneVideo,
    prompts: torch.Tensor,
    eval_fps: float,
    sim_threshold: float,
    top_k: int,
    random_seed: int | None = None,
) -> VideoPredictions:
    """TbD predictions for one video at ``eval_fps``; ``random_seed`` switches to the control."""
    indices = eval_frame_indices(video, eval_fps)
    frames = frames_tensor(video.frames[indices], model.dtype)
    per_frame = proposals_from_model(model, frames, prompts, top_k)
    tracks = tbd_link(per_frame, sim_threshold) if random_seed is None else random_link(per_frame, random_seed)
    return restrict_to_annotated(tracks_to_predictions(video.video_id, indices, tracks), annotated_frames(video))
