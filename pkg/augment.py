"""
Video-level augmentation: pseudo-videos from stills, clip-consistent flips,
crops, time reversal and frame subsampling, temporal mosaics, and densifying
sparse keyframe annotations.

Every transform takes an explicit seed (or generator) and returns a new clip;
inputs are never modified. `ClipSampler` strings these together into the
training-clip stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

import config as cfgmod
from geometry import Box, clip_to_window, from_corners, hflip, to_corners
from synthdata import Dataset, GtTrack, SceneVideo, annotated_frames


@dataclass
class AnnotatedClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    tracks: list[GtTrack]
    fps: float

    def __post_init__(self) -> None:
        for tr in self.tracks:
            if len(tr.boxes) != len(self.frames):
                raise ValueError(f"track {tr.track_id} has {len(tr.boxes)} entries for {len(self.frames)} frames")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[1])


@dataclass(frozen=True)
class AugmentOptions:
    hflip: bool = False
    time_reverse: bool = False
    crop: Box | None = None
    subsample_to: int | None = None


def clip_from_video(video: SceneVideo, indices: Sequence[int] | None = None) -> AnnotatedClip:
    idx = list(range(video.num_frames)) if indices is None else list(indices)
    tracks = [GtTrack(t.track_id, t.class_id, [t.boxes[i] for i in idx]) for t in video.tracks]
    return AnnotatedClip(video.frames[idx], _drop_empty(tracks), video.fps)


def _drop_empty(tracks: list[GtTrack]) -> list[GtTrack]:
    return [t for t in tracks if any(b is not None for b in t.boxes)]


def _snap_window(window: Box, size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Pixel-aligned (x0, y0, x1, y1) for a normalized window."""
    width, height = size
    x0, y0, x1, y1 = to_corners(window)
    px0 = min(max(int(round(x0 * width)), 0), width)
    py0 = min(max(int(round(y0 * height)), 0), height)
    px1 = min(max(int(round(x1 * width)), 0), width)
    py1 = min(max(int(round(y1 * height)), 0), height)
    if px1 <= px0 or py1 <= py0:
        raise ValueError(f"crop window {window} has zero area at {width}x{height}")
    return px0, py0, px1, py1


def _crop_resize(frame: np.ndarray, px: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = px
    height, width = frame.shape[:2]
    patch = Image.fromarray(np.ascontiguousarray(frame[y0:y1, x0:x1]), "RGB")
    return np.asarray(patch.resize((width, height), Image.Resampling.NEAREST))


def _window_box(px: tuple[int, int, int, int], size: tuple[int, int]) -> Box:
    width, height = size
    x0, y0, x1, y1 = px
    return from_corners(x0 / width, y0 / height, x1 / width, y1 / height)


def _clip_boxes(boxes: list[Box | None], window: Box, min_retained: float) -> list[Box | None]:
    out: list[Box | None] = []
    for b in boxes:
        if b is None:
            out.append(None)
            continue
        clipped, kept = clip_to_window(b, window)
        out.append(clipped if clipped is not None and kept >= min_retained else None)
    return out


# ---------------------------------------------------------------------------
# Pseudo-videos
# ---------------------------------------------------------------------------
def pseudo_video(
    image: np.ndarray,
    annotations: Sequence[GtTrack],
    T: int,
    seed: int | None = None,
    crop_frac: float = 0.5,
    endpoints: tuple[tuple[int, int], tuple[int, int]] | None = None,
    min_retained: float = 0.5,
    fps: float = 1.0,
) -> AnnotatedClip:
    """Slide a fixed-size crop window linearly across a still image.

    ``annotations`` are single-frame tracks on ``image``. ``endpoints`` are the
    window's top-left pixel at the first and last frame; when omitted both are
    drawn uniformly over valid positions.
    """
    if T < 2:
        raise ValueError("pseudo-videos need at least 2 frames")
    height, width = image.shape[:2]
    win_w = max(1, int(round(width * crop_frac)))
    win_h = max(1, int(round(height * crop_frac)))
    if endpoints is None:
        rng = np.random.default_rng(seed)
        start = (int(rng.integers(0, width - win_w + 1)), int(rng.integers(0, height - win_h + 1)))
        end = (int(rng.integers(0, width - win_w + 1)), int(rng.integers(0, height - win_h + 1)))
    else:
        start, end = endpoints
    frames = np.empty((T, height, width, 3), dtype=np.uint8)
    entries: list[list[Box | None]] = [[] for _ in annotations]
    for k in range(T):
        frac = k / (T - 1)
        x = int(round(start[0] + (end[0] - start[0]) * frac))
        y = int(round(start[1] + (end[1] - start[1]) * frac))
        px = (x, y, x + win_w, y + win_h)
        frames[k] = _crop_resize(image, px)
        window = _window_box(px, (width, height))
        for j, ann in enumerate(annotations):
            entries[j].extend(_clip_boxes([ann.boxes[0]], window, min_retained))
    tracks = [GtTrack(a.track_id, a.class_id, e) for a, e in zip(annotations, entries)]
    return AnnotatedClip(frames, _drop_empty(tracks), fps)


def sliding_window_video(
    image: np.ndarray, annotations: Sequence[GtTrack], T: int, crop_frac: float = 0.5
) -> AnnotatedClip:
    """Left-to-right sweep at mid-height, for slot-center analysis."""
    height, width = image.shape[:2]
    win_w = max(1, int(round(width * crop_frac)))
    win_h = max(1, int(round(height * crop_frac)))
    y = (height - win_h) // 2
    return pseudo_video(image, annotations, T, crop_frac=crop_frac, endpoints=((0, y), (width - win_w, y)))


# ---------------------------------------------------------------------------
# Clip transforms
# ---------------------------------------------------------------------------
def augment_clip(clip: AnnotatedClip, opts: AugmentOptions, seed: int | None = None, min_retained: float = 0.5) -> AnnotatedClip:
    """Apply subsample, time reversal, flip and crop, in that order, to every frame alike."""
    frames = clip.frames
    tracks = [GtTrack(t.track_id, t.class_id, list(t.boxes)) for t in clip.tracks]

    if opts.subsample_to is not None:
        k = opts.subsample_to
        if not 1 <= k <= len(frames):
            raise ValueError(f"cannot subsample {len(frames)} frames to {k}")
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(frames), size=k, replace=False))
        frames = frames[keep]
        for t in tracks:
            t.boxes = [t.boxes[i] for i in keep]

    if opts.time_reverse:
        frames = frames[::-1]
        for t in tracks:
            t.boxes = t.boxes[::-1]

    if opts.hflip:
        frames = frames[:, :, ::-1]
        for t in tracks:
            t.boxes = [None if b is None else hflip(b) for b in t.boxes]

    if opts.crop is not None:
        size = (int(frames.shape[2]), int(frames.shape[1]))
        px = _snap_window(opts.crop, size)
        frames = np.stack([_crop_resize(f, px) for f in frames]) if len(frames) else frames
        window = _window_box(px, size)
        for t in tracks:
            t.boxes = _clip_boxes(t.boxes, window, min_retained)

    return AnnotatedClip(np.ascontiguousarray(frames), _drop_empty(tracks), clip.fps)


def temporal_mosaic(a: AnnotatedClip, b: AnnotatedClip, L: int, seed: int | None = None, offset: int | None = None) -> AnnotatedClip:
    """Scene-cut ``a`` into ``b`` and keep a window of ``L`` frames.

    b's track ids are shifted past a's largest id so the two never collide.
    """
    if len(a) + len(b) < L:
        raise ValueError(f"clips of length {len(a)} and {len(b)} cannot fill a window of {L}")
    if a.frames.shape[1:] != b.frames.shape[1:]:
        raise ValueError("mosaic clips must share frame dims")
    total = len(a) + len(b)
    if offset is None:
        offset = int(np.random.default_rng(seed).integers(0, total - L + 1))
    if not 0 <= offset <= total - L:
        raise ValueError(f"offset {offset} outside [0, {total - L}]")
    shift = max((t.track_id for t in a.tracks), default=-1) + 1
    frames = np.concatenate([a.frames, b.frames])[offset : offset + L]
    tracks = [GtTrack(t.track_id, t.class_id, (list(t.boxes) + [None] * len(b))[offset : offset + L]) for t in a.tracks]
    tracks += [
        GtTrack(t.track_id + shift, t.class_id, ([None] * len(a) + list(t.boxes))[offset : offset + L]) for t in b.tracks
    ]
    return AnnotatedClip(frames, _drop_empty(tracks), a.fps)


def interpolate_annotations(
    track: GtTrack, keyframes: Sequence[int], frame_times: Sequence[float] | None = None
) -> GtTrack:
    """Densify a track annotated only at ``keyframes``.

    Between two consecutive keyframes where the object is present at both, each
    box coordinate moves linearly in time. Everything else off a keyframe is
    absent: before the first key, after the last, and across a present/absent gap.
    """
    n = len(track.boxes)
    keys = sorted(set(int(k) for k in keyframes))
    if not keys:
        raise ValueError("at least one keyframe is required")
    if keys[0] < 0 or keys[-1] >= n:
        raise ValueError(f"keyframes must lie in [0, {n})")
    times = np.arange(n, dtype=np.float64) if frame_times is None else np.asarray(frame_times, dtype=np.float64)
    dense: list[Box | None] = [None] * n
    for k in keys:
        dense[k] = track.boxes[k]
    for k0, k1 in zip(keys, keys[1:]):
        b0, b1 = track.boxes[k0], track.boxes[k1]
        if b0 is None or b1 is None:
            continue
        span = times[k1] - times[k0]
        for i in range(k0 + 1, k1):
            w = (times[i] - times[k0]) / span
            dense[i] = Box(*(float(p + (q - p) * w) for p, q in zip(b0, b1)))
    return GtTrack(track.track_id, track.class_id, dense)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------
def should_mosaic(rng: np.random.Generator, prob: float) -> bool:
    return bool(rng.random() < prob)


def sample_augment_options(
    rng: np.random.Generator, aug: cfgmod.AugmentConfig, num_frames: int, clip_len: int
) -> AugmentOptions:
    crop = None
    if rng.random() < aug.crop_prob:
        side = aug.crop_frac
        x0 = rng.uniform(0.0, 1.0 - side)
        y0 = rng.uniform(0.0, 1.0 - side)
        crop = from_corners(x0, y0, x0 + side, y0 + side)
    # Without subsampling the caller keeps the leading clip_len frames.
    subsample = min(clip_len, num_frames) if aug.subsample else None
    return AugmentOptions(
        hflip=bool(rng.random() < aug.flip_prob),
        time_reverse=bool(rng.random() < aug.reverse_prob),
        crop=crop,
        subsample_to=subsample,
    )


class ClipSampler:
    """Training clips from a dataset: real clips from `train` videos, pseudo clips from `stills`.

    Real clips only carry known-class tracks. Every emitted clip has exactly
    ``clip_len`` frames.
    """

    def __init__(self, dataset: Dataset, aug: cfgmod.AugmentConfig, clip_len: int, seed: int):
        self.catalog = dataset.catalog
        self.aug = aug
        self.clip_len = clip_len
        self.rng = np.random.default_rng(seed)
        self.real_videos = dataset.split("train")
        self.stills = dataset.split("stills")
        self._dense: dict[str, list[GtTrack]] = {}

    def _dense_tracks(self, video: SceneVideo) -> list[GtTrack]:
        if video.video_id not in self._dense:
            keys = np.flatnonzero(annotated_frames(video)).tolist()
            self._dense[video.video_id] = [
                interpolate_annotations(t, keys)
                for t in video.tracks
                if self.catalog.is_known(t.class_id)
            ]
        return self._dense[video.video_id]

    def _seed(self) -> int:
        return int(self.rng.integers(2**63 - 1))

    def _raw_real_clip(self) -> AnnotatedClip:
        if not self.real_videos:
            raise ValueError("dataset has no train videos")
        video = self.real_videos[int(self.rng.integers(len(self.real_videos)))]
        span = min(video.num_frames, 2 * self.clip_len)
        starts = [int(s) for s in np.flatnonzero(annotated_frames(video)) if s + span <= video.num_frames] or [0]
        s = starts[int(self.rng.integers(len(starts)))]
        tracks = [GtTrack(t.track_id, t.class_id, t.boxes[s : s + span]) for t in self._dense_tracks(video)]
        raw = AnnotatedClip(video.frames[s : s + span], _drop_empty(tracks), video.fps)
        opts = sample_augment_options(self.rng, self.aug, len(raw), self.clip_len)
        clip = augment_clip(raw, opts, self._seed(), self.aug.min_retained)
        return self._fit(clip)

    def real_clip(self) -> AnnotatedClip:
        clip = self._raw_real_clip()
        if should_mosaic(self.rng, self.aug.mosaic_prob):
            clip = temporal_mosaic(clip, self._raw_real_clip(), self.clip_len, self._seed())
        return clip

    def pseudo_clip(self) -> AnnotatedClip:
        if not self.stills:
            raise ValueError("dataset has no stills")
        still = self.stills[int(self.rng.integers(len(self.stills)))]
        T = max(2, self.clip_len)
        clip = pseudo_video(
            still.frames[0], still.tracks, T, self._seed(), self.aug.pseudo_crop_frac,
            min_retained=self.aug.min_retained, fps=still.fps,
        )
        if self.rng.random() < self.aug.flip_prob:
            clip = augment_clip(clip, AugmentOptions(hflip=True))
        return self._fit(clip)

    def _fit(self, clip: AnnotatedClip) -> AnnotatedClip:
        if len(clip) == self.clip_len:
            return clip
        if len(clip) > self.clip_len:
            tracks = [GtTrack(t.track_id, t.class_id, t.boxes[: self.clip_len]) for t in clip.tracks]
            return AnnotatedClip(clip.frames[: self.clip_len], _drop_empty(tracks), clip.fps)
        # Short videos repeat their last frame.
        pad = self.clip_len - len(clip)
        frames = np.concatenate([clip.frames, np.repeat(clip.frames[-1:], pad, axis=0)])
        tracks = [GtTrack(t.track_id, t.class_id, t.boxes + [t.boxes[-1]] * pad) for t in clip.tracks]
        return AnnotatedClip(frames, tracks, clip.fps)

    def sample(self, pseudo_fraction: float) -> AnnotatedClip:
        if not self.real_videos or (self.stills and self.rng.random() < pseudo_fraction):
            return self.pseudo_clip()
        return self.real_clip()

    def batch(self, size: int, pseudo_fraction: float) -> list[AnnotatedClip]:
        return [self.sample(pseudo_fraction) for _ in range(size)]
