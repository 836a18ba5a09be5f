"""
Procedural open-world video data: class catalog, scenes, stills and dataset I/O.

Frames are small square RGB images split into horizontal lanes. Objects are
class-specific shapes with a class-specific texture and color, moving along a
lane. Ground-truth boxes are the tight bounds of each object's *visible*
pixels, so they stay exact under occlusion and at the frame edge.

On disk a dataset is a directory:
    catalog.json
    videos/<video_id>.json       annotations + metadata (schema_version 1)
    frames/<video_id>/<i>.png    lossless frames
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from PIL import Image
from tqdm import tqdm

import config as cfgmod
from geometry import Box, mask_to_box

SCHEMA_VERSION = 1

SHAPES = ("rect", "ellipse", "diamond", "ring")
TEXTURES = ("solid", "hstripes", "vstripes", "checker")
MOTIONS = ("linear", "crossing", "occluding")
SPLITS = ("train", "eval", "stills")

BACKGROUND_RGB = (24, 24, 24)
# Saturated colors, each with a channel >= 160 so the darker texture shade
# never collides with the background.
PALETTE = (
    (230, 60, 60),
    (60, 200, 80),
    (70, 110, 240),
    (240, 200, 50),
    (200, 70, 220),
    (60, 210, 220),
    (250, 140, 40),
    (170, 230, 120),
)

Motion = Literal["linear", "crossing", "occluding"]


class DatasetParseError(ValueError):
    """A dataset file could not be parsed; names the record and byte offset."""

    def __init__(self, path: Path | str, record_index: int, offset: int | None, reason: str):
        where = f"record {record_index}"
        if offset is not None:
            where += f", byte offset {offset}"
        super().__init__(f"{path}: {where}: {reason}")
        self.path = str(path)
        self.record_index = record_index
        self.offset = offset


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    shape: str
    texture: str
    color: tuple[int, int, int]
    prompt: tuple[float, ...]
    known: bool


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassSpec, ...]

    def __post_init__(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if not any(c.known for c in self.classes) or all(c.known for c in self.classes):
            raise ValueError("catalog needs at least one known and one unknown class")
        for c in self.classes:
            if abs(math.fsum(x * x for x in c.prompt) - 1.0) > 1e-9:
                raise ValueError(f"prompt embedding of class {c.class_id} is not unit-norm")

    @property
    def prompt_dim(self) -> int:
        return len(self.classes[0].prompt)

    def prompts(self) -> np.ndarray:
        """(P, D) prompt matrix; row p belongs to ``classes[p]``."""
        return np.array([c.prompt for c in self.classes], dtype=np.float64)

    def index_of(self, class_id: int) -> int:
        for i, c in enumerate(self.classes):
            if c.class_id == class_id:
                return i
        raise KeyError(class_id)

    def by_id(self, class_id: int) -> ClassSpec:
        return self.classes[self.index_of(class_id)]

    def known_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.known]

    def unknown_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if not c.known]

    def is_known(self, class_id: int) -> bool:
        return self.by_id(class_id).known


def _unit(rng: np.random.Generator, dim: int) -> tuple[float, ...]:
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return tuple(float(x) for x in v)


def make_catalog(num_known: int, num_unknown: int, dim: int, seed: int) -> ClassCatalog:
    """Known classes come first; every class gets a distinct shape/texture pair."""
    total = num_known + num_unknown
    if num_known < 1 or num_unknown < 1:
        raise ValueError("need at least one known and one unknown class")
    if total > len(SHAPES) * len(TEXTURES):
        raise ValueError(f"at most {len(SHAPES) * len(TEXTURES)} classes are supported")
    rng = np.random.default_rng(seed)
    # Walk the shape x texture table diagonally so neighbours differ in both.
    combos = [(SHAPES[i % len(SHAPES)], TEXTURES[(i + i // len(SHAPES)) % len(TEXTURES)]) for i in range(total)]
    classes = []
    for i, (shape, texture) in enumerate(combos):
        if i < len(PALETTE):
            color = PALETTE[i]
        else:
            color = tuple(int(x) for x in rng.integers(60, 256, size=3))
            color = (max(color[0], 160),) + color[1:]
        classes.append(
            ClassSpec(
                class_id=i,
                name=f"{shape}-{texture}",
                shape=shape,
                texture=texture,
                color=color,
                prompt=_unit(rng, dim),
                known=i < num_known,
            )
        )
    return ClassCatalog(tuple(classes))


def catalog_to_json(catalog: ClassCatalog) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "classes": [
            {
                "class_id": c.class_id,
                "name": c.name,
                "shape": c.shape,
                "texture": c.texture,
                "color": list(c.color),
                "prompt": list(c.prompt),
                "known": c.known,
            }
            for c in catalog.classes
        ],
    }


def catalog_from_json(doc: dict) -> ClassCatalog:
    return ClassCatalog(
        tuple(
            ClassSpec(
                class_id=int(c["class_id"]),
                name=str(c["name"]),
                shape=str(c["shape"]),
                texture=str(c["texture"]),
                color=tuple(int(x) for x in c["color"]),
                prompt=tuple(float(x) for x in c["prompt"]),
                known=bool(c["known"]),
            )
            for c in doc["classes"]
        )
    )


# ---------------------------------------------------------------------------
# Videos
# ---------------------------------------------------------------------------
@dataclass
class GtTrack:
    track_id: int
    class_id: int
    boxes: list[Box | None]  # one entry per frame; None = absent

    @property
    def present(self) -> list[bool]:
        return [b is not None for b in self.boxes]

    def present_frames(self) -> list[int]:
        return [i for i, b in enumerate(self.boxes) if b is not None]


@dataclass
class SceneVideo:
    video_id: str
    fps: float
    annotation_fps: float
    frames: np.ndarray  # (T, H, W, 3) uint8
    tracks: list[GtTrack]
    split: str = "eval"

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return int(self.frames.shape[2]), int(self.frames.shape[1])

    def images(self) -> np.ndarray:
        """Frames as float32 in [0, 1]."""
        return self.frames.astype(np.float32) / 255.0


def annotation_step(fps: float, annotation_fps: float) -> int:
    ratio = fps / annotation_fps
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9:
        raise ValueError(f"fps {fps} is not an integer multiple of annotation_fps {annotation_fps}")
    return step


def annotated_frames(video: SceneVideo) -> np.ndarray:
    """Boolean mask of frames that carry ground truth at the annotation rate."""
    step = annotation_step(video.fps, video.annotation_fps)
    mask = np.zeros(video.num_frames, dtype=bool)
    mask[::step] = True
    return mask


@dataclass(frozen=True)
class SceneConfig:
    num_objects: int
    duration: float
    fps: float
    motion: Motion = "linear"
    enter_exit_rate: float = 0.0
    annotation_fps: float = 1.0
    frame_size: int = 64
    lane_height: int = 16
    speed_range: tuple[float, float] = (0.01, 0.04)
    object_size: tuple[int, int] = (8, 14)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.fps))

    @property
    def num_lanes(self) -> int:
        return self.frame_size // self.lane_height

    def capacity(self) -> int:
        if self.motion == "occluding":
            return 2 * self.num_lanes
        return self.num_lanes

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ValueError(f"duration*fps must give at least 2 frames, got {self.num_frames}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.num_objects < 0:
            raise ValueError("num_objects must be >= 0")
        if self.num_objects > self.capacity():
            raise ValueError(
                f"{self.num_objects} objects exceed the {self.motion} layout capacity of {self.capacity()}"
            )
        if self.object_size[1] >= self.lane_height:
            raise ValueError("objects must fit inside a lane")


def scene_config_from(data: cfgmod.DataConfig, num_objects: int, motion: Motion) -> SceneConfig:
    return SceneConfig(
        num_objects=num_objects,
        duration=data.duration_s,
        fps=data.fps,
        motion=motion,
        enter_exit_rate=data.enter_exit_rate,
        annotation_fps=data.annotation_fps,
        frame_size=data.frame_size,
        lane_height=data.lane_height,
        speed_range=tuple(data.speed_range),
        object_size=tuple(data.object_size),
    )


@dataclass
class _Sprite:
    track_id: int
    cls: ClassSpec
    w: float
    h: float
    xs: np.ndarray  # center x per frame, pixels
    y: float
    depth: int
    visible: np.ndarray  # bool per frame; the object is not drawn where False


def shape_mask(shape: str, cx: float, cy: float, w: float, h: float, size: tuple[int, int]) -> np.ndarray:
    """Pixels whose centers fall inside the shape, as an (H, W) bool mask."""
    width, height = size
    mask = np.zeros((height, width), dtype=bool)
    if w <= 0 or h <= 0:
        return mask
    c0 = max(0, int(math.floor(cx - w / 2)))
    c1 = min(width, int(math.ceil(cx + w / 2)))
    r0 = max(0, int(math.floor(cy - h / 2)))
    r1 = min(height, int(math.ceil(cy + h / 2)))
    if c1 <= c0 or r1 <= r0:
        return mask
    u = (np.arange(c0, c1) + 0.5 - cx) / (w / 2)
    v = (np.arange(r0, r1) + 0.5 - cy) / (h / 2)
    uu, vv = np.meshgrid(u, v)
    if shape == "rect":
        inside = (np.abs(uu) < 1) & (np.abs(vv) < 1)
    elif shape == "ellipse":
        inside = uu**2 + vv**2 < 1
    elif shape == "diamond":
        inside = np.abs(uu) + np.abs(vv) < 1
    elif shape == "ring":
        rr = uu**2 + vv**2
        inside = (rr < 1) & (rr > 0.3)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask[r0:r1, c0:c1] = inside
    return mask


def _paint(canvas: np.ndarray, mask: np.ndarray, cls: ClassSpec, cx: float, cy: float) -> None:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return
    # Texture coordinates follow the object so stripes move with it.
    lr = (rows - int(math.floor(cy))) // 2
    lc = (cols - int(math.floor(cx))) // 2
    if cls.texture == "solid":
        dark = np.zeros(rows.size, dtype=bool)
    elif cls.texture == "hstripes":
        dark = lr % 2 == 1
    elif cls.texture == "vstripes":
        dark = lc % 2 == 1
    elif cls.texture == "checker":
        dark = (lr + lc) % 2 == 1
    else:
        raise ValueError(f"unknown texture {cls.texture!r}")
    color = np.array(cls.color, dtype=np.uint8)
    canvas[rows, cols] = np.where(dark[:, None], color // 2, color)


def render(sprites: Sequence[_Sprite], t: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame t as (uint8 image, owner map with sprite list index or -1)."""
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND_RGB
    owner = np.full((size, size), -1, dtype=np.int64)
    # Back to front: larger depth is farther away.
    for k in sorted(range(len(sprites)), key=lambda k: (-sprites[k].depth, k)):
        s = sprites[k]
        if not s.visible[t]:
            continue
        mask = shape_mask(s.cls.shape, float(s.xs[t]), s.y, s.w, s.h, (size, size))
        _paint(canvas, mask, s.cls, float(s.xs[t]), s.y)
        owner[mask] = k
    return canvas, owner


def _presence_window(rng: np.random.Generator, n_frames: int, rate: float) -> np.ndarray:
    visible = np.ones(n_frames, dtype=bool)
    if rate > 0 and rng.random() < rate:
        length = int(rng.integers(max(1, n_frames // 4), n_frames))
        start = int(rng.integers(0, n_frames - length + 1))
        visible[:] = False
        visible[start : start + length] = True
    return visible


def _render_tracks(sprites: list[_Sprite], cfg: SceneConfig) -> tuple[np.ndarray, list[GtTrack]]:
    n = cfg.num_frames
    size = cfg.frame_size
    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    boxes: list[list[Box | None]] = [[] for _ in sprites]
    for t in range(n):
        frames[t], owner = render(sprites, t, size)
        for k in range(len(sprites)):
            boxes[k].append(mask_to_box(owner == k))
    tracks = [GtTrack(s.track_id, s.cls.class_id, boxes[k]) for k, s in enumerate(sprites)]
    return frames, tracks


def generate_scene(
    catalog: ClassCatalog,
    seed: int,
    config: SceneConfig,
    class_ids: Sequence[int] | None = None,
    video_id: str = "scene",
    split: str = "eval",
) -> SceneVideo:
    """Render one video. Deterministic for a fixed (catalog, seed, config)."""
    config.validate()
    rng = np.random.default_rng(seed)
    pool = list(class_ids) if class_ids is not None else [c.class_id for c in catalog.classes]
    if config.num_objects and not pool:
        raise ValueError("class pool is empty")
    n = config.num_frames
    size = config.frame_size
    t = np.arange(n, dtype=np.float64)
    lanes = [int(x) for x in rng.permutation(config.num_lanes)]

    def lane_y(lane: int) -> float:
        return (lane + 0.5) * config.lane_height

    def make(track_id: int, xs: np.ndarray, lane: int, depth: int) -> _Sprite:
        lo, hi = config.object_size
        cls = catalog.by_id(int(rng.choice(pool)))
        w = float(rng.integers(lo, hi + 1))
        h = float(rng.integers(lo, hi + 1))
        visible = _presence_window(rng, n, config.enter_exit_rate)
        return _Sprite(track_id, cls, w, h, xs, lane_y(lane), depth, visible)

    def linear_path() -> np.ndarray:
        speed = rng.uniform(*config.speed_range) * size
        direction = 1.0 if rng.random() < 0.5 else -1.0
        x0 = rng.uniform(0.0, size)
        return x0 + direction * speed * t

    def swap_paths() -> tuple[np.ndarray, np.ndarray]:
        # a starts left and ends right; b does the opposite.
        a0, b1 = rng.uniform(0.1, 0.3, size=2) * size
        a1, b0 = rng.uniform(0.7, 0.9, size=2) * size
        frac = t / (n - 1)
        return a0 + (a1 - a0) * frac, b0 + (b1 - b0) * frac

    sprites: list[_Sprite] = []
    count = config.num_objects
    if config.motion == "linear":
        for k in range(count):
            sprites.append(make(k, linear_path(), lanes[k], depth=0))
    elif config.motion == "crossing":
        pairs = count // 2
        pair_slots = [int(x) for x in rng.permutation(config.num_lanes // 2)][:pairs]
        used = set()
        for p, slot in enumerate(pair_slots):
            a, b = swap_paths()
            sprites.append(make(2 * p, a, 2 * slot, depth=0))
            sprites.append(make(2 * p + 1, b, 2 * slot + 1, depth=0))
            used.update((2 * slot, 2 * slot + 1))
        if count % 2:
            free = [lane for lane in lanes if lane not in used]
            sprites.append(make(count - 1, linear_path(), free[0], depth=0))
    else:
        for p in range(count // 2):
            a, b = swap_paths()
            sprites.append(make(2 * p, a, lanes[p], depth=0))
            sprites.append(make(2 * p + 1, b, lanes[p], depth=1))
        if count % 2:
            sprites.append(make(count - 1, linear_path(), lanes[count // 2], depth=0))

    frames, tracks = _render_tracks(sprites, config)
    return SceneVideo(video_id, config.fps, config.annotation_fps, frames, tracks, split)


def generate_still(
    catalog: ClassCatalog,
    seed: int,
    config: SceneConfig,
    class_ids: Sequence[int] | None = None,
    video_id: str = "still",
) -> SceneVideo:
    """A one-frame scene of static objects on a cell grid, every class labeled."""
    rng = np.random.default_rng(seed)
    pool = list(class_ids) if class_ids is not None else [c.class_id for c in catalog.classes]
    size, cell = config.frame_size, config.lane_height
    cells = [(r, c) for r in range(size // cell) for c in range(size // cell)]
    if config.num_objects > len(cells):
        raise ValueError(f"{config.num_objects} objects exceed the {len(cells)} still cells")
    chosen = rng.choice(len(cells), size=config.num_objects, replace=False) if config.num_objects else []
    lo, hi = config.object_size
    sprites = []
    for k, idx in enumerate(sorted(int(i) for i in chosen)):
        r, c = cells[idx]
        cls = catalog.by_id(int(rng.choice(pool)))
        w = float(rng.integers(lo, hi + 1))
        h = float(rng.integers(lo, hi + 1))
        xs = np.array([(c + 0.5) * cell])
        sprites.append(_Sprite(k, cls, w, h, xs, (r + 0.5) * cell, 0, np.ones(1, dtype=bool)))
    still_cfg = SceneConfig(
        num_objects=config.num_objects, duration=1.0 / config.fps, fps=config.fps,
        frame_size=size, lane_height=cell,
    )
    frames, tracks = _render_tracks(sprites, still_cfg)
    return SceneVideo(video_id, config.fps, config.fps, frames, tracks, "stills")


def generate_dataset(catalog: ClassCatalog, data: cfgmod.DataConfig, seed: int) -> list[SceneVideo]:
    """All splits: `train` (known classes only), `eval` (all classes), `stills`."""
    videos: list[SceneVideo] = []
    known = catalog.known_ids()
    everyone = [c.class_id for c in catalog.classes]
    plan = [("train", data.train_videos, known), ("eval", data.eval_videos, everyone), ("stills", data.stills, everyone)]
    total = sum(count for _, count, _ in plan)
    bar = tqdm(total=total, desc="videos", disable=cfgmod.quiet() or total == 0)
    for split_idx, (split, count, pool) in enumerate(plan):
        for i in range(count):
            rng = np.random.default_rng([seed, split_idx, i])
            motion = data.motions[int(rng.integers(len(data.motions)))]
            video_seed = int(rng.integers(2**63 - 1))
            if split == "stills":
                n_obj = int(rng.integers(max(1, data.min_objects), max(1, data.max_objects) + 1))
                still_cfg = scene_config_from(data, n_obj, "linear")
                videos.append(generate_still(catalog, video_seed, still_cfg, pool, video_id=f"stills-{i:04d}"))
            else:
                base = scene_config_from(data, 0, motion)
                n_obj = int(rng.integers(data.min_objects, data.max_objects + 1))
                n_obj = min(n_obj, base.capacity())
                scene_cfg = scene_config_from(data, n_obj, motion)
                videos.append(
                    generate_scene(catalog, video_seed, scene_cfg, pool, video_id=f"{split}-{i:04d}", split=split)
                )
            bar.update(1)
    bar.close()
    return videos


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------
@dataclass
class Dataset:
    catalog: ClassCatalog
    videos: list[SceneVideo]

    def split(self, name: str) -> list[SceneVideo]:
        return [v for v in self.videos if v.split == name]

    def by_id(self) -> dict[str, SceneVideo]:
        return {v.video_id: v for v in self.videos}


def build_dataset(data: cfgmod.DataConfig, root_seed: int) -> Dataset:
    """Catalog and every split from the root seed's `data` stream."""
    seed = cfgmod.derive_seed(root_seed, "data")
    catalog = make_catalog(data.num_known, data.num_unknown, data.prompt_dim, seed)
    return Dataset(catalog, generate_dataset(catalog, data, seed))


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def video_to_json(video: SceneVideo) -> dict:
    width, height = video.size
    return {
        "schema_version": SCHEMA_VERSION,
        "video_id": video.video_id,
        "split": video.split,
        "fps": video.fps,
        "annotation_fps": video.annotation_fps,
        "num_frames": video.num_frames,
        "width": width,
        "height": height,
        "tracks": [
            {
                "track_id": tr.track_id,
                "class_id": tr.class_id,
                "boxes": [None if b is None else list(b) for b in tr.boxes],
            }
            for tr in video.tracks
        ],
    }


def write_dataset(path: str | Path, catalog: ClassCatalog, videos: Iterable[SceneVideo]) -> Path:
    root = Path(path)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "catalog.json").write_text(_dump(catalog_to_json(catalog)), encoding="utf-8")
    for video in videos:
        (root / "videos" / f"{video.video_id}.json").write_text(_dump(video_to_json(video)), encoding="utf-8")
        frame_dir = root / "frames" / video.video_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(video.frames):
            Image.fromarray(frame, "RGB").save(frame_dir / f"{i:05d}.png", format="PNG")
    return root


def _parse_json(path: Path, record_index: int) -> dict:
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(path, record_index, offset, exc.msg) from exc
    if not isinstance(doc, dict):
        raise DatasetParseError(path, record_index, 0, "top level must be an object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetParseError(path, record_index, None, f"unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def _video_from_json(doc: dict, frames: np.ndarray) -> SceneVideo:
    tracks = [
        GtTrack(
            int(tr["track_id"]),
            int(tr["class_id"]),
            [None if b is None else Box(*(float(x) for x in b)) for b in tr["boxes"]],
        )
        for tr in doc["tracks"]
    ]
    for tr in tracks:
        if len(tr.boxes) != frames.shape[0]:
            raise ValueError(f"track {tr.track_id} has {len(tr.boxes)} entries for {frames.shape[0]} frames")
    return SceneVideo(
        str(doc["video_id"]), float(doc["fps"]), float(doc["annotation_fps"]), frames, tracks, str(doc["split"])
    )


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    catalog_path = root / "catalog.json"
    if not catalog_path.exists():
        raise FileNotFoundError(f"no catalog.json under {root}")
    catalog_doc = _parse_json(catalog_path, 0)
    try:
        catalog = catalog_from_json(catalog_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(catalog_path, 0, None, f"bad catalog: {exc}") from exc
    videos = []
    for idx, video_path in enumerate(sorted((root / "videos").glob("*.json"))):
        doc = _parse_json(video_path, idx)
        try:
            frame_dir = root / "frames" / str(doc["video_id"])
            n = int(doc["num_frames"])
            frames = np.empty((n, int(doc["height"]), int(doc["width"]), 3), dtype=np.uint8)
            for i in range(n):
                with Image.open(frame_dir / f"{i:05d}.png") as img:
                    frames[i] = np.asarray(img.convert("RGB"))
            videos.append(_video_from_json(doc, frames))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise DatasetParseError(video_path, idx, None, f"bad video record: {exc}") from exc
    return Dataset(catalog, videos)
