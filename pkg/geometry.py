"""Box algebra for normalized frames: conversions, overlap, window clipping, rasterization.

Boxes are ``(cx, cy, w, h)`` in frame-relative units. The scalar helpers serve
data generation, augmentation and evaluation; the ``torch`` helpers at the
bottom are the batched, differentiable forms the loss and matcher use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

# Owner value for cells no instance claims.
BACKGROUND = -1


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class PixelGrid:
    """Per-cell ownership map; ``owner[row, col]`` is an instance index or BACKGROUND."""

    width: int
    height: int
    owner: np.ndarray

    def cells_of(self, instance: int) -> int:
        return int(np.count_nonzero(self.owner == instance))


def from_corners(x0: float, y0: float, x1: float, y1: float) -> Box:
    return Box.from_corners(x0, y0, x1, y1)


def to_corners(b: Box) -> tuple[float, float, float, float]:
    cx, cy, w, h = b
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _corner_area(x0: float, y0: float, x1: float, y1: float) -> float:
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def area(b: Box) -> float:
    return _corner_area(*to_corners(b))


def intersection(a: Box, b: Box) -> Box | None:
    """Overlap of two boxes, or None when they share no positive area."""
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    x0, y0 = max(ax0, bx0), max(ay0, by0)
    x1, y1 = min(ax1, bx1), min(ay1, by1)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box.from_corners(x0, y0, x1, y1)


def _inter_union(a: Box, b: Box) -> tuple[float, float]:
    ac = to_corners(a)
    bc = to_corners(b)
    inter = _corner_area(max(ac[0], bc[0]), max(ac[1], bc[1]), min(ac[2], bc[2]), min(ac[3], bc[3]))
    union = _corner_area(*ac) + _corner_area(*bc) - inter
    return inter, union


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 when the union has no area."""
    inter, union = _inter_union(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: ``IoU - |C minus (A u B)| / |C|`` with C the enclosing box."""
    inter, union = _inter_union(a, b)
    ac = to_corners(a)
    bc = to_corners(b)
    enclosing = _corner_area(min(ac[0], bc[0]), min(ac[1], bc[1]), max(ac[2], bc[2]), max(ac[3], bc[3]))
    if enclosing <= 0.0:
        return 0.0
    overlap = inter / union if union > 0.0 else 0.0
    return overlap - (enclosing - union) / enclosing


def clip_to_window(b: Box, window: Box) -> tuple[Box | None, float]:
    """Clip ``b`` to ``window`` and express the result in window coordinates.

    Returns ``(clipped, retained_fraction)`` where the fraction is the share of
    b's area left inside the window. Zero-area or disjoint boxes give (None, 0.0).
    """
    if area(window) <= 0.0:
        raise ValueError(f"window must have positive area: {window}")
    full = area(b)
    if full <= 0.0:
        return None, 0.0
    inside = intersection(b, window)
    if inside is None:
        return None, 0.0
    wx0, wy0, wx1, wy1 = to_corners(window)
    ww, wh = wx1 - wx0, wy1 - wy0
    x0, y0, x1, y1 = to_corners(inside)
    clipped = Box.from_corners((x0 - wx0) / ww, (y0 - wy0) / wh, (x1 - wx0) / ww, (y1 - wy0) / wh)
    return clipped, area(inside) / full


def unclip_from_window(b: Box, window: Box) -> Box:
    """Inverse of the re-normalization in ``clip_to_window``."""
    wx0, wy0, wx1, wy1 = to_corners(window)
    ww, wh = wx1 - wx0, wy1 - wy0
    x0, y0, x1, y1 = to_corners(b)
    return Box.from_corners(wx0 + x0 * ww, wy0 + y0 * wh, wx0 + x1 * ww, wy0 + y1 * wh)


def hflip(b: Box) -> Box:
    return Box(1.0 - b.cx, b.cy, b.w, b.h)


def _cell_centers(n: int) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def rasterize(boxes: Sequence[Box], ranks: Sequence[float], dims: tuple[int, int]) -> PixelGrid:
    """Assign each cell to the highest-ranked box covering its center.

    ``dims`` is ``(width, height)``. A box covers a cell when the cell center
    lies in ``[x0, x1) x [y0, y1)``. Equal ranks go to the lower instance index.
    """
    width, height = dims
    if width <= 0 or height <= 0:
        raise ValueError(f"grid dims must be positive: {dims}")
    if len(boxes) != len(ranks):
        raise ValueError(f"{len(boxes)} boxes but {len(ranks)} ranks")
    owner = np.full((height, width), BACKGROUND, dtype=np.int64)
    if not boxes:
        return PixelGrid(width, height, owner)
    corners = np.array([to_corners(b) for b in boxes], dtype=np.float64)
    rank = np.asarray(ranks, dtype=np.float64)
    if not np.all(np.isfinite(rank)):
        raise ValueError("ranks must be finite")
    xs = _cell_centers(width)
    ys = _cell_centers(height)
    in_x = (corners[:, 0:1] <= xs[None, :]) & (xs[None, :] < corners[:, 2:3])
    in_y = (corners[:, 1:2] <= ys[None, :]) & (ys[None, :] < corners[:, 3:4])
    cover = in_y[:, :, None] & in_x[:, None, :]
    score = np.where(cover, rank[:, None, None], -np.inf)
    # argmax returns the first maximum, which is the lower index on ties.
    best = np.argmax(score, axis=0)
    covered = cover.any(axis=0)
    owner[covered] = best[covered]
    return PixelGrid(width, height, owner)


def box_from_owned_cells(grid: PixelGrid, instance: int) -> Box | None:
    rows, cols = np.nonzero(grid.owner == instance)
    if rows.size == 0:
        return None
    return Box.from_corners(
        cols.min() / grid.width,
        rows.min() / grid.height,
        (cols.max() + 1) / grid.width,
        (rows.max() + 1) / grid.height,
    )


def mask_to_box(mask: np.ndarray) -> Box | None:
    """Tight box around the True pixels of an ``(H, W)`` mask."""
    height, width = mask.shape
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return Box.from_corners(
        cols.min() / width, rows.min() / height, (cols.max() + 1) / width, (rows.max() + 1) / height
    )


# ---------------------------------------------------------------------------
# Batched torch forms (cxcywh tensors of shape (..., 4))
# ---------------------------------------------------------------------------
def boxes_to_corners(t: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = t.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def _giou_from_corners(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    overlap = inter / union.clamp(min=eps)
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclosing = wh_c[..., 0] * wh_c[..., 1]
    return overlap - (enclosing - union) / enclosing.clamp(min=eps)


def elementwise_giou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """GIoU of matching rows: ``a`` and ``b`` broadcast to a common ``(..., 4)``."""
    return _giou_from_corners(boxes_to_corners(a), boxes_to_corners(b), eps)


def pairwise_giou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """``(N, 4) x (M, 4) -> (N, M)`` GIoU matrix."""
    return elementwise_giou(a[:, None, :], b[None, :, :], eps)
