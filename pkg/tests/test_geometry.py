import math

import numpy as np
import pytest
import torch

import geometry as geo
from geometry import Box


def _corners(x0, y0, x1, y1) -> Box:
    return geo.from_corners(x0, y0, x1, y1)


# --- conversions ---


def test_to_corners_examples():
    assert geo.to_corners(Box(0.5, 0.5, 1, 1)) == (0, 0, 1, 1)
    assert geo.to_corners(Box(0.5, 0.5, 0, 0)) == (0.5, 0.5, 0.5, 0.5)
    assert geo.to_corners(Box(0.25, 0.5, 0.5, 1.0)) == (0, 0, 0.5, 1)


def test_from_corners_inverts_to_corners():
    b = Box(0.3, 0.6, 0.2, 0.4)
    back = geo.from_corners(*geo.to_corners(b))
    assert back == pytest.approx(b)


# --- overlap ---


def test_iou_identity_and_touching():
    b = Box(0.4, 0.4, 0.3, 0.2)
    assert geo.iou(b, b) == 1.0
    assert geo.iou(_corners(0, 0, 0.5, 1), _corners(0.5, 0, 1, 1)) == 0.0


def test_iou_shifted_boxes():
    a = Box(0.5, 0.5, 0.5, 0.5)
    b = Box(0.625, 0.5, 0.5, 0.5)
    assert geo.iou(a, b) == pytest.approx(0.6)
    assert geo.iou(b, a) == pytest.approx(0.6)


def test_iou_degenerate_boxes_are_zero():
    p = Box(0.5, 0.5, 0, 0)
    assert geo.iou(p, p) == 0.0


def test_iou_matches_fine_grid_count():
    a = _corners(0.25, 0.125, 0.625, 0.5)
    b = _corners(0.375, 0.25, 0.75, 0.875)
    n = 512
    grid = geo.rasterize([a], [1.0], (n, n))
    in_a = grid.owner == 0
    grid_b = geo.rasterize([b], [1.0], (n, n))
    in_b = grid_b.owner == 0
    approx = np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)
    assert abs(approx - geo.iou(a, b)) <= 1 / n


def test_giou_examples():
    b = Box(0.5, 0.5, 0.2, 0.2)
    assert geo.giou(b, b) == 1.0
    assert geo.giou(_corners(0, 0, 0.25, 1), _corners(0.75, 0, 1, 1)) == pytest.approx(-0.5)
    assert geo.giou(_corners(0, 0, 0.5, 1), _corners(0.5, 0, 1, 1)) == pytest.approx(0.0)


def test_giou_zero_area_enclosing_box():
    p = Box(0.5, 0.5, 0, 0)
    assert geo.giou(p, p) == 0.0


def test_giou_bounded_by_iou_and_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = Box(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.0, 0.4, 2))
        b = Box(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.0, 0.4, 2))
        assert 0.0 <= geo.iou(a, b) <= 1.0
        assert geo.giou(a, b) <= geo.iou(a, b) + 1e-12
        assert geo.giou(a, b) == pytest.approx(geo.giou(b, a))


# --- window clipping ---


def test_clip_inside_window_keeps_everything():
    window = _corners(0.0, 0.0, 0.5, 0.5)
    clipped, kept = geo.clip_to_window(_corners(0.1, 0.1, 0.2, 0.3), window)
    assert kept == pytest.approx(1.0)
    assert geo.to_corners(clipped) == pytest.approx((0.2, 0.2, 0.4, 0.6))


def test_clip_disjoint_and_degenerate():
    window = _corners(0.0, 0.0, 0.5, 0.5)
    assert geo.clip_to_window(_corners(0.6, 0.6, 0.9, 0.9), window) == (None, 0.0)
    assert geo.clip_to_window(Box(0.2, 0.2, 0.0, 0.1), window) == (None, 0.0)


def test_clip_retained_fraction_half():
    _, kept = geo.clip_to_window(_corners(0, 0, 0.4, 0.4), _corners(0.2, 0, 1, 1))
    assert kept == pytest.approx(0.5)


def test_clip_then_unclip_recovers_intersection():
    b = _corners(0.1, 0.3, 0.7, 0.9)
    window = _corners(0.25, 0.2, 0.75, 0.7)
    clipped, _ = geo.clip_to_window(b, window)
    back = geo.unclip_from_window(clipped, window)
    assert geo.to_corners(back) == pytest.approx(geo.to_corners(geo.intersection(b, window)))


def test_clip_rejects_empty_window():
    with pytest.raises(ValueError):
        geo.clip_to_window(Box(0.5, 0.5, 0.1, 0.1), Box(0.5, 0.5, 0.0, 0.3))


# --- rasterization ---


def test_rasterize_full_frame_box():
    grid = geo.rasterize([Box(0.5, 0.5, 1, 1)], [0.1], (4, 4))
    assert (grid.owner == 0).all()


def test_rasterize_empty_is_background():
    grid = geo.rasterize([], [], (3, 5))
    assert grid.owner.shape == (5, 3)
    assert (grid.owner == geo.BACKGROUND).all()


def test_rasterize_disjoint_boxes_ignore_rank():
    left = _corners(0, 0, 0.5, 1)
    right = _corners(0.5, 0, 1, 1)
    grid = geo.rasterize([left, right], [0.1, 5.0], (4, 4))
    assert (grid.owner[:, :2] == 0).all()
    assert (grid.owner[:, 2:] == 1).all()


def test_rasterize_identical_boxes_highest_rank_wins():
    b = _corners(0, 0, 0.5, 0.5)
    grid = geo.rasterize([b, b], [0.2, 0.9], (4, 4))
    assert grid.cells_of(1) == 4
    assert grid.cells_of(0) == 0


def test_rasterize_ties_go_to_lower_index():
    b = _corners(0, 0, 1, 1)
    grid = geo.rasterize([b, b], [0.5, 0.5], (4, 4))
    assert (grid.owner == 0).all()


def test_rasterize_rejects_length_mismatch():
    with pytest.raises(ValueError):
        geo.rasterize([Box(0.5, 0.5, 1, 1)], [1.0, 2.0], (4, 4))


def test_box_from_owned_cells_examples():
    full = geo.rasterize([Box(0.5, 0.5, 1, 1)], [1.0], (8, 8))
    assert geo.to_corners(geo.box_from_owned_cells(full, 0)) == (0, 0, 1, 1)
    assert geo.box_from_owned_cells(full, 3) is None

    owner = np.full((8, 8), geo.BACKGROUND)
    owner[:2, :2] = 0
    grid = geo.PixelGrid(8, 8, owner)
    assert geo.to_corners(geo.box_from_owned_cells(grid, 0)) == (0, 0, 0.25, 0.25)


def test_mask_to_box():
    mask = np.zeros((4, 8), dtype=bool)
    mask[1:3, 2:6] = True
    assert geo.to_corners(geo.mask_to_box(mask)) == (0.25, 0.25, 0.75, 0.75)
    assert geo.mask_to_box(np.zeros((2, 2), dtype=bool)) is None


# --- torch forms ---


def test_pairwise_giou_matches_scalar():
    a = [Box(0.3, 0.4, 0.2, 0.3), _corners(0, 0, 0.25, 1)]
    b = [_corners(0.75, 0, 1, 1), Box(0.35, 0.45, 0.3, 0.2), Box(0.5, 0.5, 1, 1)]
    mat = geo.pairwise_giou(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64))
    assert mat.shape == (2, 3)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert mat[i, j].item() == pytest.approx(geo.giou(x, y), abs=1e-9)


def test_elementwise_giou_is_differentiable():
    pred = torch.tensor([[0.4, 0.5, 0.2, 0.2]], dtype=torch.float64, requires_grad=True)
    target = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
    (1 - geo.elementwise_giou(pred, target)).sum().backward()
    assert pred.grad is not None
    assert math.isfinite(pred.grad.abs().sum().item())
    assert pred.grad[0, 0].item() < 0
