import csv
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.optimize import linear_sum_assignment

import config as cfgmod
import synthdata as sd
import trainloss as tl
from augment import clip_from_video
from geometry import Box, from_corners, giou
from model import FramePredictions, VideoOwl

W = tl.LossWeights()


def _preds(boxes: torch.Tensor, logits: torch.Tensor) -> FramePredictions:
    """(T, Q, 4) boxes and (T, Q, P) logits wrapped as a single-clip prediction."""
    emb = torch.nn.functional.normalize(torch.ones(*boxes.shape[:2], 4, dtype=boxes.dtype), dim=-1)
    return FramePredictions(boxes, logits, logits.max(-1).values, emb)


def _random_preds(T: int, Q: int, P: int, seed: int) -> FramePredictions:
    g = torch.Generator().manual_seed(seed)
    centers = 0.3 + 0.4 * torch.rand(T, Q, 2, generator=g, dtype=torch.float64)
    sizes = 0.1 + 0.3 * torch.rand(T, Q, 2, generator=g, dtype=torch.float64)
    logits = 3 * torch.randn(T, Q, P, generator=g, dtype=torch.float64)
    return _preds(torch.cat([centers, sizes], -1), logits)


def _targets(boxes: list[list[Box | None]], labels: list[int]) -> tl.ClipTargets:
    K, T = len(boxes), len(boxes[0]) if boxes else 1
    tb = torch.zeros(K, T, 4, dtype=torch.float64)
    present = torch.zeros(K, T, dtype=torch.bool)
    for k, row in enumerate(boxes):
        for t, b in enumerate(row):
            if b is not None:
                tb[k, t] = torch.tensor(tuple(b), dtype=torch.float64)
                present[k, t] = True
    return tl.ClipTargets(tb, present, torch.tensor(labels, dtype=torch.long), list(range(K)))


def _empty_targets(T: int) -> tl.ClipTargets:
    return tl.ClipTargets(
        torch.zeros(0, T, 4, dtype=torch.float64), torch.zeros(0, T, dtype=torch.bool), torch.zeros(0, dtype=torch.long), []
    )


# --- focal loss ---


def test_focal_values_at_zero_logit():
    x = torch.zeros(1, dtype=torch.float64)
    pos = tl.focal_sigmoid_loss(x, torch.ones_like(x), 0.3, 2.0)
    neg = tl.focal_sigmoid_loss(x, torch.zeros_like(x), 0.3, 2.0)
    assert float(pos) == pytest.approx(0.051986, abs=1e-6)
    assert float(neg) == pytest.approx(0.121301, abs=1e-6)


def test_focal_confident_correct_is_near_zero():
    x = torch.tensor([30.0], dtype=torch.float64)
    assert float(tl.focal_sigmoid_loss(x, torch.ones_like(x), 0.3, 2.0)) < 1e-12
    assert float(tl.focal_sigmoid_loss(-x, torch.zeros_like(x), 0.3, 2.0)) < 1e-12


def test_focal_is_finite_and_non_negative_for_large_logits():
    x = torch.linspace(-50, 50, 201, dtype=torch.float64)
    for target in (0.0, 1.0):
        loss = tl.focal_sigmoid_loss(x, torch.full_like(x, target), 0.3, 2.0)
        assert torch.isfinite(loss).all()
        assert (loss >= 0).all()


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        tl.LossWeights(w_l1=-1.0)


# --- pair cost ---


def test_pair_cost_giou_term():
    weights = tl.LossWeights(w_cls=0.0, w_l1=0.0, w_giou=1.0)
    pred = torch.tensor(tuple(from_corners(0.0, 0.0, 0.25, 1.0)), dtype=torch.float64)
    target = torch.tensor(tuple(from_corners(0.75, 0.0, 1.0, 1.0)), dtype=torch.float64)
    cost = tl.pair_cost(pred, torch.zeros(2, dtype=torch.float64), target, [0], weights)
    assert cost == pytest.approx(1.5)


def test_pair_cost_identical_box_has_no_box_terms():
    weights = tl.LossWeights(w_cls=0.0)
    box = torch.tensor([0.4, 0.5, 0.2, 0.3], dtype=torch.float64)
    assert tl.pair_cost(box, torch.zeros(2, dtype=torch.float64), box, [1], weights) == pytest.approx(0.0, abs=1e-12)


def test_correct_pair_dominates_mismatches():
    boxes = torch.tensor([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]], dtype=torch.float64)
    logits = torch.tensor([[20.0, -20.0], [-20.0, 20.0]], dtype=torch.float64)
    cost = tl.pair_cost_matrix(boxes, logits, boxes, torch.tensor([0, 1]), W)
    assert cost[0, 0] < cost[0, 1] and cost[0, 0] < cost[1, 0]
    assert cost[1, 1] < cost[0, 1] and cost[1, 1] < cost[1, 0]


def test_matrix_agrees_with_scalar_cost():
    pred = _random_preds(1, 3, 2, seed=4)
    tb = pred.boxes[0, :2].flip(0) + 0.01
    labels = torch.tensor([1, 0])
    mat = tl.pair_cost_matrix(pred.boxes[0], pred.logits[0], tb, labels, W)
    for s in range(3):
        for k in range(2):
            scalar = tl.pair_cost(pred.boxes[0, s], pred.logits[0, s], tb[k], [int(labels[k])], W)
            assert float(mat[s, k]) == pytest.approx(scalar, rel=1e-12)


# --- sticky matching ---


def test_frame_zero_binds_every_present_track():
    pred = _random_preds(2, 4, 2, seed=0)
    targets = _targets([[Box(0.3, 0.3, 0.2, 0.2)] * 2, [Box(0.6, 0.6, 0.2, 0.2)] * 2], [0, 1])
    ledger = tl.sticky_match(pred, targets, tl.MatchLedger(), 0, W)
    assert len(ledger) == 2
    before = dict(ledger.slot_to_track)
    tl.sticky_match(pred, targets, ledger, 1, W)
    assert ledger.slot_to_track == before


def test_entering_track_binds_a_fresh_slot_at_its_first_frame():
    a = Box(0.3, 0.3, 0.2, 0.2)
    b = Box(0.6, 0.6, 0.2, 0.2)
    targets = _targets([[a, a, a], [None, None, b]], [0, 1])
    pred = _random_preds(3, 3, 2, seed=1)
    ledger = tl.MatchLedger()
    sizes = []
    for t in range(3):
        tl.sticky_match(pred, targets, ledger, t, W)
        sizes.append(len(ledger))
    assert sizes == [1, 1, 2]
    slots = {track: slot for slot, track in ledger.slot_to_track.items()}
    assert slots[0] != slots[1]


def test_more_tracks_than_slots():
    boxes = [[Box(0.2 + 0.2 * k, 0.5, 0.1, 0.1)] for k in range(3)]
    ledger = tl.sticky_match(_random_preds(1, 2, 2, seed=2), _targets(boxes, [0, 1, 0]), tl.MatchLedger(), 0, W)
    assert len(ledger) == 2


def test_ledger_rejects_rebinding():
    ledger = tl.MatchLedger()
    ledger.bind(0, 3)
    with pytest.raises(ValueError):
        ledger.bind(0, 4)
    with pytest.raises(ValueError):
        ledger.bind(1, 3)
    with pytest.raises(AssertionError):
        ledger.check({2: 5})


# --- clip loss ---


def _reference_set_loss(pred: FramePredictions, targets: tl.ClipTargets, w: tl.LossWeights) -> float:
    """Per-image set loss written with numpy, scipy and the scalar box helpers."""
    a, g = w.focal_alpha, w.focal_gamma
    x = pred.logits[0].numpy()
    p = 1.0 / (1.0 + np.exp(-x))
    log_p, log_q = -np.logaddexp(0.0, -x), -np.logaddexp(0.0, x)
    pos = -a * (1 - p) ** g * log_p
    neg = -(1 - a) * p**g * log_q
    boxes = [Box(*map(float, row)) for row in pred.boxes[0]]
    tboxes = [Box(*map(float, targets.boxes[k, 0])) for k in range(len(targets.track_ids))]
    labels = targets.labels.tolist()
    cost = np.zeros((len(boxes), len(tboxes)))
    for s, pb in enumerate(boxes):
        for k, tb in enumerate(tboxes):
            l1 = sum(abs(u - v) for u, v in zip(pb, tb))
            cost[s, k] = w.w_cls * (pos[s, labels[k]] - neg[s, labels[k]]) + w.w_l1 * l1 + w.w_giou * (1 - giou(pb, tb))
    rows, cols = linear_sum_assignment(cost)
    y = np.zeros_like(x)
    box_terms = 0.0
    for s, k in zip(rows, cols):
        y[s, labels[k]] = 1.0
        pb, tb = boxes[s], tboxes[k]
        box_terms += w.w_l1 * sum(abs(u - v) for u, v in zip(pb, tb)) + w.w_giou * (1 - giou(pb, tb))
    cls = (y * pos + (1 - y) * neg).sum()
    return (w.w_cls * cls + box_terms) / len(tboxes)


def test_single_frame_loss_equals_set_loss():
    rng = np.random.default_rng(0)
    for seed in range(20):
        K = int(rng.integers(1, 4))
        pred = _random_preds(1, 5, 3, seed=seed)
        boxes = [[Box(*rng.uniform([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.3, 0.3]))] for _ in range(K)]
        targets = _targets(boxes, rng.integers(0, 3, size=K).tolist())
        got = float(tl.clip_loss(pred, targets, W).total)
        assert got == pytest.approx(_reference_set_loss(pred, targets, W), abs=1e-12, rel=1e-12)


def test_empty_clip_is_mean_negative_focal_loss():
    pred = _random_preds(2, 3, 2, seed=5)
    out = tl.clip_loss(pred, _empty_targets(2), W)
    expected = tl.focal_sigmoid_loss(pred.logits, torch.zeros_like(pred.logits), W.focal_alpha, W.focal_gamma).mean()
    assert float(out.total) == pytest.approx(float(expected), rel=1e-12)
    assert out.terms["loss_l1"] == 0.0
    assert len(out.ledger) == 0


def test_perfect_predictions_have_tiny_loss():
    a, b = Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.6, 0.1, 0.3)
    targets = _targets([[a, a, None], [None, b, b]], [0, 1])
    boxes = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
    logits = torch.full((3, 4, 3), -20.0, dtype=torch.float64)
    for t in range(3):
        boxes[t, 0] = torch.tensor(tuple(a), dtype=torch.float64)
        boxes[t, 1] = torch.tensor(tuple(b), dtype=torch.float64)
    logits[:2, 0, 0] = 20.0
    logits[1:, 1, 1] = 20.0
    out = tl.clip_loss(_preds(boxes, logits), targets, W)
    assert out.ledger.slot_to_track == {0: 0, 1: 1}
    assert float(out.total) < 1e-3


def test_loss_ignores_track_and_slot_order():
    a, b, c = Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.6, 0.1, 0.3), Box(0.5, 0.5, 0.3, 0.2)
    rows, labels = [[a, a, None], [None, b, b], [c, c, c]], [0, 1, 2]
    pred = _random_preds(3, 5, 3, seed=7)
    base = float(tl.clip_loss(pred, _targets(rows, labels), W).total)

    order = [2, 0, 1]
    shuffled = _targets([rows[i] for i in order], [labels[i] for i in order])
    assert float(tl.clip_loss(pred, shuffled, W).total) == pytest.approx(base, rel=1e-12)

    perm = torch.tensor([4, 2, 0, 3, 1])
    permuted = _preds(pred.boxes[:, perm], pred.logits[:, perm])
    assert float(tl.clip_loss(permuted, _targets(rows, labels), W).total) == pytest.approx(base, rel=1e-12)


def test_misaligned_targets_rejected():
    with pytest.raises(ValueError):
        tl.clip_loss(_random_preds(2, 2, 2, seed=0), _empty_targets(3), W)


def test_clip_targets_from_annotated_clip():
    catalog = sd.make_catalog(3, 2, 8, seed=0)
    video = sd.generate_scene(catalog, 1, sd.SceneConfig(num_objects=2, duration=2.0, fps=2.0, motion="linear"))
    clip = clip_from_video(video)
    targets = tl.clip_targets(clip, catalog, torch.float64)
    assert targets.boxes.shape == (2, 4, 4)
    assert targets.present.tolist() == [t.present for t in clip.tracks]
    assert targets.labels.tolist() == [catalog.index_of(t.class_id) for t in clip.tracks]


# --- gradients ---


def _one_slot_model() -> VideoOwl:
    cfg = cfgmod.ModelConfig(dtype="float64", num_queries=1, dim=16, qkv_dim=16, mlp_dim=32, heads=2)
    return VideoOwl(cfg, prompt_dim=8, image_size=32, seed=1).eval()


def test_logit_shift_gradient_matches_closed_form():
    m = _one_slot_model()
    frames = torch.rand(1, 32, 32, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    prompts = torch.nn.functional.normalize(torch.ones(1, 8, dtype=torch.float64), dim=-1)
    targets = _empty_targets(1)

    def loss_fn() -> torch.Tensor:
        return tl.clip_loss(m.rollout(frames, prompts).clip(0), targets, W).total

    _, grads = tl.compute_gradients(m, loss_fn)
    with torch.no_grad():
        x = m.rollout(frames, prompts).logits[0, 0, 0, 0]
    s = torch.sigmoid(x)
    a, g = W.focal_alpha, W.focal_gamma
    expected = -(1 - a) * s**g * (g * (1 - s) * torch.log1p(-s) - s)
    assert float(grads["logit_shift"].sum()) == pytest.approx(float(expected), rel=1e-10)


def test_unused_parameters_get_exact_zero_gradient():
    m = _one_slot_model()
    frames = torch.rand(2, 32, 32, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    prompts = torch.nn.functional.normalize(torch.ones(2, 8, dtype=torch.float64), dim=-1)
    _, grads = tl.compute_gradients(m, lambda: tl.clip_loss(m.rollout(frames, prompts).clip(0), _empty_targets(2), W).total)
    box_grads = [v for k, v in grads.items() if k.startswith("box_head")]
    assert box_grads
    assert all(torch.count_nonzero(v) == 0 for v in box_grads)
    assert set(grads) == {n for n, _ in m.named_parameters()}


def test_non_finite_loss_rejected():
    m = _one_slot_model()
    with pytest.raises(tl.NonFiniteLossError):
        tl.compute_gradients(m, lambda: m.logit_shift.sum() * math.nan)


# --- optimizer ---


class _Scalar(torch.nn.Module):
    def __init__(self, *values: float):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(values, dtype=torch.float64))


def _opt(module: torch.nn.Module, **kw) -> tl.OptimizerState:
    train = cfgmod.TrainConfig(base_lr=0.1, warmup_steps=1, phase1_steps=0, phase2_steps=10, **kw)
    return tl.OptimizerState(module, train)


def test_finite_difference_floor_makes_tiny_gradients_absolute():
    mod = _Scalar(0.5)

    def loss_fn():
        return 1e-6 * mod.w.sum()

    wrong = {"w": torch.zeros(1, dtype=torch.float64)}
    # |0 - 1e-6| over the 1e-3 floor, not over |fd|
    assert tl.finite_difference_check(mod, loss_fn, wrong, num_coords=1) == pytest.approx(1e-3, rel=1e-6)
    assert tl.finite_difference_check(mod, loss_fn, wrong, num_coords=1, floor=1e-9) == pytest.approx(1.0, rel=1e-6)
    right = {"w": torch.full((1,), 1e-6, dtype=torch.float64)}
    assert tl.finite_difference_check(mod, loss_fn, right, num_coords=1) < 1e-6


def test_zero_gradient_leaves_parameters_unchanged():
    mod = _Scalar(1.0, -2.0)
    state = _opt(mod)
    mod.w.grad = torch.zeros_like(mod.w)
    tl.adam_step(state)
    assert mod.w.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_first_adam_step():
    mod = _Scalar(1.0)
    state = _opt(mod)
    mod.w.grad = torch.tensor([0.5], dtype=torch.float64)
    tl.adam_step(state)
    assert float(mod.w) == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_large_gradient_is_clipped_to_unit_norm():
    mod = _Scalar(0.0, 0.0)
    state = _opt(mod)
    mod.w.grad = torch.tensor([6.0, 8.0], dtype=torch.float64)
    norm = tl.adam_step(state)
    assert norm == pytest.approx(10.0)
    assert mod.w.grad.tolist() == pytest.approx([0.6, 0.8])


def test_lr_schedule_shape():
    assert tl.lr_schedule(0, 1.0, 10, 30) == 0.0
    assert tl.lr_schedule(5, 1.0, 10, 30) == pytest.approx(0.5)
    assert tl.lr_schedule(10, 1.0, 10, 30) == pytest.approx(1.0)
    assert tl.lr_schedule(20, 1.0, 10, 30) == pytest.approx(0.5)
    assert tl.lr_schedule(30, 1.0, 10, 30) == pytest.approx(0.0, abs=1e-15)


def test_optimizer_state_round_trip():
    mod = _Scalar(1.0)
    state = _opt(mod)
    mod.w.grad = torch.tensor([0.5], dtype=torch.float64)
    tl.adam_step(state)
    other = _opt(_Scalar(1.0))
    other.load_state_dict(state.state_dict())
    assert other.step == 1


# --- training loop ---


def _run_config(steps: tuple[int, int] = (1, 1), **train_kw) -> cfgmod.RunConfig:
    return cfgmod.RunConfig(
        seed=4,
        data=cfgmod.DataConfig(frame_size=32, train_videos=2, eval_videos=0, stills=2, duration_s=4.0, max_objects=2),
        model=cfgmod.ModelConfig(num_queries=4, dim=16, qkv_dim=16, mlp_dim=32, heads=2),
        train=cfgmod.TrainConfig(
            batch_size=2, clip_len=2, phase1_steps=steps[0], phase2_steps=steps[1], warmup_steps=1, log_every=1, **train_kw
        ),
    )


def _dataset(cfg: cfgmod.RunConfig) -> sd.Dataset:
    catalog = sd.make_catalog(cfg.data.num_known, cfg.data.num_unknown, cfg.data.prompt_dim, seed=0)
    return sd.Dataset(catalog, sd.generate_dataset(catalog, cfg.data, seed=1))


def test_phase_plan():
    assert tl.phase_plan(_run_config((3, 4)).train) == [("pseudo", 3, 1.0), ("mixed", 4, 0.5)]
    assert tl.phase_plan(_run_config((3, 4), supervision="real").train) == [("real", 7, 0.0)]
    assert tl.phase_plan(_run_config((3, 4), supervision="pseudo").train) == [("pseudo", 7, 1.0)]


def test_zero_steps_returns_initialization(monkeypatch):
    monkeypatch.setenv("OWL_LAB_QUIET", "1")
    cfg = _run_config((0, 0))
    ds = _dataset(cfg)
    result = tl.train(cfg, ds)
    init = VideoOwl(cfg.model, ds.catalog.prompt_dim, cfg.data.frame_size, cfgmod.derive_seed(cfg.seed, "model"))
    for (name, a), (_, b) in zip(result.model.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), name
    assert result.log == []


def test_same_seed_is_bitwise_reproducible(monkeypatch):
    monkeypatch.setenv("OWL_LAB_QUIET", "1")
    cfg = _run_config((1, 1))
    ds = _dataset(cfg)
    a = tl.train(cfg, ds).model.state_dict()
    b = tl.train(cfg, ds).model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_training_writes_log_and_checkpoint(tmp_path: Path, monkeypatch):
    monkeypatch.setenv("OWL_LAB_QUIET", "1")
    cfg = _run_config((1, 1), eval_every=2)
    calls = []

    def evaluate(model):
        calls.append(1)
        return {"owta_known": 0.25, "owta_unknown": 0.5}

    result = tl.train(cfg, _dataset(cfg), evaluate=evaluate, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "ck.pt")
    assert calls == [1]
    assert [r["phase"] for r in result.log] == ["pseudo", "mixed"]
    with (tmp_path / "log.csv").open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == tl.LOG_COLUMNS
    assert rows[0]["owta_known"] == ""
    assert float(rows[1]["owta_unknown"]) == 0.5
    assert (tmp_path / "ck.pt").exists()
    assert result.optimizer.step == 2


def test_empty_dataset_rejected():
    cfg = _run_config((1, 1))
    with pytest.raises(ValueError):
        tl.train(cfg, sd.Dataset(sd.make_catalog(3, 2, 32, seed=0), []))


@pytest.mark.skipif(not cfgmod.slow_tests_enabled(), reason="set OWL_LAB_SLOW=1")
def test_overfits_a_single_clip():
    catalog = sd.make_catalog(3, 2, 8, seed=0)
    scene = sd.SceneConfig(num_objects=2, duration=2.0, fps=2.0, motion="linear", frame_size=32)
    clip = clip_from_video(sd.generate_scene(catalog, 3, scene, class_ids=catalog.known_ids()))
    cfg = cfgmod.ModelConfig(num_queries=4, dim=32, qkv_dim=32, mlp_dim=64, heads=2, dropout=0.0)
    m = VideoOwl(cfg, prompt_dim=8, image_size=32, seed=0)
    frames, (targets,) = tl.clips_to_batch([clip], catalog, m.dtype)
    prompts = tl.prompts_tensor(catalog, m.dtype)
    state = tl.OptimizerState(m, cfgmod.TrainConfig(base_lr=3e-3, warmup_steps=20, phase1_steps=0, phase2_steps=1500))
    for _ in range(1500):
        tl.compute_gradients(m, lambda: tl.clip_loss(m.rollout(frames, prompts).clip(0), targets, W).total)
        tl.adam_step(state)
    with torch.no_grad():
        assert float(tl.clip_loss(m.eval().rollout(frames, prompts).clip(0), targets, W).total) < 0.05
