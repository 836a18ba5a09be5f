"""
Tracking-aware set-prediction loss and the optimization loop.

Within a training clip a slot, once matched to a ground-truth track, stays
matched (sticky matching); only unmatched slots and newly present tracks take
part in the per-frame assignment. Matched slots get box + positive-class loss
wherever their track is present and negative-class loss elsewhere; unmatched
slots get negative-class loss everywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

import config as cfgmod
from assignment import solve_assignment
from augment import AnnotatedClip, ClipSampler
from geometry import elementwise_giou, pairwise_giou
from model import FramePredictions, VideoOwl, frames_tensor, save_checkpoint
from synthdata import ClassCatalog, Dataset

LOG_COLUMNS = ("step", "phase", "lr", "loss", "loss_cls", "loss_l1", "loss_giou", "owta_known", "owta_unknown")


class NonFiniteLossError(ValueError):
    """The scalar loss was NaN or infinite; no gradient step was taken."""


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_l1: float = 1.0
    w_giou: float = 1.0
    focal_alpha: float = 0.3
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        if min(self.w_cls, self.w_l1, self.w_giou) < 0:
            raise ValueError("loss weights must be >= 0")

    @classmethod
    def from_config(cls, train: cfgmod.TrainConfig) -> "LossWeights":
        return cls(train.w_cls, train.w_l1, train.w_giou, train.focal_alpha, train.focal_gamma)


# ---------------------------------------------------------------------------
# Focal loss and matching cost
# ---------------------------------------------------------------------------
def focal_sigmoid_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Elementwise sigmoid focal loss, stable for large |logits|."""
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    q = torch.sigmoid(-logits)
    pos = -alpha * q.pow(gamma) * log_p
    neg = -(1.0 - alpha) * p.pow(gamma) * log_1mp
    return targets * pos + (1.0 - targets) * neg


def focal_cost(logits: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Cost of calling each prompt positive: positive term minus negative term."""
    pos = focal_sigmoid_loss(logits, torch.ones_like(logits), alpha, gamma)
    neg = focal_sigmoid_loss(logits, torch.zeros_like(logits), alpha, gamma)
    return pos - neg


def pair_cost_matrix(
    boxes: torch.Tensor,
    logits: torch.Tensor,
    target_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """(S, 4), (S, P) predictions vs (K, 4), (K,) targets -> (S, K) costs."""
    cls = focal_cost(logits, weights.focal_alpha, weights.focal_gamma)[:, target_labels]
    l1 = torch.cdist(boxes, target_boxes.to(boxes.dtype), p=1)
    giou = pairwise_giou(boxes, target_boxes.to(boxes.dtype))
    return weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * (1.0 - giou)


def pair_cost(
    box: torch.Tensor, logits: torch.Tensor, target_box: torch.Tensor, positives: Sequence[int], weights: LossWeights
) -> float:
    """Matching cost of one slot against one target with a set of positive prompts."""
    cls = focal_cost(logits, weights.focal_alpha, weights.focal_gamma)[list(positives)].sum()
    l1 = (box - target_box).abs().sum()
    giou = elementwise_giou(box, target_box)
    return float(weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * (1.0 - giou))


# ---------------------------------------------------------------------------
# Targets and sticky matching
# ---------------------------------------------------------------------------
@dataclass
class ClipTargets:
    boxes: torch.Tensor  # (K, T, 4); zeros where absent
    present: torch.Tensor  # (K, T) bool
    labels: torch.Tensor  # (K,) prompt index
    track_ids: list[int]

    @property
    def num_frames(self) -> int:
        return int(self.present.shape[1])


def clip_targets(clip: AnnotatedClip, catalog: ClassCatalog, dtype: torch.dtype = torch.float32) -> ClipTargets:
    T = len(clip)
    K = len(clip.tracks)
    boxes = torch.zeros(K, T, 4, dtype=dtype)
    present = torch.zeros(K, T, dtype=torch.bool)
    for k, track in enumerate(clip.tracks):
        for t, b in enumerate(track.boxes):
            if b is not None:
                boxes[k, t] = torch.tensor(tuple(b), dtype=dtype)
                present[k, t] = True
    labels = torch.tensor([catalog.index_of(t.class_id) for t in clip.tracks], dtype=torch.long)
    return ClipTargets(boxes, present, labels, [t.track_id for t in clip.tracks])


@dataclass
class MatchLedger:
    """Sticky slot -> track (target row) bindings for one clip."""

    slot_to_track: dict[int, int] = field(default_factory=dict)

    def bind(self, slot: int, track: int) -> None:
        if slot in self.slot_to_track:
            raise ValueError(f"slot {slot} is already bound to track {self.slot_to_track[slot]}")
        if track in self.slot_to_track.values():
            raise ValueError(f"track {track} is already bound")
        self.slot_to_track[slot] = track

    def tracks(self) -> set[int]:
        return set(self.slot_to_track.values())

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.slot_to_track.items())

    def check(self, previous: dict[int, int]) -> None:
        """Injective, and every earlier binding still present unchanged."""
        values = list(self.slot_to_track.values())
        if len(set(values)) != len(values):
            raise AssertionError("ledger maps two slots to one track")
        for slot, track in previous.items():
            if self.slot_to_track.get(slot) != track:
                raise AssertionError(f"binding {slot}->{track} was removed or reassigned")

    def __len__(self) -> int:
        return len(self.slot_to_track)


@torch.no_grad()
def sticky_match(
    pred: FramePredictions, targets: ClipTargets, ledger: MatchLedger, t: int, weights: LossWeights
) -> MatchLedger:
    """Bind unmatched slots to tracks that are present at frame t and still unbound."""
    before = dict(ledger.slot_to_track)
    bound = ledger.tracks()
    tracks = [k for k in range(len(targets.track_ids)) if targets.present[k, t] and k not in bound]
    slots = [q for q in range(pred.boxes.shape[1]) if q not in ledger.slot_to_track]
    if tracks and slots:
        cost = pair_cost_matrix(
            pred.boxes[t, slots], pred.logits[t, slots], targets.boxes[tracks, t], targets.labels[tracks], weights
        )
        for r, c in solve_assignment(cost.cpu().numpy()).pairs:
            ledger.bind(slots[r], tracks[c])
    ledger.check(before)
    return ledger


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------
@dataclass
class LossOutput:
    total: torch.Tensor
    terms: dict[str, float]
    ledger: MatchLedger


def clip_loss(
    pred: FramePredictions, targets: ClipTargets, weights: LossWeights, ledger: MatchLedger | None = None
) -> LossOutput:
    """Loss of one clip; ``pred`` is shaped (T, Q, ...).

    Pass a finished ``ledger`` to hold the matching fixed (gradient checks).
    """
    T, Q, P = pred.logits.shape
    if targets.num_frames != T:
        raise ValueError(f"predictions cover {T} frames, targets {targets.num_frames}")
    if ledger is None:
        ledger = MatchLedger()
        detached = pred.detach()
        for t in range(T):
            sticky_match(detached, targets, ledger, t, weights)

    dtype = pred.logits.dtype
    cls_target = torch.zeros(T, Q, P, dtype=dtype)
    pairs = ledger.pairs()
    for q, k in pairs:
        cls_target[targets.present[k], q, int(targets.labels[k])] = 1.0
    cls_sum = focal_sigmoid_loss(pred.logits, cls_target, weights.focal_alpha, weights.focal_gamma).sum()

    l1_sum = pred.boxes.new_zeros(())
    giou_sum = pred.boxes.new_zeros(())
    if pairs:
        q_idx = [q for q, _ in pairs]
        k_idx = [k for _, k in pairs]
        mask = targets.present[k_idx].T.to(dtype)  # (T, M)
        pb = pred.boxes[:, q_idx]
        tb = targets.boxes[k_idx].transpose(0, 1).to(dtype)
        l1_sum = ((pb - tb).abs().sum(-1) * mask).sum()
        giou_sum = ((1.0 - elementwise_giou(pb, tb)) * mask).sum()

    num_present = int(targets.present.sum())
    if num_present:
        total = (weights.w_cls * cls_sum + weights.w_l1 * l1_sum + weights.w_giou * giou_sum) / num_present
        norm = float(num_present)
    else:
        norm = float(T * Q * P)
        total = weights.w_cls * cls_sum / norm
    terms = {
        "loss_cls": float(cls_sum) / norm,
        "loss_l1": float(l1_sum) / norm,
        "loss_giou": float(giou_sum) / norm,
        "num_present": float(num_present),
    }
    return LossOutput(total, terms, ledger)


def batch_loss(
    pred: FramePredictions, targets: Sequence[ClipTargets], weights: LossWeights
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean clip loss over a (B, T, Q, ...) rollout."""
    outs = [clip_loss(pred.clip(b), tg, weights) for b, tg in enumerate(targets)]
    total = torch.stack([o.total for o in outs]).mean()
    terms = {key: float(np.mean([o.terms[key] for o in outs])) for key in ("loss_cls", "loss_l1", "loss_giou")}
    return total, terms


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def compute_gradients(model: VideoOwl, loss_fn: Callable[[], torch.Tensor]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Backpropagate ``loss_fn()``; returns (loss, per-parameter gradients).

    Parameters the loss does not depend on get an exact zero gradient.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"loss is {float(loss)}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        grads[name] = p.grad.detach().clone()
    return loss.detach(), grads


@torch.no_grad()
def finite_difference_check(
    model: VideoOwl,
    loss_fn: Callable[[], torch.Tensor],
    grads: dict[str, torch.Tensor],
    num_coords: int = 100,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Max relative error between ``grads`` and central differences.

    Coordinates are drawn uniformly over all trainable entries. The error at a
    coordinate is |g - fd| / max(|g|, |fd|, floor); where both |g| and |fd| are
    below ``floor`` this is an absolute error scaled by 1/floor, so a 1e-4
    threshold tolerates absolute deviations up to 1e-7 on near-zero gradients.
    """
    params = dict(model.named_parameters())
    index = [(name, i) for name, p in params.items() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(index), size=min(num_coords, len(index)), replace=False)
    worst = 0.0
    for j in picks:
        name, i = index[int(j)]
        flat = params[name].view(-1)
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        fd = (up - down) / (2 * h)
        g = float(grads[name].view(-1)[i])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------
def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at total_steps."""
    if step <= 0:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class OptimizerState:
    """Adam over the model's trainable parameters, with global-norm clipping and the schedule."""

    def __init__(self, model: VideoOwl, train: cfgmod.TrainConfig, step: int = 0):
        self.model = model
        self.train = train
        self.step = step
        self.adam = torch.optim.Adam(
            model.parameters(), lr=0.0, betas=(train.beta1, train.beta2), eps=train.eps
        )

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.train.base_lr, self.train.warmup_steps, self.train.total_steps)

    def state_dict(self) -> dict:
        return {"step": self.step, "adam": self.adam.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.adam.load_state_dict(state["adam"])


def adam_step(state: OptimizerState) -> float:
    """Clip gradients to the global norm, take one Adam step; returns the pre-clip norm."""
    params = [p for p in state.model.parameters() if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(params, state.train.grad_clip_norm))
    lr = state.lr(state.step + 1)
    for group in state.adam.param_groups:
        group["lr"] = lr
    state.adam.step()
    state.step += 1
    return norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: VideoOwl
    optimizer: OptimizerState
    log: list[dict] = field(default_factory=list)


def phase_plan(train: cfgmod.TrainConfig) -> list[tuple[str, int, float]]:
    """(phase name, steps, pseudo fraction) per phase."""
    if train.supervision == "pseudo":
        return [("pseudo", train.total_steps, 1.0)]
    if train.supervision == "real":
        return [("real", train.total_steps, 0.0)]
    return [("pseudo", train.phase1_steps, 1.0), ("mixed", train.phase2_steps, train.pseudo_fraction)]


def prompts_tensor(catalog: ClassCatalog, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(catalog.prompts(), dtype=dtype)


def clips_to_batch(clips: Sequence[AnnotatedClip], catalog: ClassCatalog, dtype: torch.dtype):
    frames = frames_tensor(np.stack([c.frames for c in clips]), dtype)
    return frames, [clip_targets(c, catalog, dtype) for c in clips]


def _write_log(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def train(
    cfg: cfgmod.RunConfig,
    dataset: Dataset,
    seed: int | None = None,
    resume: tuple[VideoOwl, dict | None, int] | None = None,
    evaluate: Callable[[VideoOwl], dict[str, float]] | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """Two-phase training; deterministic for a fixed seed.

    ``resume`` is (model, optimizer state, step) from a checkpoint. ``evaluate``
    is called every ``eval_every`` steps and its keys land in the log.
    """
    seed = cfg.seed if seed is None else seed
    tc = cfg.train
    plan = phase_plan(tc)
    needs_real = any(frac < 1.0 and steps for _, steps, frac in plan)
    needs_pseudo = any(frac > 0.0 and steps for _, steps, frac in plan)
    if needs_real and not dataset.split("train"):
        raise ValueError("dataset has no train videos")
    if needs_pseudo and not dataset.split("stills"):
        raise ValueError("dataset has no stills")

    if resume is not None:
        model, opt_state, start = resume
    else:
        frame_size = cfg.data.frame_size
        model = VideoOwl(cfg.model, dataset.catalog.prompt_dim, frame_size, cfgmod.derive_seed(seed, "model"))
        opt_state, start = None, 0
    optimizer = OptimizerState(model, tc, step=start)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)
    weights = LossWeights.from_config(tc)
    prompts = prompts_tensor(dataset.catalog, model.dtype)
    sampler = ClipSampler(dataset, cfg.augment, tc.clip_len, cfgmod.derive_seed(seed, f"sampler:{start}"))
    torch.manual_seed(cfgmod.derive_seed(seed, f"dropout:{start}"))

    log: list[dict] = []
    schedule = [(name, frac) for name, steps, frac in plan for _ in range(steps)]
    bar = tqdm(total=max(0, len(schedule) - start), desc="train", disable=cfgmod.quiet())
    for step in range(start, len(schedule)):
        phase, pseudo_fraction = schedule[step]
        model.train()
        frames, targets = clips_to_batch(sampler.batch(tc.batch_size, pseudo_fraction), dataset.catalog, model.dtype)

        terms: dict[str, float] = {}

        def loss_fn() -> torch.Tensor:
            total, parts = batch_loss(model.rollout(frames, prompts), targets, weights)
            terms.update(parts)
            return total

        loss, _ = compute_gradients(model, loss_fn)
        adam_step(optimizer)
        bar.update(1)

        done = step + 1
        row = None
        if done % tc.log_every == 0 or done == len(schedule):
            row = {"step": done, "phase": phase, "lr": optimizer.lr(done), "loss": float(loss), **terms}
        if evaluate is not None and tc.eval_every and done % tc.eval_every == 0:
            row = row or {"step": done, "phase": phase, "lr": optimizer.lr(done), "loss": float(loss), **terms}
            row.update(evaluate(model))
        if row is not None:
            log.append(row)
            if not cfgmod.quiet():
                tqdm.write(f"🧮 step={done} phase={phase} loss={row['loss']:.4f} lr={row['lr']:.2e}")
    bar.close()
    model.eval()

    if log_path is not None:
        _write_log(Path(log_path), log)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model, optimizer.state_dict(), optimizer.step, cfg.model_dump(mode="json")
        )
    return TrainResult(model, optimizer, log)
