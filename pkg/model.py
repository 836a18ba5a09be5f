"""
Toy open-vocabulary video detector with recurrent query propagation.

Pipeline per frame: frozen random patch encoder -> pre-norm transformer decoder
over Q object queries -> box head (sigmoid MLP) and class head (normalized
embedding scored against prompt embeddings). On frame t > 0 the decoder starts
from the queries it produced on frame t - 1, so slot q tracks one object.

Frozen weights live in buffers, never in `parameters()`, so no optimizer can
touch them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from config import ModelConfig

CHECKPOINT_FORMAT = 1
SLOT_DUMP_COLUMNS = ("slot", "frame", "cx", "cy", "w", "h", "objectness")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class FramePredictions:
    """Head outputs; leading dims are (batch, [time,] slot)."""

    boxes: torch.Tensor  # (..., Q, 4) cxcywh in [0, 1]
    logits: torch.Tensor  # (..., Q, P)
    objectness: torch.Tensor  # (..., Q) = max over prompts
    embeddings: torch.Tensor  # (..., Q, E) unit-norm class embeddings

    def frame(self, t: int) -> "FramePredictions":
        """Slice time step t out of a rollout result shaped (B, T, Q, ...)."""
        return FramePredictions(self.boxes[:, t], self.logits[:, t], self.objectness[:, t], self.embeddings[:, t])

    def clip(self, b: int) -> "FramePredictions":
        """Batch element b of a (B, T, Q, ...) rollout, shaped (T, Q, ...)."""
        return FramePredictions(self.boxes[b], self.logits[b], self.objectness[b], self.embeddings[b])

    def detach(self) -> "FramePredictions":
        return FramePredictions(
            self.boxes.detach(), self.logits.detach(), self.objectness.detach(), self.embeddings.detach()
        )


class Attention(nn.Module):
    """Multi-head attention with a separate qkv width."""

    def __init__(self, dim: int, qkv_dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, qkv_dim)
        self.k = nn.Linear(dim, qkv_dim)
        self.v = nn.Linear(dim, qkv_dim)
        self.out = nn.Linear(qkv_dim, dim)
        self.dropout = dropout

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.view(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        p = self.dropout if self.training else 0.0
        y = F.scaled_dot_product_attention(q, k, v, dropout_p=p)
        b, h, n, c = y.shape
        return self.out(y.transpose(1, 2).reshape(b, n, h * c))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.qkv_dim, cfg.heads, cfg.dropout)
        self.norm_cross = nn.LayerNorm(d)
        self.norm_memory = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.qkv_dim, cfg.heads, cfg.dropout)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_dim), nn.GELU(), nn.Linear(cfg.mlp_dim, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, q: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm_self(q)
        q = q + self.drop(self.self_attn(h, h))
        q = q + self.drop(self.cross_attn(self.norm_cross(q), self.norm_memory(tokens)))
        q = q + self.drop(self.mlp(self.norm_mlp(q)))
        return q


def _box_mlp(dim: int, hidden_layers: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(hidden_layers):
        layers += [nn.Linear(dim, dim), nn.GELU()]
    layers.append(nn.Linear(dim, 4))
    return nn.Sequential(*layers)


class VideoOwl(nn.Module):
    def __init__(self, cfg: ModelConfig, prompt_dim: int, image_size: int, seed: int = 0):
        super().__init__()
        if image_size % cfg.patch_size:
            raise ValueError(f"image size {image_size} is not divisible by patch size {cfg.patch_size}")
        self.cfg = cfg
        self.prompt_dim = prompt_dim
        self.image_size = image_size
        self.seed = seed
        self.grid = image_size // cfg.patch_size
        patch_dim = cfg.patch_size * cfg.patch_size * 3

        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("patch_proj", torch.randn(patch_dim, cfg.dim, generator=gen) / math.sqrt(patch_dim))
        self.register_buffer("pos_embed", 0.5 * torch.randn(self.grid * self.grid, cfg.dim, generator=gen))

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.init_queries = nn.Parameter(torch.randn(cfg.num_queries, cfg.dim))
            self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
            self.out_norm = nn.LayerNorm(cfg.dim)
            self.box_head = _box_mlp(cfg.dim, cfg.box_hidden_layers)
            self.class_head = nn.Linear(cfg.dim, prompt_dim)
            self.logit_scale = nn.Parameter(torch.tensor(cfg.logit_scale_init))
            self.logit_shift = nn.Parameter(torch.tensor(cfg.logit_shift_init))
        self.to(_DTYPES[cfg.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return self.init_queries.dtype

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {name: buf.detach().clone() for name, buf in self.named_buffers()}

    # -- encoder -----------------------------------------------------------
    def encode_frame(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) or (H, W, 3) images in [0, 1] -> (B, N, D) tokens."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        if c != 3 or h != self.image_size or w != self.image_size:
            raise ValueError(f"expected {self.image_size}x{self.image_size}x3 images, got {h}x{w}x{c}")
        x = images.to(self.dtype).reshape(b, h // p, p, w // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        patches = x.reshape(b, (h // p) * (w // p), p * p * 3)
        return patches @ self.patch_proj + self.pos_embed

    # -- decoder -----------------------------------------------------------
    def initial_queries(self, batch: int) -> torch.Tensor:
        return self.init_queries.unsqueeze(0).expand(batch, -1, -1)

    def decode_step(self, tokens: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        if not (torch.isfinite(tokens).all() and torch.isfinite(queries).all()):
            raise ValueError("decoder inputs must be finite")
        q = queries
        for block in self.blocks:
            q = block(q, tokens)
        return q

    # -- heads -------------------------------------------------------------
    def class_embeddings(self, queries: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.class_head(self.out_norm(queries)), dim=-1)

    def class_logits(self, embeddings: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        return self.logit_scale * (embeddings @ prompts.to(embeddings.dtype).T) + self.logit_shift

    def predict_heads(self, queries: torch.Tensor, prompts: torch.Tensor) -> FramePredictions:
        emb = self.class_embeddings(queries)
        logits = self.class_logits(emb, prompts)
        boxes = torch.sigmoid(self.box_head(self.out_norm(queries)))
        return FramePredictions(boxes, logits, logits.max(dim=-1).values, emb)

    # -- video -------------------------------------------------------------
    def rollout(self, frames: torch.Tensor, prompts: torch.Tensor, propagate: bool = True) -> FramePredictions:
        """Run over (B, T, H, W, 3) or (T, H, W, 3) frames; outputs are (B, T, Q, ...).

        With ``propagate=False`` every frame restarts from the learned queries.
        """
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        b, t = frames.shape[:2]
        if t < 1:
            raise ValueError("rollout needs at least one frame")
        tokens = self.encode_frame(frames.reshape(b * t, *frames.shape[2:])).reshape(b, t, -1, self.cfg.dim)
        queries = self.initial_queries(b)
        outs = []
        for step in range(t):
            start = queries if propagate else self.initial_queries(b)
            queries = self.decode_step(tokens[:, step], start)
            outs.append(self.predict_heads(queries, prompts))
        return FramePredictions(
            torch.stack([o.boxes for o in outs], 1),
            torch.stack([o.logits for o in outs], 1),
            torch.stack([o.objectness for o in outs], 1),
            torch.stack([o.embeddings for o in outs], 1),
        )

    def forward(self, frames: torch.Tensor, prompts: torch.Tensor) -> FramePredictions:
        return self.rollout(frames, prompts)


def frames_tensor(frames_uint8, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 3) array -> float tensor in [0, 1]."""
    return torch.as_tensor(frames_uint8).to(dtype) / 255.0


@torch.no_grad()
def slot_center_dump(
    model: VideoOwl, videos: list, prompts: torch.Tensor, objectness_floor: float
) -> list[dict[str, Any]]:
    """Per-slot box-center traces over sliding-window videos.

    ``videos`` is a list of uint8 (T, H, W, 3) arrays; frame indices run on
    across videos. Rows with objectness above the floor (logit space) are
    returned sorted by (slot, frame).
    """
    model.eval()
    rows = []
    offset = 0
    for frames in videos:
        pred = model.rollout(frames_tensor(frames, model.dtype), prompts)
        boxes = pred.boxes[0].tolist()
        scores = pred.objectness[0].tolist()
        for t, (frame_boxes, frame_scores) in enumerate(zip(boxes, scores)):
            for slot, (box, score) in enumerate(zip(frame_boxes, frame_scores)):
                if score > objectness_floor:
                    cx, cy, w, h = box
                    rows.append(
                        {"slot": slot, "frame": offset + t, "cx": cx, "cy": cy, "w": w, "h": h, "objectness": score}
                    )
        offset += len(frames)
    rows.sort(key=lambda r: (r["slot"], r["frame"]))
    return rows


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    model: VideoOwl
    step: int
    seed: int
    optimizer_state: dict | None
    run_config: dict | None


def save_checkpoint(
    path: str | Path,
    model: VideoOwl,
    optimizer_state: dict | None = None,
    step: int = 0,
    run_config: dict | None = None,
) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "model_config": model.cfg.model_dump(mode="json"),
            "prompt_dim": model.prompt_dim,
            "image_size": model.image_size,
            "seed": model.seed,
            "step": step,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer_state,
            "run_config": run_config,
        },
        out,
    )
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
    cfg = ModelConfig.model_validate(blob["model_config"])
    model = VideoOwl(cfg, int(blob["prompt_dim"]), int(blob["image_size"]), int(blob["seed"]))
    model.load_state_dict(blob["model_state"])
    return Checkpoint(model, int(blob["step"]), int(blob["seed"]), blob["optimizer_state"], blob["run_config"])
