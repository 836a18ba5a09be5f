import math
from pathlib import Path

import numpy as np
import pytest
import torch

import model as mdl
from config import ModelConfig


def _model(**kw) -> mdl.VideoOwl:
    cfg = ModelConfig(dtype="float64", num_queries=6, dim=16, qkv_dim=16, mlp_dim=32, heads=2, **kw)
    return mdl.VideoOwl(cfg, prompt_dim=8, image_size=32, seed=3).eval()


def _prompts(n: int = 3, dim: int = 8, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(n, dim, generator=g, dtype=torch.float64), dim=-1)


def _frames(t: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(t, 32, 32, 3, generator=g, dtype=torch.float64)


def _zero_decoder(m: mdl.VideoOwl) -> None:
    with torch.no_grad():
        for p in m.blocks.parameters():
            p.zero_()


# --- encoder ---


def test_zero_image_gives_positional_embeddings():
    m = _model()
    tokens = m.encode_frame(torch.zeros(32, 32, 3, dtype=torch.float64))
    assert tokens.shape == (1, 16, 16)
    assert torch.equal(tokens[0], m.pos_embed)


def test_single_patch_change_is_local():
    m = _model()
    a = _frames(1)[0]
    b = a.clone()
    b[8:16, 16:24] += 0.25  # patch row 1, col 2
    diff = (m.encode_frame(a) - m.encode_frame(b)).abs().sum(-1)[0]
    changed = torch.nonzero(diff).flatten().tolist()
    assert changed == [1 * 4 + 2]


def test_encoder_rejects_wrong_size():
    with pytest.raises(ValueError):
        _model().encode_frame(torch.zeros(30, 32, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        mdl.VideoOwl(ModelConfig(), prompt_dim=8, image_size=30)


def test_frozen_weights_are_buffers_not_parameters():
    m = _model()
    names = {n for n, _ in m.named_parameters()}
    assert "patch_proj" not in names and "pos_embed" not in names
    assert set(m.frozen_state()) == {"patch_proj", "pos_embed"}


# --- decoder ---


def test_decode_step_shape_and_finite_check():
    m = _model()
    tokens = m.encode_frame(_frames(1)[0])
    out = m.decode_step(tokens, m.initial_queries(1))
    assert out.shape == (1, 6, 16)
    bad = tokens.clone()
    bad[0, 0, 0] = math.nan
    with pytest.raises(ValueError):
        m.decode_step(bad, m.initial_queries(1))


def test_zeroed_residual_branches_are_identity():
    m = _model()
    _zero_decoder(m)
    q = m.initial_queries(1)
    out = m.decode_step(m.encode_frame(_frames(1)[0]), q)
    assert torch.equal(out, q)


def test_decoder_is_permutation_equivariant():
    m = _model()
    tokens = m.encode_frame(_frames(1)[0])
    q = torch.randn(1, 6, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    a = m.decode_step(tokens, q[:, perm])
    b = m.decode_step(tokens, q)[:, perm]
    assert torch.allclose(a, b, atol=1e-10)


# --- heads ---


def test_zero_scale_gives_shift_everywhere():
    m = _model()
    with torch.no_grad():
        m.logit_scale.zero_()
    pred = m.predict_heads(m.initial_queries(1), _prompts())
    assert torch.allclose(pred.logits, m.logit_shift.expand_as(pred.logits))
    assert torch.allclose(pred.objectness, m.logit_shift.expand_as(pred.objectness))


def test_inner_product_logits():
    m = _model()
    with torch.no_grad():
        m.logit_scale.fill_(1.0)
        m.logit_shift.fill_(0.0)
    prompts = torch.eye(2, 8, dtype=torch.float64)
    logits = m.class_logits(prompts[:1], prompts)
    assert logits.tolist() == [[1.0, 0.0]]


def test_objectness_is_max_logit_and_boxes_in_unit_range():
    m = _model()
    pred = m.predict_heads(m.initial_queries(2), _prompts())
    assert torch.equal(pred.objectness, pred.logits.max(-1).values)
    assert pred.boxes.shape == (2, 6, 4)
    assert ((pred.boxes >= 0) & (pred.boxes <= 1)).all()
    assert torch.allclose(pred.embeddings.norm(dim=-1), torch.ones(2, 6, dtype=torch.float64))


# --- rollout ---


def test_single_frame_rollout_matches_forward_pass():
    m = _model()
    frames, prompts = _frames(1), _prompts()
    out = m.rollout(frames, prompts)
    q = m.decode_step(m.encode_frame(frames[0]), m.initial_queries(1))
    direct = m.predict_heads(q, prompts)
    assert torch.equal(out.frame(0).logits, direct.logits)
    assert torch.equal(out.frame(0).boxes, direct.boxes)


def test_rollout_shapes_and_prefix_property():
    m = _model()
    frames, prompts = _frames(5), _prompts()
    full = m.rollout(frames, prompts)
    assert full.boxes.shape == (1, 5, 6, 4)
    assert full.logits.shape == (1, 5, 6, 3)
    prefix = m.rollout(frames[:3], prompts)
    assert torch.equal(full.logits[:, :3], prefix.logits)
    assert torch.equal(full.boxes[:, :3], prefix.boxes)


def test_rollout_without_propagation_is_per_frame():
    m = _model()
    frames, prompts = _frames(3), _prompts()
    out = m.rollout(frames, prompts, propagate=False)
    for t in range(3):
        single = m.rollout(frames[t : t + 1], prompts)
        assert torch.equal(out.logits[:, t], single.logits[:, 0])


def test_fixed_point_queries_repeat_predictions():
    m = _model()
    _zero_decoder(m)
    frame = _frames(1)
    out = m.rollout(frame.expand(4, -1, -1, -1), _prompts())
    for t in range(1, 4):
        assert torch.allclose(out.logits[:, t], out.logits[:, 0], atol=1e-6)
        assert torch.allclose(out.boxes[:, t], out.boxes[:, 0], atol=1e-6)


def test_eval_mode_is_deterministic():
    m = _model()
    frames, prompts = _frames(3), _prompts()
    assert torch.equal(m.rollout(frames, prompts).logits, m.rollout(frames, prompts).logits)
    again = _model()
    assert torch.equal(again.rollout(frames, prompts).logits, m.rollout(frames, prompts).logits)


# --- slot dump ---


def test_slot_center_dump_floors_and_order():
    m = _model()
    videos = [np.random.default_rng(0).integers(0, 255, size=(3, 32, 32, 3), dtype=np.uint8)]
    prompts = _prompts()
    assert mdl.slot_center_dump(m, videos, prompts, math.inf) == []
    rows = mdl.slot_center_dump(m, videos, prompts, -math.inf)
    assert len(rows) == 6 * 3
    assert list(rows[0]) == ["slot", "frame", "cx", "cy", "w", "h", "objectness"]
    assert [(r["slot"], r["frame"]) for r in rows] == sorted((r["slot"], r["frame"]) for r in rows)


# --- checkpoints ---


def test_checkpoint_round_trip(tmp_path: Path):
    m = _model()
    with torch.no_grad():
        m.logit_shift.fill_(-1.25)
    path = mdl.save_checkpoint(tmp_path / "ck.pt", m, step=7, run_config={"seed": 3})
    ck = mdl.load_checkpoint(path)
    assert ck.step == 7
    assert ck.run_config == {"seed": 3}
    for (name, a), (_, b) in zip(m.state_dict().items(), ck.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert ck.model.cfg == m.cfg
