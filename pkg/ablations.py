"""
Ablation studies on the synthetic benchmark.

Each study trains (or reuses) models per seed, evaluates them on the `eval`
split and returns long-format rows ``study, variant, seed, metric, value``.
The comparisons are directional: which variant scores higher, not absolute
numbers.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import config as cfgmod
import metrics
import trainloss
from baseline import baseline_video
from model import VideoOwl
from predictions import track_video
from synthdata import Dataset, build_dataset

ROW_COLUMNS = ("study", "variant", "seed", "metric", "value")
BENCHMARK_EVAL_VIDEOS = 50


def train_model(cfg: cfgmod.RunConfig, dataset: Dataset, seed: int) -> VideoOwl:
    return trainloss.train(cfg, dataset, seed=seed).model


def evaluate_model(
    model: VideoOwl, dataset: Dataset, cfg: cfgmod.EvalConfig, eval_fps: float | None = None
) -> metrics.Report:
    prompts = trainloss.prompts_tensor(dataset.catalog, model.dtype)
    videos = dataset.split("eval")
    fps = cfg.eval_fps if eval_fps is None else eval_fps
    preds = {v.video_id: track_video(model, v, prompts, fps) for v in videos}
    return metrics.evaluate_dataset(preds, videos, dataset.catalog, cfg)


def evaluate_baseline(
    model: VideoOwl,
    dataset: Dataset,
    cfg: cfgmod.RunConfig,
    eval_fps: float | None = None,
    random_seed: int | None = None,
) -> metrics.Report:
    prompts = trainloss.prompts_tensor(dataset.catalog, model.dtype)
    videos = dataset.split("eval")
    fps = cfg.eval.eval_fps if eval_fps is None else eval_fps
    preds = {
        v.video_id: baseline_video(
            model,
            v,
            prompts,
            fps,
            cfg.baseline.sim_threshold,
            cfg.baseline.top_k,
            None if random_seed is None else cfgmod.derive_seed(random_seed, f"eval:{v.video_id}"),
        )
        for v in videos
    }
    return metrics.evaluate_dataset(preds, videos, dataset.catalog, cfg.eval)


def _report_rows(study: str, variant: str, seed: int, report: metrics.Report, groups=("all", "known", "unknown")) -> list[dict]:
    rows = []
    for group in groups:
        row = report.get(group)
        for metric in ("OWTA", "DetRe", "AssAcc"):
            rows.append({"study": study, "variant": variant, "seed": seed, "metric": f"{metric}_{group}", "value": row[metric]})
    return rows


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------
def _budget_matched(cfg: cfgmod.RunConfig) -> cfgmod.RunConfig:
    """TbD links as many proposals per frame as the model has slots."""
    return cfgmod.with_overrides(cfg, {"baseline.top_k": cfg.model.num_queries})


def learning_vs_heuristic(
    cfg: cfgmod.RunConfig, seeds: Sequence[int], eval_videos: int | None = BENCHMARK_EVAL_VIDEOS
) -> list[dict]:
    """Recurrent model vs TbD linking vs random association, on crossing-object videos.

    The baseline gets the model's proposal budget; ``eval_videos`` sizes the
    scored benchmark (None keeps the config's value).
    """
    overrides: dict = {"data.motions": ["crossing"]}
    if eval_videos is not None:
        overrides["data.eval_videos"] = eval_videos
    cfg = _budget_matched(cfgmod.with_overrides(cfg, overrides))
    rows = []
    for seed in seeds:
        ds = build_dataset(cfg.data, seed)
        model = train_model(cfg, ds, seed)
        rows += _report_rows("learning_vs_heuristic", "model", seed, evaluate_model(model, ds, cfg.eval))
        rows += _report_rows("learning_vs_heuristic", "tbd", seed, evaluate_baseline(model, ds, cfg))
        rows += _report_rows("learning_vs_heuristic", "random", seed, evaluate_baseline(model, ds, cfg, random_seed=seed))
    return rows


def clip_length_study(cfg: cfgmod.RunConfig, seeds: Sequence[int], lengths: Sequence[int] = (2, 4)) -> list[dict]:
    rows = []
    for seed in seeds:
        ds = build_dataset(cfg.data, seed)
        for length in lengths:
            variant_cfg = cfgmod.with_overrides(cfg, {"train.clip_len": length})
            model = train_model(variant_cfg, ds, seed)
            rows += _report_rows("clip_length", f"clip_len={length}", seed, evaluate_model(model, ds, cfg.eval))
    return rows


def calibration_study(cfg: cfgmod.RunConfig, seeds: Sequence[int], factors: Sequence[float] = (0.0, 0.3)) -> list[dict]:
    """Same predictions scored with and without per-track calibration, short tracks included."""
    cfg = cfgmod.with_overrides(cfg, {"data.enter_exit_rate": max(cfg.data.enter_exit_rate, 0.8)})
    rows = []
    for seed in seeds:
        ds = build_dataset(cfg.data, seed)
        model = train_model(cfg, ds, seed)
        for factor in factors:
            eval_cfg = cfg.eval.model_copy(update={"calibration_factor": factor})
            report = evaluate_model(model, ds, eval_cfg)
            rows += _report_rows("calibration", f"factor={factor}", seed, report)
            for group in ("known", "unknown"):
                rows.append(
                    {
                        "study": "calibration",
                        "variant": f"factor={factor}",
                        "seed": seed,
                        "metric": f"OWTA_{group}_short",
                        "value": report.owta(group, "short"),
                    }
                )
    return rows


def supervision_study(
    cfg: cfgmod.RunConfig, seeds: Sequence[int], variants: Sequence[str] = ("mixed", "pseudo", "real")
) -> list[dict]:
    rows = []
    for seed in seeds:
        ds = build_dataset(cfg.data, seed)
        for variant in variants:
            model = train_model(cfgmod.with_overrides(cfg, {"train.supervision": variant}), ds, seed)
            rows += _report_rows("supervision", variant, seed, evaluate_model(model, ds, cfg.eval))
    return rows


def fps_study(cfg: cfgmod.RunConfig, seeds: Sequence[int], multipliers: Sequence[int] = (1, 4)) -> list[dict]:
    """Model and TbD baseline rolled out at higher frame rates, scored on the same annotated frames."""
    cfg = _budget_matched(cfg)
    rows = []
    for seed in seeds:
        ds = build_dataset(cfg.data, seed)
        model = train_model(cfg, ds, seed)
        for m in multipliers:
            fps = cfg.eval.eval_fps * m
            rows += _report_rows("fps", f"model@{m}x", seed, evaluate_model(model, ds, cfg.eval, eval_fps=fps))
            rows += _report_rows("fps", f"tbd@{m}x", seed, evaluate_baseline(model, ds, cfg, eval_fps=fps))
    return rows


STUDIES: dict[str, Callable[[cfgmod.RunConfig, Sequence[int]], list[dict]]] = {
    "learning_vs_heuristic": learning_vs_heuristic,
    "clip_length": clip_length_study,
    "calibration": calibration_study,
    "supervision": supervision_study,
    "fps": fps_study,
}


def run_study(name: str, cfg: cfgmod.RunConfig, seeds: Sequence[int]) -> list[dict]:
    if name not in STUDIES:
        raise ValueError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")
    return STUDIES[name](cfg, seeds)


def summarize(rows: Sequence[dict]) -> dict[tuple[str, str], float]:
    """Mean value per (variant, metric) over seeds."""
    acc: dict[tuple[str, str], list[float]] = defaultdict(list)
    for row in rows:
        acc[(row["variant"], row["metric"])].append(float(row["value"]))
    return {key: float(np.mean(vals)) for key, vals in acc.items()}


def write_rows(rows: Sequence[dict], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return out
