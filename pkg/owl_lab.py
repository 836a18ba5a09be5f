"""
owl-lab command line: gen | train | track | eval | baseline | slots | plot | ablate.

Every command loads the YAML config (``--config``, default from OWL_LAB_CONFIG
or configs/default.yaml), applies ``--set key.path=value`` overrides and the
command's own flags, prints the resolved config and writes it next to its
outputs.

Exit codes: 0 ok, 2 config/flag error, 3 data error.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path
from typing import Any

import config as cfgmod
from synthdata import DatasetParseError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _say(msg: str) -> None:
    if not cfgmod.quiet():
        print(msg)


def _fail(msg: str, code: int) -> int:
    print(f"❌ {msg}", file=sys.stderr)
    return code


def _load(args: argparse.Namespace, extra: dict[str, Any] | None = None) -> cfgmod.RunConfig:
    overrides = [cfgmod.parse_override(s) for s in args.set or []]
    overrides += [(k, v) for k, v in (extra or {}).items() if v is not None]
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    cfg = cfgmod.load_config(args.config, overrides)
    _say(f"📥 resolved config:\n{cfgmod.resolved_yaml(cfg)}")
    return cfg


def _prompts(dataset, model):
    from trainloss import prompts_tensor

    return prompts_tensor(dataset.catalog, model.dtype)


def _split(dataset, name: str):
    videos = dataset.split(name)
    if not videos:
        raise DatasetParseError(name, 0, None, f"dataset has no {name!r} videos")
    return videos


def _parse_sot(text: str) -> tuple[str, int]:
    video_id, sep, track = text.rpartition(":")
    if not sep or not video_id:
        raise ValueError(f"--sot must look like VIDEO_ID:TRACK_ID, got {text!r}")
    return video_id, int(track)


def _find_track(video, track_id: int):
    for tr in video.tracks:
        if tr.track_id == track_id:
            return tr
    raise ValueError(f"video {video.video_id} has no track {track_id}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_gen(args: argparse.Namespace) -> int:
    from synthdata import build_dataset, write_dataset

    extra = {}
    if args.videos is not None:
        extra = {"data.train_videos": args.videos, "data.eval_videos": args.videos, "data.stills": args.videos}
    cfg = _load(args, extra)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out)
    dataset = build_dataset(cfg.data, cfg.seed)
    write_dataset(out, dataset.catalog, dataset.videos)
    cfgmod.write_resolved(cfg, out)
    cat = dataset.catalog
    _say(f"📚 catalog known={len(cat.known_ids())} unknown={len(cat.unknown_ids())}")
    for split in ("train", "eval", "stills"):
        videos = dataset.split(split)
        _say(f"📚 split={split} videos={len(videos)} tracks={sum(len(v.tracks) for v in videos)}")
    print(f"✅ GEN_STATUS=ok path={out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    import metrics
    from model import load_checkpoint
    from predictions import track_video
    from synthdata import read_dataset
    from trainloss import train

    extra: dict[str, Any] = {
        "train.clip_len": args.clip_len,
        "train.phase1_steps": args.phase1_steps,
        "train.phase2_steps": args.phase2_steps,
    }
    if args.no_pseudo:
        extra["train.supervision"] = "real"
    if args.pseudo_only:
        extra["train.supervision"] = "pseudo"
    if args.no_mosaic:
        extra["augment.mosaic_prob"] = 0.0
    if args.steps is not None:
        extra["train.phase1_steps"] = args.steps // 2
        extra["train.phase2_steps"] = args.steps - args.steps // 2
    cfg = _load(args, extra)
    cfgmod.configure_torch()
    dataset = read_dataset(args.data)
    _say(f"📚 loaded {len(dataset.videos)} videos from {args.data}")

    resume = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        resume = (ck.model, ck.optimizer_state, ck.step)
        _say(f"📥 resuming from {args.resume} at step {ck.step}")

    eval_videos = dataset.split("eval")[: cfg.train.eval_videos]

    def evaluate(model) -> dict[str, float]:
        prompts = _prompts(dataset, model)
        preds = {v.video_id: track_video(model, v, prompts, cfg.eval.eval_fps) for v in eval_videos}
        report = metrics.evaluate_dataset(preds, eval_videos, dataset.catalog, cfg.eval)
        return {"owta_known": report.owta("known"), "owta_unknown": report.owta("unknown")}

    out = Path(args.out)
    cfgmod.write_resolved(cfg, out)
    result = train(
        cfg,
        dataset,
        resume=resume,
        evaluate=evaluate if eval_videos else None,
        log_path=out / "train_log.csv",
        checkpoint_path=out / "checkpoint.pt",
    )
    print(f"✅ TRAIN_STATUS=ok step={result.optimizer.step} checkpoint={out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    import metrics
    from model import load_checkpoint
    from predictions import oracle_predictions, track_video, write_predictions
    from synthdata import read_dataset

    cfg = _load(args, {"eval.eval_fps": args.fps})
    cfgmod.configure_torch()
    dataset = read_dataset(args.data)
    videos = _split(dataset, args.split)
    sot = _parse_sot(args.sot) if args.sot else None
    if sot is not None:
        videos = [v for v in videos if v.video_id == sot[0]]
        if not videos:
            raise ValueError(f"no {args.split} video named {sot[0]}")

    if args.oracle:
        preds = [oracle_predictions(v) for v in videos]
    else:
        if not args.checkpoint:
            raise ValueError("--checkpoint is required unless --oracle is given")
        model = load_checkpoint(args.checkpoint).model
        prompts = _prompts(dataset, model)
        preds = [track_video(model, v, prompts, cfg.eval.eval_fps) for v in videos]
    if sot is not None:
        preds = [metrics.sot_predictions(preds[0], _find_track(videos[0], sot[1]))]
    out = write_predictions(args.out, preds)
    cfgmod.write_resolved(cfg, out)
    print(f"✅ TRACK_STATUS=ok videos={len(preds)} path={out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    import metrics
    from predictions import read_predictions
    from synthdata import read_dataset

    extra: dict[str, Any] = {"eval.calibration_factor": args.calibration_factor}
    if args.no_constraint:
        extra["eval.enforce_constraint"] = False
    if args.thresholds:
        extra["eval.thresholds"] = [float(t) for t in args.thresholds.split(",")]
    cfg = _load(args, extra)
    dataset = read_dataset(args.data)
    preds = read_predictions(args.predictions)
    out = Path(args.out)
    cfgmod.write_resolved(cfg, out)

    if args.sot:
        video_id, track_id = _parse_sot(args.sot)
        video = dataset.by_id().get(video_id)
        if video is None or video_id not in preds:
            raise ValueError(f"--sot video {video_id} is missing from the dataset or the predictions")
        score = metrics.sot_score(preds[video_id], _find_track(video, track_id))
        _, csv_path = metrics.write_sot_report(out, video_id, track_id, len(preds[video_id].frame_indices), score)
        print(f"SOT_3D_IOU={score:.4f}")
        print(f"✅ EVAL_STATUS=ok report={csv_path}")
        return EXIT_OK

    videos = _split(dataset, args.split)
    report = metrics.evaluate_dataset(preds, videos, dataset.catalog, cfg.eval)
    metrics.write_report(report, out)
    for group in metrics.GROUPS:
        print(f"EVAL_OWTA_{group.upper()}={report.owta(group):.4f}")
    print(f"✅ EVAL_STATUS=ok report={out / 'report.csv'}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    from baseline import baseline_video
    from model import load_checkpoint
    from predictions import write_predictions
    from synthdata import read_dataset

    cfg = _load(
        args,
        {"eval.eval_fps": args.fps, "baseline.sim_threshold": args.sim_threshold, "baseline.top_k": args.top_k},
    )
    cfgmod.configure_torch()
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    prompts = _prompts(dataset, model)
    preds = []
    for v in _split(dataset, args.split):
        seed = cfgmod.derive_seed(cfg.seed, f"eval:{v.video_id}") if args.random else None
        preds.append(
            baseline_video(model, v, prompts, cfg.eval.eval_fps, cfg.baseline.sim_threshold, cfg.baseline.top_k, seed)
        )
    out = write_predictions(args.out, preds)
    cfgmod.write_resolved(cfg, out)
    mode = "random" if args.random else "tbd"
    print(f"✅ BASELINE_STATUS=ok mode={mode} videos={len(preds)} path={out}")
    return EXIT_OK


def cmd_slots(args: argparse.Namespace) -> int:
    import csv

    from scipy.special import logit

    from augment import sliding_window_video
    from model import SLOT_DUMP_COLUMNS, load_checkpoint, slot_center_dump
    from synthdata import read_dataset

    cfg = _load(args, {"eval.slot_floor": args.floor})
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    stills = _split(dataset, "stills")[: args.stills]
    videos = [
        sliding_window_video(s.frames[0], s.tracks, args.frames, cfg.augment.pseudo_crop_frac).frames for s in stills
    ]
    rows = slot_center_dump(model, videos, _prompts(dataset, model), float(logit(cfg.eval.slot_floor)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SLOT_DUMP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"✅ SLOTS_STATUS=ok rows={len(rows)} path={out}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    import plots

    kinds = {"report": plots.plot_report, "slots": plots.plot_slots, "log": plots.plot_training_log}
    path = kinds[args.kind](args.csv, args.out)
    print(f"✅ PLOT_STATUS=ok path={path}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    import ablations

    cfg = _load(args)
    cfgmod.configure_torch()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = ablations.run_study(args.study, cfg, seeds)
    path = ablations.write_rows(rows, args.out)
    for (variant, metric), value in sorted(ablations.summarize(rows).items()):
        _say(f"🧮 {variant} {metric}={value:.4f}")
    print(f"✅ ABLATE_STATUS=ok study={args.study} rows={len(rows)} path={path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owl_lab", description="Open-world video tracking lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config (default: OWL_LAB_CONFIG or configs/default.yaml)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key, e.g. train.clip_len=2")
    common.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="Generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=None, help="Videos per split (train, eval, stills)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="Train the model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="Total steps, split evenly across the two phases")
    t.add_argument("--phase1-steps", type=int, default=None)
    t.add_argument("--phase2-steps", type=int, default=None)
    t.add_argument("--clip-len", type=int, default=None)
    t.add_argument("--no-pseudo", action="store_true", help="Real videos only")
    t.add_argument("--pseudo-only", action="store_true", help="Pseudo-videos only")
    t.add_argument("--no-mosaic", action="store_true")
    t.add_argument("--resume", default=None, help="Checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", parents=[common], help="Write model (or oracle) predictions")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--checkpoint", default=None)
    k.add_argument("--fps", type=float, default=None)
    k.add_argument("--split", default="eval")
    k.add_argument("--sot", default=None, metavar="VIDEO_ID:TRACK_ID")
    k.add_argument("--oracle", action="store_true", help="Copy ground truth instead of running a model")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", parents=[common], help="Score predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--no-constraint", action="store_true")
    e.add_argument("--calibration-factor", type=float, default=None)
    e.add_argument("--thresholds", default=None, help="Comma-separated localization thresholds")
    e.add_argument("--sot", default=None, metavar="VIDEO_ID:TRACK_ID")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", parents=[common], help="Tracking-by-detection predictions")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--fps", type=float, default=None)
    b.add_argument("--split", default="eval")
    b.add_argument("--sim-threshold", type=float, default=None)
    b.add_argument("--top-k", type=int, default=None)
    b.add_argument("--random", action="store_true", help="Random-association control")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("slots", parents=[common], help="Slot box-center dump over sliding-window videos")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--floor", type=float, default=None, help="Objectness floor as a probability")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--stills", type=int, default=4)
    s.set_defaults(func=cmd_slots)

    pl = sub.add_parser("plot", help="PNG chart from a CSV")
    pl.add_argument("kind", choices=("report", "slots", "log"))
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    a = sub.add_parser("ablate", parents=[common], help="Run an ablation study")
    a.add_argument("--study", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        return _fail(f"config error: {exc}", EXIT_CONFIG)
    except (DatasetParseError, FileExistsError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_DATA)
    except ValueError as exc:
        from predictions import PredictionMismatchError

        if isinstance(exc, PredictionMismatchError):
            return _fail(str(exc), EXIT_DATA)
        return _fail(str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    raise SystemExit(main())
