"""Command-line entry point orchestrating every stage from JSON configs.

Each invocation creates a timestamped run directory under the output root
(flag ``--out`` or environment variable ``VIEWPOSE_OUT``), echoes the fully
resolved configuration into it, and writes logs as JSON lines.  Failures
leave a machine-readable ``error.json`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import os
import sys
import traceback
from dataclasses import replace
from typing import Dict, List, Optional

from . import downstream as ds
from .config import ConfigError, ExperimentConfig
from .objectives import LossConfig
from .posetok import (
    load_tokenizer,
    poses_from_dataset,
    save_tokenizer,
    train_tokenizer,
)
from .scenegen import SceneDataset, build_dataset, load_dataset
from .tensorio import TensorIOError, dump_json, read_json
from .trainer import PretrainModel, pretrain

OBJECTIVES = ("full", "with_geo", "with_mask", "contrastive_only")


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------

def _load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.default()
    return ExperimentConfig.from_dict(read_json(path))


def _make_run_dir(out_root: str, command: str, name: Optional[str]) -> str:
    os.makedirs(out_root, exist_ok=True)
    base = name or f"{command}-{_dt.datetime.now():%Y%m%d-%H%M%S}"
    path = os.path.join(out_root, base)
    counter = 1
    while os.path.exists(path):
        path = os.path.join(out_root, f"{base}-{counter}")
        counter += 1
    os.makedirs(path)
    return path


def _loss_config(config: ExperimentConfig, objective: str) -> LossConfig:
    """Objective variants toggle loss weights (and masking, via train config)."""
    loss = config.loss
    if objective == "full":
        return loss
    if objective == "with_geo":  # contrastive + geometric, no masked modeling
        return replace(loss, lambda_mask=0.0)
    if objective == "with_mask":  # contrastive + masked modeling, no geometry
        return replace(loss, lambda_geo=0.0)
    if objective == "contrastive_only":
        return replace(loss, lambda_geo=0.0, lambda_mask=0.0)
    raise ConfigError(f"unknown objective {objective!r}")


def _mask_ratio(config: ExperimentConfig, objective: str) -> float:
    if objective in ("with_geo", "contrastive_only"):
        return 0.0
    return config.pretrain.mask_ratio


def _setup(config: ExperimentConfig, dataset: SceneDataset,
           tokenizer_path: Optional[str]) -> ds.ProtocolSetup:
    tokenizer = None
    if tokenizer_path is not None:
        tokenizer = load_tokenizer(tokenizer_path)
    return ds.ProtocolSetup(
        dataset=dataset,
        video_config=config.video_encoder_config(),
        pose_config=config.pose_encoder_config(),
        finetune_config=config.finetune,
        tokenizer=tokenizer,
        seeds=config.protocol.seeds,
        head_hidden=config.model.head_hidden,
    )


def _parse_checkpoint_flags(entries: List[str]) -> Dict[str, Optional[str]]:
    """--checkpoint NAME=PATH flags; the name 'scratch' maps to no init."""
    out: Dict[str, Optional[str]] = {}
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(
                f"--checkpoint takes NAME=PATH, got {entry!r}")
        name, path = entry.split("=", 1)
        out[name] = None if name == "scratch" else path
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, "gen", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset_dir = os.path.join(run_dir, "dataset")
    dataset = build_dataset(config.scene, config.num_procedures, dataset_dir)
    summary = {"run_dir": run_dir, "dataset": dataset_dir,
               "splits": {name: dataset.num_clips(name)
                          for name in dataset.splits}}
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def cmd_tokenizer(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, "tokenizer", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset = load_dataset(args.dataset)
    poses, valid = poses_from_dataset(dataset, "train",
                                      seed=config.tokenizer.seed)
    tokenizer = train_tokenizer(poses, config.tokenizer, valid)
    tokenizer_dir = os.path.join(run_dir, "tokenizer")
    save_tokenizer(tokenizer_dir, tokenizer)
    summary = {"run_dir": run_dir, "tokenizer": tokenizer_dir,
               "fingerprint": tokenizer.weight_fingerprint(),
               "num_training_poses": int(poses.shape[0])}
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def cmd_pretrain(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, f"pretrain-{args.objective}", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset = load_dataset(args.dataset)
    tokenizer = load_tokenizer(args.tokenizer)
    import torch
    torch.manual_seed(config.pretrain.seed)
    model = PretrainModel(config.video_encoder_config(),
                          config.pose_encoder_config(),
                          config.model.decoder_layers)
    train_config = replace(config.pretrain,
                           mask_ratio=_mask_ratio(config, args.objective))
    checkpoint, rows = pretrain(
        dataset, tokenizer, model, train_config,
        _loss_config(config, args.objective),
        run_dir=run_dir, resume_from=args.resume)
    summary = {"run_dir": run_dir, "checkpoint": checkpoint,
               "objective": args.objective, "steps": len(rows),
               "final_total": rows[-1]["total"] if rows else None}
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def cmd_finetune(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, f"finetune-{args.protocol}", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset = load_dataset(args.dataset)
    setup = _setup(config, dataset, args.tokenizer)
    checkpoints = _parse_checkpoint_flags(args.checkpoint)
    protocol = config.protocol

    if args.protocol == "fraction":
        result = ds.run_data_efficiency(setup, checkpoints or {"scratch": None},
                                        fractions=protocol.fractions)
    elif args.protocol == "cross_view":
        result = ds.run_cross_view(setup, checkpoints or {"scratch": None},
                                   train_views=protocol.train_views,
                                   test_view=protocol.test_view,
                                   fraction=protocol.fraction)
    elif args.protocol == "single_view":
        result = ds.run_single_view(setup, checkpoints or {"scratch": None},
                                    view=protocol.view,
                                    fraction=protocol.fraction)
    elif args.protocol == "unimodal":
        paths = [p for p in checkpoints.values() if p is not None]
        result = ds.run_unimodal(setup, args.modality,
                                 paths[0] if paths else None,
                                 fraction=protocol.fraction)
    elif args.protocol == "full":
        result = _full_finetune(setup, checkpoints or {"scratch": None},
                                protocol.fraction, run_dir)
    else:
        raise ConfigError(f"unknown finetune protocol {args.protocol!r}")

    ds.save_results(run_dir, args.protocol, result)
    summary = {"run_dir": run_dir, "protocol": args.protocol,
               "test_split_hash": result["test_split_hash"]}
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def _full_finetune(setup: ds.ProtocolSetup,
                   checkpoints: Dict[str, Optional[str]], fraction: float,
                   run_dir: str) -> dict:
    """Whole-training-split finetuning; saves one bundle per method/seed."""
    before = ds.split_hash(setup.test_addresses())
    rows = []
    summary = {}
    for method, ckpt in checkpoints.items():
        reports = []
        for seed in setup.seeds:
            labeled = ds.stratified_fraction(setup.dataset, "train", fraction,
                                             seed)
            bundle = setup.build(init=ckpt, seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed)
            reports.append(report)
            rows.append(dict(report.to_dict(), method=method, seed=seed))
            ds.save_bundle(
                os.path.join(run_dir, f"bundle-{method}-seed{seed}"), bundle)
        summary[method] = ds.summarize(reports)
    return {"protocol": "full", "rows": rows, "summary": summary,
            "test_split_hash": before}


def cmd_eval(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, "eval", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset = load_dataset(args.dataset)
    cache = None
    if args.tokenizer is not None:
        setup = _setup(config, dataset, args.tokenizer)
        cache = setup.cache()
    bundle = ds.load_bundle(args.bundle, pose_cache=cache)
    addresses = ds.split_addresses(dataset, args.split)
    report = ds.evaluate_bundle(bundle, dataset, addresses,
                                dataset.config.num_classes)
    summary = {"run_dir": run_dir, "bundle": args.bundle,
               "split": args.split, "report": report.to_dict()}
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def cmd_ablate(args) -> dict:
    config = _load_config(args.config)
    run_dir = _make_run_dir(args.out, f"ablate-{args.suite}", args.name)
    dump_json(os.path.join(run_dir, "config.json"), config.to_dict())
    dataset = load_dataset(args.dataset)
    setup = _setup(config, dataset, args.tokenizer)
    checkpoints = _parse_checkpoint_flags(args.checkpoint)
    protocol = config.protocol
    if args.jobs != 1:
        print(f"note: runs execute sequentially; --jobs {args.jobs} capped "
              f"at 1 on this build", file=sys.stderr)

    if args.suite == "loss":
        result = ds.run_loss_ablation(
            setup, {k: v for k, v in checkpoints.items() if v is not None},
            fraction=protocol.fraction)
    elif args.suite == "tokenizer":
        result = ds.run_tokenizer_ablation(setup, fraction=protocol.fraction)
    elif args.suite == "view_count":
        paths = [p for p in checkpoints.values() if p is not None]
        result = ds.run_view_count_ablation(
            setup, paths[0] if paths else None, fraction=protocol.fraction)
    else:
        raise ConfigError(f"unknown ablation suite {args.suite!r}")

    ds.save_results(run_dir, args.suite, result)
    summary = {"run_dir": run_dir, "suite": args.suite,
               "rows": len(result["rows"])}
    if args.suite == "loss":
        summary["table"] = result["table"]
    dump_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def cmd_report(args) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = args.run
    figures = []

    def _save(fig, name):
        path = os.path.join(run_dir, name)
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        figures.append(path)

    for name in sorted(os.listdir(run_dir)):
        if not name.endswith(".json"):
            continue
        try:
            payload = read_json(os.path.join(run_dir, name))
        except TensorIOError:
            continue
        protocol = payload.get("protocol") if isinstance(payload, dict) \
            else None
        if protocol == "data_efficiency":
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for method in payload["methods"]:
                xs, ys = [], []
                for fraction in payload["fractions"]:
                    key = f"{fraction:g}/{method}"
                    xs.append(100 * fraction)
                    ys.append(100 * payload["summary"][key]["accuracy"]["mean"])
                ax.plot(xs, ys, marker="o", label=method)
            ax.set_xlabel("labeled data (%)")
            ax.set_ylabel("accuracy (%)")
            ax.legend()
            _save(fig, "learning_curve.png")
        elif protocol == "view_count":
            fig, ax = plt.subplots(figsize=(5, 3.5))
            counts = sorted(payload["box_stats"], key=int)
            stats = [{
                "med": payload["box_stats"][n]["median"],
                "q1": payload["box_stats"][n]["q1"],
                "q3": payload["box_stats"][n]["q3"],
                "whislo": payload["box_stats"][n]["min"],
                "whishi": payload["box_stats"][n]["max"],
            } for n in counts]
            ax.bxp(stats, positions=[int(n) for n in counts],
                   showfliers=False)
            ax.set_xlabel("available views")
            ax.set_ylabel("accuracy")
            _save(fig, "view_count.png")
        elif protocol == "loss_ablation":
            fig, ax = plt.subplots(figsize=(5, 3.5))
            methods = [row["method"] for row in payload["table"]]
            drops = [row["drop_points"] for row in payload["table"]]
            ax.bar(methods, drops)
            ax.set_ylabel("accuracy drop vs full (points)")
            ax.tick_params(axis="x", rotation=30)
            _save(fig, "loss_ablation.png")
        elif protocol == "tokenizer_ablation":
            fig, ax = plt.subplots(figsize=(5, 3.5))
            keys = list(payload["summary"])
            means = [100 * payload["summary"][k]["accuracy"]["mean"]
                     for k in keys]
            ax.bar(keys, means)
            ax.set_ylabel("accuracy (%)")
            ax.tick_params(axis="x", rotation=30)
            _save(fig, "tokenizer_ablation.png")
    summary = {"run_dir": run_dir, "figures": figures}
    dump_json(os.path.join(run_dir, "report.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewpose",
        description="Multi-view video-pose pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None,
                           help="experiment config JSON (defaults applied "
                                "when omitted)")
        p.add_argument("--out", default=os.environ.get("VIEWPOSE_OUT", "runs"),
                       help="output root (env VIEWPOSE_OUT)")
        p.add_argument("--name", default=None,
                       help="run directory name (default: timestamped)")

    p = sub.add_parser("gen", help="build a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("tokenizer", help="train and freeze the pose tokenizer")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_tokenizer)

    p = sub.add_parser("pretrain", help="run alignment pretraining")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--objective", choices=OBJECTIVES, default="full")
    p.add_argument("--resume", default=None,
                   help="epoch checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="run a finetuning protocol")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--protocol",
                   choices=("full", "fraction", "unimodal", "cross_view",
                            "single_view"), default="full")
    p.add_argument("--modality", choices=("video", "pose"), default="pose",
                   help="branch for the unimodal protocol")
    p.add_argument("--checkpoint", action="append", default=[],
                   metavar="NAME=PATH",
                   help="pretrained checkpoint per method; NAME 'scratch' "
                        "means random init")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a saved classifier bundle")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--suite", choices=("loss", "tokenizer", "view_count"),
                   required=True)
    p.add_argument("--checkpoint", action="append", default=[],
                   metavar="NAME=PATH")
    p.add_argument("--jobs", type=int,
                   default=int(os.environ.get("VIEWPOSE_JOBS", "1")),
                   help="parallel fan-out cap (env VIEWPOSE_JOBS); runs are "
                        "independent but execute sequentially here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render result JSONs into figures")
    p.add_argument("--run", required=True, help="run directory with results")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as e:  # noqa: BLE001 - single CLI error funnel
        record = {
            "error": type(e).__name__,
            "message": str(e),
            "command": args.command,
            "traceback": traceback.format_exc().splitlines()[-3:],
        }
        target = getattr(args, "out", None) or "."
        os.makedirs(target, exist_ok=True)
        dump_json(os.path.join(target, "error.json"), record)
        print(f"error: {e}", file=sys.stderr)
        return 1
    for key, value in summary.items():
        if not isinstance(value, (dict, list)):
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
