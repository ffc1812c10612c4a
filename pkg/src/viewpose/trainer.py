"""Pretraining and finetuning loops: schedules, checkpoints, seeding, logs.

Pretraining optimizes the combined alignment objective with momentum SGD
under a warmup + cosine schedule, drawing temporally stratified batches.
Finetuning trains a classification bundle with AdamW.  Both loops are
deterministic given the config seed in single-threaded mode: batch order is
derived from (seed, epoch), token masking from (seed, global step), and
checkpoints capture parameters plus full optimizer state so an interrupted
run resumes bit-identically.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoders import (EmbeddingSet, MaskedPoseDecoder, PoseEncoderConfig,
                       PoseSequenceEncoder, VideoEncoder, VideoEncoderConfig,
                       apply_mask)
from .objectives import (ClipAddress, LossConfig, SegmentSampler, loss_report)
from .posetok import PoseTokenizer, encode_batch
from .scenegen import SceneDataset
from .tensorio import TensorIOError, dump_json, load_tensor_dir, \
    save_tensor_dir

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    """Hyper-parameters of one training phase."""

    phase: str = "pretrain"          # "pretrain" | "finetune"
    optimizer: str = "sgd"           # "sgd" | "adamw"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    mask_ratio: float = 0.4
    seed: int = 0
    frozen_video_layers: int = -1    # -1: ceil(depth/2) when pretrained init
    checkpoint_every: int = 0        # epochs between mid-run checkpoints
    deterministic: bool = True

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="finetune", optimizer="adamw", epochs=30,
                    batch_size=16, learning_rate=1e-4, weight_decay=1e-5)
        base.update(overrides)
        return cls(**base)


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_frac: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at the last step."""
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def build_optimizer(params: Iterable[torch.Tensor],
                    config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters")
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate,
                               momentum=config.momentum,
                               weight_decay=config.weight_decay)
    return torch.optim.AdamW(params, lr=config.learning_rate,
                             weight_decay=config.weight_decay)


def module_fingerprint(module: nn.Module) -> str:
    """Hash of all parameters and buffers; constant iff nothing changed."""
    import hashlib
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class PretrainModel(nn.Module):
    """Both encoder branches plus the masked-coordinate decoder."""

    def __init__(self, video_config: VideoEncoderConfig,
                 pose_config: PoseEncoderConfig, decoder_layers: int = 1):
        super().__init__()
        self.video_config = video_config
        self.pose_config = pose_config
        self.decoder_layers = decoder_layers
        self.video = VideoEncoder(video_config)
        self.pose = PoseSequenceEncoder(pose_config)
        self.decoder = MaskedPoseDecoder(pose_config.embed_dim,
                                         pose_config.num_heads,
                                         pose_config.num_joints,
                                         num_layers=decoder_layers)

    def config_dict(self) -> dict:
        return {
            "video": asdict(self.video_config),
            "pose": asdict(self.pose_config),
            "decoder_layers": self.decoder_layers,
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "PretrainModel":
        video_cfg = VideoEncoderConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in d["video"].items()})
        pose_cfg = PoseEncoderConfig(**d["pose"])
        return cls(video_cfg, pose_cfg, d.get("decoder_layers", 1))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def collate(dataset: SceneDataset,
            addresses: Sequence[ClipAddress]) -> Dict[str, torch.Tensor]:
    """Stack the addressed clips into a batch of tensors.

    The source addresses ride along under "addresses" so consumers holding a
    precomputed token cache can look the batch up without re-tokenizing.
    """
    clips = [dataset.get_clip(a.procedure_id, a.clip_index)
             for a in addresses]
    return {
        "frames": torch.from_numpy(np.stack([c.frames for c in clips])),
        "poses": torch.from_numpy(np.stack([c.poses2d for c in clips])),
        "validity": torch.from_numpy(np.stack([c.validity for c in clips])),
        "tracks": torch.from_numpy(
            np.stack([c.track_ids for c in clips]).astype(np.int64)),
        "labels": torch.tensor([c.label for c in clips], dtype=torch.long),
        "addresses": list(addresses),
    }


class PoseTokenCache:
    """Precomputed frozen-tokenizer embeddings for a set of procedures.

    The tokenizer never changes during pretraining/finetuning, so every
    person-frame is encoded once up front instead of once per epoch.
    """

    def __init__(self, tokenizer: PoseTokenizer, dataset: SceneDataset,
                 procedure_ids: Sequence[int]):
        if not tokenizer.frozen:
            raise ValueError("token cache requires a frozen tokenizer")
        self.embed_dim = tokenizer.config.output_dim
        self._pi: Dict[int, torch.Tensor] = {}
        for pid in procedure_ids:
            n = dataset.procedures[pid].num_clips
            clips = [dataset.get_clip(pid, i) for i in range(n)]
            poses = np.stack([c.poses2d for c in clips])      # (n,C,T,P,2,Nj)
            valid = np.stack([c.validity for c in clips])
            lead = poses.shape[:4]
            flat_p = poses.reshape(-1, *poses.shape[4:])
            flat_v = valid.reshape(-1, valid.shape[-1])
            pi, _, _ = encode_batch(tokenizer, flat_p, flat_v)
            self._pi[pid] = pi.reshape(*lead, self.embed_dim).contiguous()

    def gather(self, addresses: Sequence[ClipAddress]) -> torch.Tensor:
        return torch.stack([self._pi[a.procedure_id][a.clip_index]
                            for a in addresses])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, modules: Dict[str, nn.Module],
                    optimizer: Optional[torch.optim.Optimizer],
                    meta: dict) -> None:
    """Persist modules + optimizer state as raw tensors and stable JSON."""
    arrays: Dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    opt_meta: dict = {}
    if optimizer is not None:
        state = optimizer.state_dict()
        scalars: Dict[str, dict] = {}
        for idx, entry in state["state"].items():
            per = {}
            for key, value in entry.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"optim.state.{idx}.{key}"] = \
                        value.detach().cpu().numpy()
                else:
                    per[key] = value
            scalars[str(idx)] = per
        opt_meta = {"param_groups": state["param_groups"], "scalars": scalars}
    meta = dict(meta)
    meta["schema_version"] = CHECKPOINT_SCHEMA_VERSION
    meta["modules"] = sorted(modules.keys())
    meta["optimizer"] = opt_meta
    save_tensor_dir(path, arrays, meta)


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], dict]:
    arrays, meta = load_tensor_dir(path)
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise TensorIOError(
            f"{path}: checkpoint schema {meta.get('schema_version')!r}, "
            f"expected {CHECKPOINT_SCHEMA_VERSION}"
        )
    tensors = {name: torch.as_tensor(arr) for name, arr in arrays.items()}
    return tensors, meta


def module_state_from(tensors: Dict[str, torch.Tensor],
                      prefix: str) -> Dict[str, torch.Tensor]:
    head = prefix + "."
    state = {name[len(head):]: t for name, t in tensors.items()
             if name.startswith(head)}
    if not state:
        raise TensorIOError(f"checkpoint has no tensors under {prefix!r}")
    return state


def restore_optimizer(optimizer: torch.optim.Optimizer,
                      tensors: Dict[str, torch.Tensor], meta: dict) -> None:
    opt_meta = meta.get("optimizer") or {}
    if not opt_meta:
        raise TensorIOError("checkpoint carries no optimizer state")
    state: Dict[int, dict] = {}
    for idx_str, scalars in opt_meta["scalars"].items():
        idx = int(idx_str)
        entry = dict(scalars)
        head = f"optim.state.{idx}."
        for name, tensor in tensors.items():
            if name.startswith(head):
                entry[name[len(head):]] = tensor.clone()
        state[idx] = entry
    optimizer.load_state_dict({"state": state,
                               "param_groups": opt_meta["param_groups"]})


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    """JSON-lines metrics writer; no-op when no path is given."""

    def __init__(self, path: Optional[str], append: bool = False):
        self.path = path
        self.rows: List[dict] = []
        self._fh = None
        if path is not None:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            import json
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _dump_failure(run_dir: Optional[str], step: int,
                  addresses: Sequence[ClipAddress], value: float) -> None:
    if run_dir is None:
        return
    dump_json(os.path.join(run_dir, "failure.json"), {
        "error": "non-finite loss",
        "step": step,
        "loss": repr(value),
        "batch": [[a.procedure_id, a.clip_index] for a in addresses],
    })


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def pretrain_step(model: PretrainModel, pi: torch.Tensor,
                  batch: Dict[str, torch.Tensor], loss_config: LossConfig,
                  mask_ratio: float, mask_seed):
    """One forward pass of the full alignment objective.

    The pose branch encodes the masked sequence; its CLS embeddings feed the
    contrastive/geometric terms and the decoder predicts the masked
    coordinates.  Returns (total, LossReport).
    """
    video_embed = model.video(batch["frames"])
    seq_batch = model.pose.build_sequence(pi, batch["tracks"],
                                          batch["poses"], batch["validity"])
    masked, mask_index, target_coords, target_valid = apply_mask(
        model.pose, seq_batch, mask_ratio, mask_seed)
    seq, pose_embed = model.pose(masked)
    predictions = model.decoder(seq, masked.padding, mask_index)
    embeddings = EmbeddingSet.from_raw(video_embed, pose_embed)
    return loss_report(embeddings, predictions, target_coords, target_valid,
                       loss_config)


def pretrain(dataset: SceneDataset, tokenizer: PoseTokenizer,
             model: PretrainModel, train_config: TrainConfig,
             loss_config: LossConfig, run_dir: Optional[str] = None,
             split: str = "train",
             resume_from: Optional[str] = None) -> Tuple[str, List[dict]]:
    """Run alignment pretraining; returns (checkpoint path, metrics rows).

    Deterministic given the config seed: bit-identical reruns and
    bit-identical resumption from an epoch checkpoint.
    """
    if train_config.deterministic:
        torch.set_num_threads(1)
    pids = dataset.splits[split]
    manifests = [dataset.procedures[p] for p in pids]
    total_clips = sum(m.num_clips for m in manifests)
    steps_per_epoch = max(1, math.ceil(total_clips / train_config.batch_size))
    total_steps = steps_per_epoch * train_config.epochs
    cache = PoseTokenCache(tokenizer, dataset, pids)
    optimizer = build_optimizer(model.parameters(), train_config)

    start_epoch = 0
    if resume_from is not None:
        tensors, meta = load_checkpoint(resume_from)
        for prefix in ("video", "pose", "decoder"):
            getattr(model, prefix).load_state_dict(
                module_state_from(tensors, prefix))
        restore_optimizer(optimizer, tensors, meta)
        start_epoch = int(meta["epoch"]) + 1

    checkpoint_path = None if run_dir is None \
        else os.path.join(run_dir, "checkpoint")
    log = MetricsLog(
        None if run_dir is None else os.path.join(run_dir, "metrics.jsonl"),
        append=resume_from is not None)
    tokenizer_hash = tokenizer.weight_fingerprint()
    meta_base = {
        "phase": "pretrain",
        "train_config": train_config.to_dict(),
        "loss_config": loss_config.to_dict(),
        "model_config": model.config_dict(),
        "tokenizer_fingerprint": tokenizer_hash,
    }

    model.train()
    try:
        for epoch in range(start_epoch, train_config.epochs):
            sampler = SegmentSampler(manifests, train_config.batch_size,
                                     seed=[train_config.seed, epoch])
            for step in range(steps_per_epoch):
                gstep = epoch * steps_per_epoch + step
                addresses = sampler.sample_batch()
                batch = collate(dataset, addresses)
                pi = cache.gather(addresses)
                set_lr(optimizer, cosine_lr(gstep, total_steps,
                                            train_config.learning_rate,
                                            train_config.warmup_frac))
                optimizer.zero_grad()
                total, report = pretrain_step(
                    model, pi, batch, loss_config, train_config.mask_ratio,
                    mask_seed=[train_config.seed, gstep])
                if not math.isfinite(report.total):
                    _dump_failure(run_dir, gstep, addresses, report.total)
                    raise RuntimeError(
                        f"non-finite loss {report.total} at step {gstep}; "
                        f"batch clips: "
                        f"{[(a.procedure_id, a.clip_index) for a in addresses]}"
                    )
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(),
                                               train_config.grad_clip)
                optimizer.step()
                row = {"phase": "pretrain", "epoch": epoch, "step": gstep,
                       "lr": optimizer.param_groups[0]["lr"]}
                row.update(report.to_dict())
                log.write(row)
            if checkpoint_path and train_config.checkpoint_every \
                    and (epoch + 1) % train_config.checkpoint_every == 0 \
                    and epoch + 1 < train_config.epochs:
                meta = dict(meta_base, epoch=epoch,
                            step=(epoch + 1) * steps_per_epoch)
                save_checkpoint(checkpoint_path + f"-epoch{epoch + 1:03d}",
                                {"video": model.video, "pose": model.pose,
                                 "decoder": model.decoder}, optimizer, meta)
        if tokenizer.weight_fingerprint() != tokenizer_hash:
            raise RuntimeError("tokenizer weights changed during pretraining")
        if checkpoint_path:
            meta = dict(meta_base, epoch=train_config.epochs - 1,
                        step=total_steps)
            save_checkpoint(checkpoint_path,
                            {"video": model.video, "pose": model.pose,
                             "decoder": model.decoder}, optimizer, meta)
    finally:
        log.close()
    return checkpoint_path or "", log.rows


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------

def freeze_video_layers(video: VideoEncoder, count: int) -> List[str]:
    """Freeze the first ``count`` trunk blocks; returns frozen block names."""
    depth = len(video.blocks)
    if count > depth:
        raise ValueError(f"cannot freeze {count} of {depth} video layers")
    frozen = []
    for i in range(count):
        for p in video.blocks[i].parameters():
            p.requires_grad_(False)
        frozen.append(f"blocks.{i}")
    return frozen


def default_frozen_layers(video: VideoEncoder) -> int:
    return math.ceil(len(video.blocks) / 2)


def finetune(bundle: nn.Module, dataset: SceneDataset,
             addresses: Sequence[ClipAddress], train_config: TrainConfig,
             run_dir: Optional[str] = None) -> List[dict]:
    """Supervised training of a classification bundle; returns metrics rows.

    ``bundle.forward(batch)`` must map a collated batch to (B, K) logits.
    Batches reshuffle every epoch from (seed, epoch); order is deterministic.
    """
    if train_config.deterministic:
        torch.set_num_threads(1)
    if not addresses:
        raise ValueError("no labeled clips to finetune on")
    optimizer = build_optimizer(bundle.parameters(), train_config)
    steps_per_epoch = max(1, math.ceil(len(addresses)
                                       / train_config.batch_size))
    total_steps = steps_per_epoch * train_config.epochs
    log = MetricsLog(
        None if run_dir is None else os.path.join(run_dir, "metrics.jsonl"))
    bundle.train()
    addresses = list(addresses)
    try:
        for epoch in range(train_config.epochs):
            order = np.random.default_rng(
                [train_config.seed, epoch]).permutation(len(addresses))
            for step in range(steps_per_epoch):
                gstep = epoch * steps_per_epoch + step
                chunk = order[step * train_config.batch_size:
                              (step + 1) * train_config.batch_size]
                picked = [addresses[i] for i in chunk]
                batch = collate(dataset, picked)
                set_lr(optimizer, cosine_lr(gstep, total_steps,
                                            train_config.learning_rate,
                                            train_config.warmup_frac))
                optimizer.zero_grad()
                logits = bundle(batch)
                loss = F.cross_entropy(logits, batch["labels"])
                value = float(loss.detach())
                if not math.isfinite(value):
                    _dump_failure(run_dir, gstep, picked, value)
                    raise RuntimeError(
                        f"non-finite loss {value} at step {gstep}; "
                        f"batch clips: "
                        f"{[(a.procedure_id, a.clip_index) for a in picked]}"
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(
                    [p for p in bundle.parameters() if p.requires_grad],
                    train_config.grad_clip)
                optimizer.step()
                accuracy = float((logits.detach().argmax(dim=1)
                                  == batch["labels"]).float().mean())
                log.write({"phase": "finetune", "epoch": epoch,
                           "step": gstep,
                           "lr": optimizer.param_groups[0]["lr"],
                           "loss": value, "batch_accuracy": accuracy})
    finally:
        log.close()
    return log.rows


def predict(bundle: nn.Module, dataset: SceneDataset,
            addresses: Sequence[ClipAddress],
            batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Class scores and labels over ``addresses``: ((N, K) float64, (N,))."""
    bundle.eval()
    scores: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    with torch.no_grad():
        for lo in range(0, len(addresses), batch_size):
            batch = collate(dataset, addresses[lo:lo + batch_size])
            logits = bundle(batch)
            scores.append(logits.double().numpy())
            labels.append(batch["labels"].numpy())
    bundle.train()
    return np.concatenate(scores), np.concatenate(labels)
