"""Classification heads, temporal models, metrics, and experiment protocols.

Downstream recognition reuses the pretrained encoder branches: the per-view
CLS embeddings of the selected modalities are mean-pooled into a single clip
feature, classified by a small MLP head, and optionally refined across a whole
procedure by a bidirectional recurrent model.  Protocol runners cover label
efficiency, cross-view transfer, unimodal transfer, view-count scaling, loss
ablations and tokenizer ablations, each averaged over a configured seed set.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import (
    EmbeddingSet,
    PoseEncoderConfig,
    PoseSequenceEncoder,
    VideoEncoder,
    VideoEncoderConfig,
    l2_normalize,
)
from .objectives import ClipAddress
from .posetok import MlpPoseBaseline, PoseTokenizer
from .scenegen import SceneDataset
from .tensorio import TensorIOError, dump_json
from .trainer import (
    PoseTokenCache,
    TrainConfig,
    collate,
    default_frozen_layers,
    finetune,
    freeze_video_layers,
    load_checkpoint,
    module_state_from,
    predict,
    save_checkpoint,
)

MODALITIES = ("video", "pose")


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolingSpec:
    """Which (modality, view) CLS embeddings are averaged into the clip feature."""

    modalities: Tuple[str, ...]
    views: Tuple[int, ...]

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("PoolingSpec needs at least one modality")
        if not self.views:
            raise ValueError("PoolingSpec needs at least one view")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad:
            raise ValueError(f"unknown modalities {bad}; choose from {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("duplicate modalities in PoolingSpec")
        if len(set(self.views)) != len(self.views):
            raise ValueError("duplicate views in PoolingSpec")
        if any(v < 0 for v in self.views):
            raise ValueError("view indices must be non-negative")


def pool_embeddings(embeddings: EmbeddingSet, spec: PoolingSpec) -> torch.Tensor:
    """Mean over the selected per-view unit-norm CLS embeddings: (B, D)."""
    stacks = []
    views = list(spec.views)
    C = embeddings.video_n.shape[1]
    if any(v >= C for v in views):
        raise ValueError(f"view index out of range for {C} views: {views}")
    if "video" in spec.modalities:
        stacks.append(embeddings.video_n[:, views])
    if "pose" in spec.modalities:
        stacks.append(embeddings.pose_n[:, views])
    return torch.cat(stacks, dim=1).mean(dim=1)


def pool_and_classify(embeddings: EmbeddingSet, spec: PoolingSpec,
                      head: nn.Module) -> torch.Tensor:
    """Class scores for the pooled clip feature: (B, K)."""
    return head(pool_embeddings(embeddings, spec))


class ClassifierHead(nn.Module):
    """Two affine layers with a nonlinearity: D -> hidden -> K."""

    def __init__(self, embed_dim: int, hidden_dim: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# Classification bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BundleConfig:
    """Architecture switches for a downstream classifier."""

    modalities: Tuple[str, ...] = ("video", "pose")
    views: Optional[Tuple[int, ...]] = None  # None = all views
    head_hidden: int = 128
    num_classes: int = 6
    pose_features: str = "vq"  # "vq" (frozen tokenizer) | "mlp" (trainable)
    use_positions: bool = True

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("bundle needs at least one modality")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad:
            raise ValueError(f"unknown modalities {bad}")
        if self.pose_features not in ("vq", "mlp"):
            raise ValueError("pose_features must be 'vq' or 'mlp'")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


class ClassifierBundle(nn.Module):
    """Encoder branches + pooling + classification head as one trainable unit.

    ``active_views`` restricts both the information available to the encoders
    (non-selected views are fully key-masked in the pose branch and never fed
    to the video branch) and the CLS pooling set, so a held-out camera is
    genuinely unavailable rather than merely unpooled.
    """

    def __init__(self, config: BundleConfig,
                 video_config: Optional[VideoEncoderConfig] = None,
                 pose_config: Optional[PoseEncoderConfig] = None,
                 num_joints: int = 17):
        super().__init__()
        self.config = config
        self.video: Optional[VideoEncoder] = None
        self.pose: Optional[PoseSequenceEncoder] = None
        self.pose_mlp: Optional[MlpPoseBaseline] = None
        self.pose_cache: Optional[PoseTokenCache] = None
        dims = []
        if "video" in config.modalities:
            if video_config is None:
                raise ValueError("video modality selected without a config")
            self.video = VideoEncoder(video_config)
            dims.append(video_config.embed_dim)
        if "pose" in config.modalities:
            if pose_config is None:
                raise ValueError("pose modality selected without a config")
            self.pose = PoseSequenceEncoder(pose_config)
            dims.append(pose_config.embed_dim)
            if config.pose_features == "mlp":
                self.pose_mlp = MlpPoseBaseline(
                    num_joints, hidden_dim=2 * pose_config.embed_dim,
                    output_dim=pose_config.embed_dim)
            if not config.use_positions:
                self.pose.pos_table.zero_()
        if len(set(dims)) > 1:
            raise ValueError(f"modality embed dims differ: {dims}")
        self.head = ClassifierHead(dims[0], config.head_hidden,
                                   config.num_classes)
        self.active_views: Optional[Tuple[int, ...]] = config.views

    # -- view restriction ----------------------------------------------------

    def set_views(self, views: Optional[Sequence[int]]) -> None:
        """Restrict encoding + pooling to a view subset (None = all views)."""
        if views is None:
            self.active_views = None
            return
        views = tuple(int(v) for v in views)
        if not views:
            raise ValueError("view subset must be non-empty")
        if len(set(views)) != len(views):
            raise ValueError("duplicate views in subset")
        self.active_views = views

    def attach_cache(self, cache: PoseTokenCache) -> None:
        self.pose_cache = cache

    # -- forward -------------------------------------------------------------

    def _pose_features(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        if self.pose_mlp is not None:
            return self.pose_mlp(batch["poses"], batch["validity"])
        if self.pose_cache is None:
            raise RuntimeError(
                "bundle uses frozen pose tokens; attach a PoseTokenCache")
        return self.pose_cache.gather(batch["addresses"])

    def pooled_features(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Mean over the active (modality, view) unit-norm CLS embeddings."""
        num_views = batch["frames"].shape[1]
        views = list(self.active_views if self.active_views is not None
                     else range(num_views))
        if any(v >= num_views for v in views):
            raise ValueError(
                f"view index out of range for {num_views} views: {views}")
        parts = []
        if self.video is not None:
            cls = self.video(batch["frames"][:, views])
            parts.append(l2_normalize(cls))
        if self.pose is not None:
            pi = self._pose_features(batch)
            seq_batch = self.pose.build_sequence(
                pi, batch["tracks"], batch["poses"], batch["validity"])
            if len(views) < num_views:
                hidden = [v for v in range(num_views) if v not in views]
                seq_batch.padding[:, hidden, :] = True
            _, cls = self.pose(seq_batch)
            parts.append(l2_normalize(cls[:, views]))
        return torch.cat(parts, dim=1).mean(dim=1)

    def forward(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        return self.head(self.pooled_features(batch))


def load_pretrained(bundle: ClassifierBundle, checkpoint_path: str) -> List[str]:
    """Initialize the bundle's encoder branches from a pretraining checkpoint.

    Only branches present in the bundle are touched; returns their names.
    Raises TensorIOError when a needed branch is missing or shaped wrong.
    """
    tensors, _ = load_checkpoint(checkpoint_path)
    loaded = []
    for name in ("video", "pose"):
        module = getattr(bundle, name)
        if module is None:
            continue
        try:
            module.load_state_dict(module_state_from(tensors, name))
        except RuntimeError as e:
            raise TensorIOError(
                f"checkpoint {checkpoint_path!r} does not match the {name} "
                f"encoder architecture: {e}") from e
        loaded.append(name)
    if bundle.pose is not None and not bundle.config.use_positions:
        bundle.pose.pos_table.zero_()
    return loaded


def save_bundle(path: str, bundle: ClassifierBundle, meta: dict = None) -> None:
    """Persist a finetuned classifier (branches + head + architecture)."""
    modules: Dict[str, nn.Module] = {"head": bundle.head}
    if bundle.video is not None:
        modules["video"] = bundle.video
    if bundle.pose is not None:
        modules["pose"] = bundle.pose
    if bundle.pose_mlp is not None:
        modules["pose_mlp"] = bundle.pose_mlp
    full_meta = dict(meta or {})
    config = bundle.config
    full_meta["bundle"] = {
        "modalities": list(config.modalities),
        "views": None if config.views is None else list(config.views),
        "head_hidden": config.head_hidden,
        "num_classes": config.num_classes,
        "pose_features": config.pose_features,
        "use_positions": config.use_positions,
        "num_joints": (bundle.pose.config.num_joints
                       if bundle.pose is not None else 0),
        "video_config": (None if bundle.video is None
                         else _encoder_config_dict(bundle.video.config)),
        "pose_config": (None if bundle.pose is None
                        else _encoder_config_dict(bundle.pose.config)),
    }
    save_checkpoint(path, modules, None, full_meta)


def _encoder_config_dict(config) -> dict:
    out = {}
    for key, value in vars(config).items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def load_bundle(path: str,
                pose_cache: Optional[PoseTokenCache] = None,
                ) -> ClassifierBundle:
    """Reconstruct a classifier saved by :func:`save_bundle`."""
    tensors, meta = load_checkpoint(path)
    spec = meta.get("bundle")
    if not spec:
        raise TensorIOError(f"{path}: not a classifier bundle checkpoint")
    video_config = None
    if spec["video_config"] is not None:
        video_config = VideoEncoderConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in spec["video_config"].items()})
    pose_config = None
    if spec["pose_config"] is not None:
        pose_config = PoseEncoderConfig(**spec["pose_config"])
    config = BundleConfig(
        modalities=tuple(spec["modalities"]),
        views=None if spec["views"] is None else tuple(spec["views"]),
        head_hidden=spec["head_hidden"], num_classes=spec["num_classes"],
        pose_features=spec["pose_features"],
        use_positions=spec["use_positions"])
    bundle = ClassifierBundle(config, video_config, pose_config,
                              num_joints=spec["num_joints"] or 17)
    for name in ("head", "video", "pose", "pose_mlp"):
        module = bundle.head if name == "head" else getattr(bundle, name)
        if module is None:
            continue
        module.load_state_dict(module_state_from(tensors, name))
    if pose_cache is not None:
        bundle.attach_cache(pose_cache)
    return bundle


def make_bundle(config: BundleConfig,
                video_config: Optional[VideoEncoderConfig] = None,
                pose_config: Optional[PoseEncoderConfig] = None,
                num_joints: int = 17,
                init: Optional[str] = None,
                frozen_video_layers: int = -1,
                pose_cache: Optional[PoseTokenCache] = None,
                seed: int = 0) -> ClassifierBundle:
    """Seeded bundle constructor with optional pretrained initialization.

    Pretrained video trunks get their earliest ``frozen_video_layers`` blocks
    frozen (-1 = first half, rounded up); scratch bundles train everything.
    """
    torch.manual_seed(seed)
    bundle = ClassifierBundle(config, video_config, pose_config, num_joints)
    if pose_cache is not None:
        bundle.attach_cache(pose_cache)
    if init is not None:
        load_pretrained(bundle, init)
        if bundle.video is not None:
            count = (default_frozen_layers(bundle.video)
                     if frozen_video_layers < 0 else frozen_video_layers)
            freeze_video_layers(bundle.video, count)
    return bundle


# ---------------------------------------------------------------------------
# Temporal model
# ---------------------------------------------------------------------------

class TemporalModel(nn.Module):
    """Bidirectional recurrent refinement of per-clip features.

    Consumes a procedure's pooled clip features f_1..f_L and emits per-clip
    class scores of the same length.
    """

    def __init__(self, input_dim: int, hidden_dim: int = 128,
                 num_classes: int = 6):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden_dim, num_layers=1,
                          batch_first=True, bidirectional=True)
        self.head = ClassifierHead(2 * hidden_dim, hidden_dim, num_classes)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, L, D) -> (B, L, K); sequence length is preserved."""
        if feats.ndim != 3:
            raise ValueError(f"expected (B, L, D) features, got {feats.shape}")
        if feats.shape[1] == 0:
            raise ValueError("temporal model needs a non-empty sequence")
        out, _ = self.gru(feats)
        return self.head(out)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of samples whose true class is among the k highest scores."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Ranked average precision of one class from continuous scores.

    Mean over the positives of (number of positives at or above the rank)
    divided by the rank, with descending stable ordering.
    """
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.cumsum(positives[order])
    ranks = np.arange(1, len(scores) + 1)
    return float((hits[positives[order]] / ranks[positives[order]]).sum()
                 / n_pos)


@dataclass
class MetricsReport:
    """Clip-classification quality summary; every value lies in [0, 1]."""

    accuracy: float
    macro_ap: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: Dict[str, List[float]]
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_ap": self.macro_ap,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "num_samples": self.num_samples,
        }


def evaluate_scores(scores: np.ndarray, labels: np.ndarray,
                    num_classes: int) -> MetricsReport:
    """Full metric sweep over class scores (N, K) and integer labels (N,).

    A class absent from the ground truth has no defined average precision;
    it is excluded from the macro AP with a warning.  Precision/recall/F1
    are macro means over all classes with empty counts treated as zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != num_classes:
        raise ValueError(f"scores must be (N, {num_classes}), "
                         f"got {scores.shape}")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels disagree on sample count")
    predictions = np.argmax(scores, axis=1)
    accuracy = float(np.mean(predictions == labels))

    aps = []
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    f1 = np.zeros(num_classes)
    ap_list: List[float] = []
    for k in range(num_classes):
        pos = labels == k
        if pos.any():
            ap = average_precision(scores[:, k], pos)
            aps.append(ap)
            ap_list.append(ap)
        else:
            warnings.warn(f"class {k} absent from ground truth; its average "
                          f"precision is excluded from the macro mean")
            ap_list.append(float("nan"))
        tp = int(np.sum((predictions == k) & pos))
        fp = int(np.sum((predictions == k) & ~pos))
        fn = int(np.sum((predictions != k) & pos))
        precision[k] = tp / (tp + fp) if tp + fp else 0.0
        recall[k] = tp / (tp + fn) if tp + fn else 0.0
        f1[k] = (2 * precision[k] * recall[k] / (precision[k] + recall[k])
                 if precision[k] + recall[k] else 0.0)
    if not aps:
        raise ValueError("no class present in ground truth")
    return MetricsReport(
        accuracy=accuracy,
        macro_ap=float(np.mean(aps)),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class={"precision": precision.tolist(),
                   "recall": recall.tolist(),
                   "f1": f1.tolist(),
                   "average_precision": ap_list},
        num_samples=int(labels.shape[0]),
    )


SUMMARY_METRICS = ("accuracy", "macro_ap", "macro_precision", "macro_recall",
                   "macro_f1")


def summarize(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Mean and standard deviation of each scalar metric across seeds."""
    if not reports:
        raise ValueError("nothing to summarize")
    out = {}
    for name in SUMMARY_METRICS:
        values = np.array([getattr(r, name) for r in reports])
        out[name] = {"mean": float(values.mean()),
                     "std": float(values.std())}
    return out


def evaluate_bundle(bundle: nn.Module, dataset: SceneDataset,
                    addresses: Sequence[ClipAddress], num_classes: int,
                    batch_size: int = 32) -> MetricsReport:
    scores, labels = predict(bundle, dataset, addresses, batch_size)
    return evaluate_scores(scores, labels, num_classes)


# ---------------------------------------------------------------------------
# Labeled subsets and split bookkeeping
# ---------------------------------------------------------------------------

def clip_label_pairs(dataset: SceneDataset,
                     split: str) -> List[Tuple[ClipAddress, int]]:
    """(address, label) for every clip of a split, from manifests only."""
    pairs = []
    for pid in dataset.splits[split]:
        manifest = dataset.procedures[pid]
        for segment in manifest.segments:
            for i in range(segment.start, segment.end):
                pairs.append((ClipAddress(pid, i), segment.label))
    return pairs


def split_addresses(dataset: SceneDataset, split: str) -> List[ClipAddress]:
    return [addr for addr, _ in clip_label_pairs(dataset, split)]


def split_hash(addresses: Sequence[ClipAddress]) -> str:
    """Order-independent fingerprint of a clip set."""
    lines = sorted(f"{a.procedure_id}:{a.clip_index}" for a in addresses)
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def stratified_fraction(dataset: SceneDataset, split: str, fraction: float,
                        seed: int) -> List[ClipAddress]:
    """Per-class random subset of a split covering ``fraction`` of its clips.

    Every class keeps at least one clip; a fraction that would round a class
    to zero triggers a warning and a single-clip floor.  fraction=1.0 returns
    the whole split regardless of seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    by_class: Dict[int, List[ClipAddress]] = {}
    for addr, label in clip_label_pairs(dataset, split):
        by_class.setdefault(label, []).append(addr)
    rng = np.random.default_rng([seed, 0xD5])
    chosen: List[ClipAddress] = []
    for label in sorted(by_class):
        pool = by_class[label]
        count = int(round(fraction * len(pool)))
        if count == 0:
            warnings.warn(f"fraction {fraction} leaves class {label} empty; "
                          f"keeping one clip")
            count = 1
        picked = rng.choice(len(pool), size=count, replace=False)
        chosen.extend(pool[i] for i in picked)
    return sorted(chosen, key=lambda a: (a.procedure_id, a.clip_index))


# ---------------------------------------------------------------------------
# Protocol plumbing
# ---------------------------------------------------------------------------

@dataclass
class ProtocolSetup:
    """Everything the experiment protocols share.

    ``checkpoints`` maps method names (e.g. "scratch", "contrastive",
    "full") to pretraining checkpoint paths, with None meaning random
    initialization.
    """

    dataset: SceneDataset
    video_config: Optional[VideoEncoderConfig]
    pose_config: Optional[PoseEncoderConfig]
    finetune_config: TrainConfig
    tokenizer: Optional[PoseTokenizer] = None
    seeds: Tuple[int, ...] = (0, 1, 2)
    head_hidden: int = 128
    eval_split: str = "test"
    _cache: Optional[PoseTokenCache] = field(default=None, repr=False)

    @property
    def num_classes(self) -> int:
        return self.dataset.config.num_classes

    @property
    def num_views(self) -> int:
        return self.dataset.config.num_views

    def cache(self) -> PoseTokenCache:
        """Frozen-tokenizer embeddings for every procedure, built once."""
        if self._cache is None:
            if self.tokenizer is None:
                raise ValueError("protocol needs a tokenizer for VQ features")
            pids = sorted(self.dataset.procedures)
            self._cache = PoseTokenCache(self.tokenizer, self.dataset, pids)
        return self._cache

    def test_addresses(self) -> List[ClipAddress]:
        return split_addresses(self.dataset, self.eval_split)

    def build(self, modalities: Sequence[str] = MODALITIES,
              views: Optional[Sequence[int]] = None,
              pose_features: str = "vq", use_positions: bool = True,
              init: Optional[str] = None, seed: int = 0) -> ClassifierBundle:
        config = BundleConfig(
            modalities=tuple(modalities),
            views=None if views is None else tuple(views),
            head_hidden=self.head_hidden,
            num_classes=self.num_classes,
            pose_features=pose_features,
            use_positions=use_positions,
        )
        cache = None
        if "pose" in config.modalities and pose_features == "vq":
            cache = self.cache()
        return make_bundle(config, self.video_config, self.pose_config,
                           num_joints=self.dataset.config.num_joints,
                           init=init, pose_cache=cache, seed=seed)

    def finetune_and_eval(self, bundle: ClassifierBundle,
                          labeled: Sequence[ClipAddress], seed: int,
                          eval_views: Optional[Sequence[int]] = None,
                          ) -> MetricsReport:
        config = replace(self.finetune_config, seed=seed)
        finetune(bundle, self.dataset, labeled, config)
        if eval_views is not None:
            bundle.set_views(eval_views)
        return evaluate_bundle(bundle, self.dataset, self.test_addresses(),
                               self.num_classes)


def _guarded(setup: ProtocolSetup, result: dict) -> dict:
    """Attach the evaluation-split hash and verify it never changed."""
    digest = split_hash(setup.test_addresses())
    if result.get("test_split_hash", digest) != digest:
        raise RuntimeError("evaluation split changed during the protocol run")
    result["test_split_hash"] = digest
    return result


def save_results(run_dir: str, name: str, result: dict) -> Tuple[str, str]:
    """Persist a protocol result as pretty JSON plus a flat CSV of its rows."""
    os.makedirs(run_dir, exist_ok=True)
    json_path = os.path.join(run_dir, f"{name}.json")
    dump_json(json_path, result)
    csv_path = os.path.join(run_dir, f"{name}.csv")
    rows = result.get("rows", [])
    scalar_rows = [
        {k: v for k, v in row.items()
         if isinstance(v, (str, int, float, bool)) or v is None}
        for row in rows
    ]
    names: List[str] = []
    for row in scalar_rows:
        for key in row:
            if key not in names:
                names.append(key)
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=names)
        writer.writeheader()
        writer.writerows(scalar_rows)
    return json_path, csv_path


def _report_row(report: MetricsReport, **extra) -> dict:
    row = dict(extra)
    row.update(report.to_dict())
    return row


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

DEFAULT_FRACTIONS = (0.05, 0.10, 0.20, 0.50, 1.00)


def run_data_efficiency(setup: ProtocolSetup,
                        checkpoints: Dict[str, Optional[str]],
                        fractions: Sequence[float] = DEFAULT_FRACTIONS,
                        ) -> dict:
    """Finetune each method on growing label fractions; test split fixed.

    Each seed resamples the labeled subset; rows = fractions x methods x
    seeds, summarized per (fraction, method).
    """
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    summary: Dict[str, dict] = {}
    for fraction in fractions:
        for method, ckpt in checkpoints.items():
            reports = []
            for seed in setup.seeds:
                labeled = stratified_fraction(setup.dataset, "train",
                                              fraction, seed)
                bundle = setup.build(init=ckpt, seed=seed)
                report = setup.finetune_and_eval(bundle, labeled, seed)
                reports.append(report)
                rows.append(_report_row(report, fraction=fraction,
                                        method=method, seed=seed,
                                        num_labeled=len(labeled)))
            summary[f"{fraction:g}/{method}"] = summarize(reports)
    return _guarded(setup, {
        "protocol": "data_efficiency",
        "fractions": list(fractions),
        "methods": list(checkpoints),
        "seeds": list(setup.seeds),
        "rows": rows,
        "summary": summary,
        "test_split_hash": before,
    })


def run_cross_view(setup: ProtocolSetup,
                   checkpoints: Dict[str, Optional[str]],
                   train_views: Sequence[int], test_view: int,
                   fraction: float = 1.0) -> dict:
    """Finetune on some cameras, evaluate on a held-out one.

    Reports the accuracy boost (pretrained minus scratch, signed
    percentage points) when the checkpoint dict carries both methods.
    """
    train_views = tuple(int(v) for v in train_views)
    if int(test_view) in train_views:
        raise ValueError(
            f"test view {test_view} overlaps the training views {train_views}")
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    means: Dict[str, float] = {}
    for method, ckpt in checkpoints.items():
        reports = []
        for seed in setup.seeds:
            labeled = stratified_fraction(setup.dataset, "train", fraction,
                                          seed)
            bundle = setup.build(views=train_views, init=ckpt, seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed,
                                             eval_views=(int(test_view),))
            reports.append(report)
            rows.append(_report_row(report, method=method, seed=seed))
        means[method] = summarize(reports)["accuracy"]["mean"]
    result = {
        "protocol": "cross_view",
        "train_views": list(train_views),
        "test_view": int(test_view),
        "seeds": list(setup.seeds),
        "rows": rows,
        "accuracy_mean": means,
        "test_split_hash": before,
    }
    if "scratch" in means:
        result["accuracy_boost_points"] = {
            method: 100.0 * (mean - means["scratch"])
            for method, mean in means.items() if method != "scratch"
        }
    return _guarded(setup, result)


def run_single_view(setup: ProtocolSetup,
                    checkpoints: Dict[str, Optional[str]], view: int,
                    fraction: float = 1.0) -> dict:
    """Train and test restricted to the same single camera."""
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    summary: Dict[str, dict] = {}
    for method, ckpt in checkpoints.items():
        reports = []
        for seed in setup.seeds:
            labeled = stratified_fraction(setup.dataset, "train", fraction,
                                          seed)
            bundle = setup.build(views=(int(view),), init=ckpt, seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed)
            reports.append(report)
            rows.append(_report_row(report, method=method, seed=seed,
                                    view=int(view)))
        summary[method] = summarize(reports)
    return _guarded(setup, {
        "protocol": "single_view",
        "view": int(view),
        "seeds": list(setup.seeds),
        "rows": rows,
        "summary": summary,
        "test_split_hash": before,
    })


def run_unimodal(setup: ProtocolSetup, modality: str,
                 checkpoint: Optional[str], fraction: float = 1.0) -> dict:
    """Single-branch finetuning, scratch vs pretrained initialization.

    Only the selected branch is instantiated, so the other branch's
    pretrained weights cannot be touched.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    summary: Dict[str, dict] = {}
    for method, ckpt in (("scratch", None), ("pretrained", checkpoint)):
        reports = []
        for seed in setup.seeds:
            labeled = stratified_fraction(setup.dataset, "train", fraction,
                                          seed)
            bundle = setup.build(modalities=(modality,), init=ckpt, seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed)
            reports.append(report)
            rows.append(_report_row(report, modality=modality, method=method,
                                    seed=seed))
        summary[method] = summarize(reports)
    return _guarded(setup, {
        "protocol": "unimodal",
        "modality": modality,
        "seeds": list(setup.seeds),
        "rows": rows,
        "summary": summary,
        "test_split_hash": before,
    })


def run_view_count_ablation(setup: ProtocolSetup,
                            checkpoint: Optional[str],
                            fraction: float = 1.0) -> dict:
    """Pose-only accuracy as a function of how many cameras are available.

    One pose-only bundle per seed is finetuned with every view; evaluation
    then sweeps all view subsets of every size, reporting box statistics
    (min, quartiles, max) per subset size.
    """
    before = split_hash(setup.test_addresses())
    C = setup.num_views
    rows: List[dict] = []
    per_count: Dict[int, List[float]] = {n: [] for n in range(1, C + 1)}
    for seed in setup.seeds:
        labeled = stratified_fraction(setup.dataset, "train", fraction, seed)
        bundle = setup.build(modalities=("pose",), init=checkpoint, seed=seed)
        finetune(bundle, setup.dataset, labeled,
                 replace(setup.finetune_config, seed=seed))
        for n in range(1, C + 1):
            for subset in itertools.combinations(range(C), n):
                bundle.set_views(subset)
                report = evaluate_bundle(bundle, setup.dataset,
                                         setup.test_addresses(),
                                         setup.num_classes)
                per_count[n].append(report.accuracy)
                rows.append(_report_row(report, seed=seed, num_views=n,
                                        views="+".join(map(str, subset))))
    boxes = {}
    for n, accs in per_count.items():
        values = np.array(accs)
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        boxes[str(n)] = {"min": float(values.min()), "q1": float(q1),
                         "median": float(med), "q3": float(q3),
                         "max": float(values.max()),
                         "num_subsets": math.comb(C, n),
                         "num_evals": len(accs)}
    return _guarded(setup, {
        "protocol": "view_count",
        "seeds": list(setup.seeds),
        "rows": rows,
        "box_stats": boxes,
        "test_split_hash": before,
    })


LOSS_ABLATION_METHODS = ("full", "with_geo", "with_mask", "contrastive_only")


def run_loss_ablation(setup: ProtocolSetup,
                      checkpoints: Dict[str, str],
                      fraction: float = 1.0) -> dict:
    """Accuracy drop of each pretraining-objective subset vs the full loss.

    Expects checkpoints for exactly: full (all terms), with_geo (no masked
    modeling), with_mask (no geometric terms), contrastive_only.
    """
    missing = [m for m in LOSS_ABLATION_METHODS if m not in checkpoints]
    if missing:
        raise ValueError(f"loss ablation needs checkpoints for {missing}")
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    means: Dict[str, float] = {}
    for method in LOSS_ABLATION_METHODS:
        reports = []
        for seed in setup.seeds:
            labeled = stratified_fraction(setup.dataset, "train", fraction,
                                          seed)
            bundle = setup.build(init=checkpoints[method], seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed)
            reports.append(report)
            rows.append(_report_row(report, method=method, seed=seed))
        means[method] = summarize(reports)["accuracy"]["mean"]
    table = [{"method": method, "accuracy_mean": means[method],
              "drop_points": 100.0 * (means["full"] - means[method])}
             for method in LOSS_ABLATION_METHODS]
    return _guarded(setup, {
        "protocol": "loss_ablation",
        "seeds": list(setup.seeds),
        "rows": rows,
        "table": table,
        "test_split_hash": before,
    })


TOKENIZER_ABLATION_CONFIGS = (
    ("vq", True), ("vq", False), ("mlp", True), ("mlp", False))


def run_tokenizer_ablation(setup: ProtocolSetup,
                           fraction: float = 1.0) -> dict:
    """Pose-only accuracy across tokenizer type x positional-code settings.

    Four configurations: frozen compositional tokens vs a trainable MLP
    lift, each with and without the time/track positional table.
    """
    before = split_hash(setup.test_addresses())
    rows: List[dict] = []
    summary: Dict[str, dict] = {}
    for features, use_positions in TOKENIZER_ABLATION_CONFIGS:
        key = f"{features}/{'pos' if use_positions else 'nopos'}"
        reports = []
        for seed in setup.seeds:
            labeled = stratified_fraction(setup.dataset, "train", fraction,
                                          seed)
            bundle = setup.build(modalities=("pose",), pose_features=features,
                                 use_positions=use_positions, seed=seed)
            report = setup.finetune_and_eval(bundle, labeled, seed)
            reports.append(report)
            rows.append(_report_row(report, features=features,
                                    positions=use_positions, seed=seed))
        summary[key] = summarize(reports)
    return _guarded(setup, {
        "protocol": "tokenizer_ablation",
        "seeds": list(setup.seeds),
        "rows": rows,
        "summary": summary,
        "test_split_hash": before,
    })


# ---------------------------------------------------------------------------
# Temporal protocol
# ---------------------------------------------------------------------------

def procedure_features(bundle: ClassifierBundle, dataset: SceneDataset,
                       procedure_id: int, batch_size: int = 32,
                       ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pooled clip features of one procedure in timeline order: (L, D), (L,)."""
    n = dataset.procedures[procedure_id].num_clips
    addresses = [ClipAddress(procedure_id, i) for i in range(n)]
    feats = []
    labels = []
    bundle.eval()
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            batch = collate(dataset, addresses[lo:lo + batch_size])
            feats.append(bundle.pooled_features(batch))
            labels.append(batch["labels"])
    bundle.train()
    return torch.cat(feats), torch.cat(labels)


def bigru_temporal(setup: ProtocolSetup, bundle: ClassifierBundle,
                   hidden_dim: int = 128, epochs: int = 30,
                   learning_rate: float = 1e-3, seed: int = 0) -> dict:
    """Train a temporal model over frozen per-clip features; compare levels.

    The finetuned bundle provides features and the clip-level baseline;
    the recurrent model is trained on whole training procedures and
    evaluated per clip on the held-out procedures.
    """
    before = split_hash(setup.test_addresses())
    train_seqs = [procedure_features(bundle, setup.dataset, pid)
                  for pid in setup.dataset.splits["train"]]
    test_seqs = [procedure_features(bundle, setup.dataset, pid)
                 for pid in setup.dataset.splits[setup.eval_split]]
    input_dim = train_seqs[0][0].shape[1]

    torch.manual_seed(seed)
    model = TemporalModel(input_dim, hidden_dim, setup.num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    order_rng = np.random.default_rng([seed, 0xB1])
    for _ in range(epochs):
        for i in order_rng.permutation(len(train_seqs)):
            feats, labels = train_seqs[i]
            optimizer.zero_grad()
            logits = model(feats.unsqueeze(0))[0]
            loss = F.cross_entropy(logits, labels)
            loss.backward()
            optimizer.step()

    model.eval()
    scores = []
    labels_all = []
    with torch.no_grad():
        for feats, labels in test_seqs:
            scores.append(model(feats.unsqueeze(0))[0].double().numpy())
            labels_all.append(labels.numpy())
    temporal_report = evaluate_scores(np.concatenate(scores),
                                      np.concatenate(labels_all),
                                      setup.num_classes)
    clip_report = evaluate_bundle(bundle, setup.dataset,
                                  setup.test_addresses(), setup.num_classes)
    return _guarded(setup, {
        "protocol": "temporal",
        "seed": seed,
        "rows": [_report_row(temporal_report, level="temporal"),
                 _report_row(clip_report, level="clip")],
        "temporal_accuracy": temporal_report.accuracy,
        "clip_accuracy": clip_report.accuracy,
        "gain_points": 100.0 * (temporal_report.accuracy
                                - clip_report.accuracy),
        "test_split_hash": before,
    })
