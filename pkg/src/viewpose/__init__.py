"""Calibration-free multi-view video-pose pretraining on synthetic scenes.

The package is organized as a pipeline:

- :mod:`viewpose.scenegen` — deterministic synthetic multi-camera procedure
  generator with ground-truth 2D poses and activity labels.
- :mod:`viewpose.posetok` — VQ pose tokenizer (trained once, then frozen).
- :mod:`viewpose.encoders` — video and multi-view pose transformer encoders
  plus masking utilities and the masked-coordinate decoder.
- :mod:`viewpose.objectives` — contrastive/geometric/masked losses and the
  temporally stratified batch sampler.
- :mod:`viewpose.trainer` — pretraining and finetuning loops, checkpoints.
- :mod:`viewpose.downstream` — classification bundles, metrics, and the
  experiment protocols (data efficiency, view ablations, unimodal transfer).
- :mod:`viewpose.cli` — the ``viewpose`` command-line pipeline.
"""

from viewpose.config import ConfigError, ExperimentConfig
from viewpose.downstream import (
    ClassifierBundle,
    MetricsReport,
    PoolingSpec,
    ProtocolSetup,
    pool_embeddings,
    stratified_fraction,
)
from viewpose.encoders import (
    EmbeddingSet,
    MaskedPoseDecoder,
    PoseEncoderConfig,
    PoseSequenceEncoder,
    VideoEncoder,
    VideoEncoderConfig,
    apply_mask,
)
from viewpose.objectives import (
    ClipAddress,
    LossConfig,
    LossReport,
    SegmentSampler,
    align_total,
    contrastive_total,
    cross_geo,
    in_geo,
    info_nce,
    loss_report,
    masked_pose_loss,
)
from viewpose.posetok import (
    PoseTokenizer,
    TokenizerConfig,
    load_tokenizer,
    poses_from_dataset,
    save_tokenizer,
    train_tokenizer,
)
from viewpose.scenegen import (
    MultiViewClip,
    ProcedureManifest,
    SceneConfig,
    SceneDataset,
    build_dataset,
    generate_procedure,
    load_dataset,
    serialize_dataset,
)
from viewpose.trainer import (
    PretrainModel,
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierBundle",
    "ClipAddress",
    "ConfigError",
    "EmbeddingSet",
    "ExperimentConfig",
    "LossConfig",
    "LossReport",
    "MaskedPoseDecoder",
    "MetricsReport",
    "MultiViewClip",
    "PoolingSpec",
    "PoseEncoderConfig",
    "PoseSequenceEncoder",
    "PoseTokenizer",
    "PretrainModel",
    "ProcedureManifest",
    "ProtocolSetup",
    "SceneConfig",
    "SceneDataset",
    "SegmentSampler",
    "TokenizerConfig",
    "TrainConfig",
    "VideoEncoder",
    "VideoEncoderConfig",
    "align_total",
    "apply_mask",
    "build_dataset",
    "contrastive_total",
    "cross_geo",
    "finetune",
    "generate_procedure",
    "in_geo",
    "info_nce",
    "load_checkpoint",
    "load_dataset",
    "load_tokenizer",
    "loss_report",
    "masked_pose_loss",
    "pool_embeddings",
    "pose_from_dataset" if False else "poses_from_dataset",
    "pretrain",
    "save_checkpoint",
    "save_tokenizer",
    "serialize_dataset",
    "stratified_fraction",
    "train_tokenizer",
]
