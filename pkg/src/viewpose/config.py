"""Experiment configuration: one JSON document driving every stage.

The document mirrors the per-stage dataclasses section by section.  Every
field has a default, unknown keys are rejected by schema validation, and the
fully resolved configuration (all defaults applied, the root seed propagated
into sections that did not pin their own) is what run directories echo.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import jsonschema

from .encoders import PoseEncoderConfig, VideoEncoderConfig
from .objectives import LossConfig
from .posetok import TokenizerConfig
from .scenegen import SceneConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for schema violations or inconsistent cross-section settings."""


@dataclass(frozen=True)
class ModelConfig:
    """Shared encoder dimensions; per-branch depths."""

    embed_dim: int = 128
    num_heads: int = 4
    video_layers: int = 4
    pose_layers: int = 6
    mlp_ratio: float = 4.0
    cube: Tuple[int, int, int] = (2, 8, 8)
    decoder_layers: int = 1
    head_hidden: int = 128


@dataclass(frozen=True)
class ProtocolConfig:
    """Selectors shared by the downstream experiment protocols."""

    seeds: Tuple[int, ...] = (0, 1, 2)
    fractions: Tuple[float, ...] = (0.05, 0.10, 0.20, 0.50, 1.00)
    fraction: float = 1.0
    train_views: Tuple[int, ...] = (0, 1)
    test_view: int = 2
    view: int = 0
    temporal_hidden: int = 128
    temporal_epochs: int = 30


_SECTIONS = {
    "scene": SceneConfig,
    "tokenizer": TokenizerConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "pretrain": TrainConfig,
    "finetune": TrainConfig,
    "protocol": ProtocolConfig,
}

# dataclass fields holding tuples, which JSON necessarily spells as arrays
_TUPLE_FIELDS = {
    "scene": ("frame_size",),
    "model": ("cube",),
    "protocol": ("seeds", "fractions", "train_views"),
}


@dataclass
class ExperimentConfig:
    seed: int
    num_procedures: int
    scene: SceneConfig
    tokenizer: TokenizerConfig
    model: ModelConfig
    loss: LossConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    protocol: ProtocolConfig

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """Validate, apply defaults, propagate the root seed, cross-check."""
        raw = dict(raw or {})
        try:
            jsonschema.validate(raw, schema())
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {e.message}") from e

        seed = int(raw.get("seed", 0))
        sections: Dict[str, Any] = {}
        for name, dc_type in _SECTIONS.items():
            body = dict(raw.get(name, {}))
            for field_name in _TUPLE_FIELDS.get(name, ()):
                if field_name in body:
                    body[field_name] = tuple(body[field_name])
            if "seed" in _field_names(dc_type) and "seed" not in body:
                body["seed"] = seed
            if name == "pretrain":
                body.setdefault("phase", "pretrain")
            if name == "finetune":
                defaults = TrainConfig.finetune_defaults()
                for field in dataclasses.fields(TrainConfig):
                    body.setdefault(field.name, getattr(defaults, field.name))
            try:
                sections[name] = dc_type(**body)
            except ValueError as e:
                raise ConfigError(f"config section {name!r}: {e}") from e
        if "batch_size" not in raw.get("loss", {}):
            sections["loss"] = dataclasses.replace(
                sections["loss"], batch_size=sections["pretrain"].batch_size)
        config = cls(seed=seed,
                     num_procedures=int(raw.get("num_procedures", 24)),
                     **sections)
        config.validate()
        return config

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls.from_dict({})

    def validate(self) -> None:
        if self.num_procedures < 2:
            raise ConfigError("need at least two procedures to split")
        if self.tokenizer.output_dim != self.model.embed_dim:
            raise ConfigError(
                f"tokenizer output_dim {self.tokenizer.output_dim} must equal "
                f"model embed_dim {self.model.embed_dim}")
        if self.tokenizer.num_joints != self.scene.num_joints:
            raise ConfigError(
                f"tokenizer num_joints {self.tokenizer.num_joints} != scene "
                f"num_joints {self.scene.num_joints}")
        if self.loss.batch_size != self.pretrain.batch_size:
            raise ConfigError(
                f"loss batch_size {self.loss.batch_size} != pretrain "
                f"batch_size {self.pretrain.batch_size}")
        if self.pretrain.phase != "pretrain":
            raise ConfigError("pretrain section must have phase 'pretrain'")
        if self.finetune.phase != "finetune":
            raise ConfigError("finetune section must have phase 'finetune'")
        try:
            self.video_encoder_config()
            self.pose_encoder_config()
        except ValueError as e:
            raise ConfigError(f"model geometry: {e}") from e
        C = self.scene.num_views
        if self.protocol.test_view >= C or self.protocol.view >= C or \
                any(v >= C for v in self.protocol.train_views):
            raise ConfigError(f"protocol view indices exceed {C} views")

    # -- derived objects -----------------------------------------------------

    def video_encoder_config(self) -> VideoEncoderConfig:
        return VideoEncoderConfig(
            embed_dim=self.model.embed_dim, num_heads=self.model.num_heads,
            num_layers=self.model.video_layers,
            mlp_ratio=self.model.mlp_ratio, clip_len=self.scene.clip_len,
            frame_size=self.scene.frame_size, cube=self.model.cube)

    def pose_encoder_config(self) -> PoseEncoderConfig:
        return PoseEncoderConfig(
            embed_dim=self.model.embed_dim, num_heads=self.model.num_heads,
            num_layers=self.model.pose_layers,
            mlp_ratio=self.model.mlp_ratio, num_views=self.scene.num_views,
            max_persons=self.scene.max_persons,
            clip_len=self.scene.clip_len, num_joints=self.scene.num_joints)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed,
                               "num_procedures": self.num_procedures}
        for name in _SECTIONS:
            section = getattr(self, name)
            body = {}
            for field in dataclasses.fields(section):
                value = getattr(section, field.name)
                body[field.name] = list(value) if isinstance(value, tuple) \
                    else value
            out[name] = body
        return out


def _field_names(dc_type) -> Tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(dc_type))


def _value_schema(value: Any) -> Dict[str, Any]:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, tuple):
        return {"type": "array"}
    raise TypeError(f"no schema mapping for default {value!r}")


def _section_schema(dc_type) -> Dict[str, Any]:
    defaults = dc_type()
    props = {f.name: _value_schema(getattr(defaults, f.name))
             for f in dataclasses.fields(dc_type)}
    return {"type": "object", "properties": props,
            "additionalProperties": False}


def schema() -> Dict[str, Any]:
    """JSON schema of the experiment document; unknown keys rejected."""
    props: Dict[str, Any] = {
        "seed": {"type": "integer"},
        "num_procedures": {"type": "integer"},
    }
    for name, dc_type in _SECTIONS.items():
        props[name] = _section_schema(dc_type)
    return {"type": "object", "properties": props,
            "additionalProperties": False}
