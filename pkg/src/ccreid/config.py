"""Configuration tree for the whole pipeline.

One dataclass per config section; the JSON config file mirrors the section
names (dataset, backbone, cdn, psa, losses, trainer, evaluator). Unknown keys
are rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class DatasetConfig:
    num_ids: int = 8
    clothes_per_id: int = 2
    images_per_combo: int = 16
    image_height: int = 64
    image_width: int = 64
    num_cameras: int = 3
    palette_size: int = 4
    hue_jitter: float = 0.35  # per-image outfit hue spread, in turns
    min_color_distance: float = 60.0


@dataclass
class BackboneConfig:
    out_height: int = 7
    out_width: int = 7
    out_channels: int = 64  # descriptor channels of the feature map
    norm_mean: float = 0.5
    norm_std: float = 0.5
    pretrained_weights_path: str | None = None

    def validate(self) -> None:
        if self.out_channels < 8:
            raise ValueError("backbone.out_channels must be >= 8 "
                             "(eight parallel capsule projections need it)")
        if self.out_height < 2 or self.out_width < 2:
            raise ValueError("backbone output grid must be at least 2x2")


@dataclass
class CapsuleConfig:
    """Clothing-desensitization head (config section "cdn")."""

    j_out: int = 64          # output capsules per branch (1024 at full scale)
    d_out: int = 8           # output capsule dimension (24 at full scale)
    d_id: int = 8            # identity capsule dimension
    conv_channels: int = 32  # channels of each of the 8 parallel convolutions
    routing_iters: int = 1   # 1 = static learned coupling, no refinement
    squash_output: bool = True
    coupling: str = "per_input"  # "per_input" or "per_pair"
    share_across_branches: bool = False
    share_w_channel_groups: bool = False  # tie W within each conv channel group

    def validate(self) -> None:
        if self.coupling not in ("per_input", "per_pair"):
            raise ValueError(f"unknown coupling mode {self.coupling!r}")
        if self.routing_iters < 1:
            raise ValueError("cdn.routing_iters must be >= 1")


@dataclass
class PartHeadConfig:
    """Part-alignment head (config section "psa")."""

    hidden_channels: int = 256
    num_classes: int = 8   # part classes including background
    out_size: int = 14


@dataclass
class LossConfig:
    lambda1: float = 0.8
    lambda2: float = 0.1
    lambda3: float = 0.1
    margin_mode: str = "fixed"  # "fixed" or "class_count"
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_neg: float = 0.5
    alpha: float = 0.3
    distance: str = "euclidean"  # "euclidean" or "cosine"

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.margin_mode not in ("fixed", "class_count"):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.margin_mode == "fixed" and not (0.0 < self.m_minus < self.m_plus):
            raise ValueError("fixed margin mode needs 0 < m_minus < m_plus")
        if self.alpha < 0:
            raise ValueError("triplet margin alpha must be >= 0")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")


ABLATION_FLAGS = ("mgr", "cdn", "psa")


@dataclass
class TrainConfig:
    epochs: int = 80
    p: int = 5
    k: int = 4
    base_lr: float = 1e-3
    backbone_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [40, 60])
    seed: int = 0
    ablation: list[str] = field(default_factory=lambda: ["mgr", "cdn", "psa"])
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    precision: str = "float64"  # float64 keeps finite-difference checks exact

    def validate(self) -> None:
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError("trainer.lr_decay_epochs must be strictly increasing")
        if self.lr_decay_epochs and self.lr_decay_epochs[-1] >= self.epochs:
            raise ValueError("trainer.lr_decay_epochs must all be < epochs")
        bad = set(self.ablation) - set(ABLATION_FLAGS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}; "
                             f"valid flags are {list(ABLATION_FLAGS)}")
        if "psa" in self.ablation and "cdn" not in self.ablation:
            raise ValueError("ablation flag 'psa' requires 'cdn' "
                             "(the semantic capsule has no consumer otherwise)")
        if self.p < 1 or self.k < 1:
            raise ValueError("P and K must be positive")


@dataclass
class EvalConfig:
    exclude_same_camera_same_id: bool = True
    cloth_change_only: bool = False
    max_rank: int = 20
    batch_size: int = 32


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cdn: CapsuleConfig = field(default_factory=CapsuleConfig)
    psa: PartHeadConfig = field(default_factory=PartHeadConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    evaluator: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.cdn.validate()
        self.losses.validate()
        self.trainer.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {
    "dataset": DatasetConfig,
    "backbone": BackboneConfig,
    "cdn": CapsuleConfig,
    "psa": PartHeadConfig,
    "losses": LossConfig,
    "trainer": TrainConfig,
    "evaluator": EvalConfig,
}


def _build_section(cls, data: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config key(s) in section '{section}': "
                         f"{sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    """Build a validated RunConfig from a plain (JSON-loaded) dict."""
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, data.get(name, {}), name)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return json.loads(raw) if raw.startswith("[") else [
            type(current[0])(x) if current else x for x in raw.split(",") if x
        ]
    return raw


def apply_override(config: RunConfig, dotted_key: str, raw_value: str) -> None:
    """Apply one 'section.key=value' override in place."""
    if "." not in dotted_key:
        raise ValueError(f"override key {dotted_key!r} must look like section.key")
    section_name, key = dotted_key.split(".", 1)
    if section_name not in _SECTIONS:
        raise ValueError(f"unknown config section {section_name!r}")
    section = getattr(config, section_name)
    if not hasattr(section, key):
        raise ValueError(f"unknown config key {key!r} in section {section_name!r}")
    setattr(section, key, _coerce(raw_value, getattr(section, key)))


def default_key_listing() -> list[str]:
    """Flat 'section.key = default' lines for --help and docs."""
    lines = []
    for name, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING \
                else f.default_factory()
            lines.append(f"{name}.{f.name} = {default!r}")
    return lines
