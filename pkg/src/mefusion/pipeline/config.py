"""Run configuration: model, training, presets and ablation switches.

A config file is YAML with up to four top-level keys::

    profile: paper          # preset the rest of the file overrides (paper | desk)
    seed: 0
    model:
      dgm: {base_channels: 16, depth: 4, alpha: 0.2, normalize: true, input_downsample: 1}
      fusion: {embed_dim: 256, heads: 8, attn_depth: 2, mlp_ratio: 4.0,
               patch_size: 18, region_size: 90, fusion_variant: before, positional: true}
      regions: au           # au | grid3x3
      dynamic_source: dgm   # dgm | flow | flow_norm | dynamic_image
      use_local: true
      use_global: true
      use_fullface: true
      geometry: null        # path to an AU geometry YAML; null = shipped default
    train:
      batch_size: 32
      dgm_lr: 0.002
      fusion_lr: 0.002
      epochs: 30
      cls_grad_scale: 1.0e-6
      loss_weights: {rec: 10.0, nm: 1.0, sm: 0.2}
      self_supervised: true
      ss_pairs: null        # self-supervised pairs per step; null = batch_size
      apex_jitter: true
      precision: 32         # 32 | 64

Unknown keys are rejected.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from ..core import UsageError
from ..dgm import DGMConfig, DgmLossWeights
from ..fusion import FusionConfig

DYNAMIC_SOURCES = ("dgm", "flow", "flow_norm", "dynamic_image")
REGION_MODES = ("au", "grid3x3")


@dataclass
class ModelConfig:
    dgm: DGMConfig = field(default_factory=DGMConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    regions: str = "au"
    dynamic_source: str = "dgm"
    use_local: bool = True
    use_global: bool = True
    use_fullface: bool = True
    geometry: Optional[str] = None

    def __post_init__(self):
        if self.regions not in REGION_MODES:
            raise UsageError(f"regions must be one of {REGION_MODES}, got {self.regions!r}")
        if self.dynamic_source not in DYNAMIC_SOURCES:
            raise UsageError(f"dynamic_source must be one of {DYNAMIC_SOURCES}, got {self.dynamic_source!r}")
        self.fusion.in_channels = 2 * self.dgm.image_channels + self.dynamic_channels

    @property
    def dynamic_channels(self) -> int:
        return 1 if self.dynamic_source == "dynamic_image" else 2


@dataclass
class TrainConfig:
    batch_size: int = 32
    dgm_lr: float = 0.002
    fusion_lr: float = 0.002
    epochs: int = 30
    cls_grad_scale: float = 1e-6
    loss_weights: DgmLossWeights = field(default_factory=DgmLossWeights)
    self_supervised: bool = True
    ss_pairs: Optional[int] = None
    apex_jitter: bool = True
    precision: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        if self.cls_grad_scale < 0:
            raise UsageError("cls_grad_scale must be non-negative")
        if self.precision not in (32, 64):
            raise UsageError("precision must be 32 or 64")
        if self.epochs < 0:
            raise UsageError("epochs must be non-negative")

    @property
    def pairs_per_step(self) -> int:
        return self.batch_size if self.ss_pairs is None else self.ss_pairs


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    profile: str = "paper"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["fusion"].pop("in_channels")
        d["model"]["fusion"].pop("num_classes")
        d["model"]["dgm"].pop("channels")
        d["model"]["dgm"].pop("norm_floor")
        return d


# ------------------------------------------------------------------ presets
PAPER = {}

# Reduced widths so a ten-fold LOSO run fits in about ten minutes on one CPU
# core; the generator sees quarter-resolution frames.
DESK = {
    "model": {
        "dgm": {"base_channels": 8, "input_downsample": 4},
        "fusion": {"embed_dim": 64, "heads": 4, "attn_depth": 1, "mlp_ratio": 2.0,
                   "patch_size": 12, "region_size": 36},
    },
    "train": {"epochs": 12},
}

PROFILES = {"paper": PAPER, "desk": DESK}

# Structural variants of the ablation table; M9 is the full model.
ABLATIONS = {
    "M0": {"model": {"dynamic_source": "flow"}},
    "M1": {"model": {"dynamic_source": "flow_norm"}},
    "M2": {"model": {"dynamic_source": "dynamic_image"}},
    "M3": {"train": {"self_supervised": False}},
    "M4": {"model": {"fusion": {"fusion_variant": "after"}}},
    "M5": {"model": {"regions": "grid3x3"}},
    "M6": {"model": {"use_fullface": False}},
    "M7": {"model": {"use_local": False}},
    "M8": {"model": {"use_global": False}},
    "M9": {},
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(cls, data: dict, where: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {"profile", "seed", "model", "train"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    profile = data.pop("profile", "paper")
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    data = merge(PROFILES[profile], data)
    model = dict(data.get("model") or {})
    dgm = _build(DGMConfig, model.pop("dgm", None), "model.dgm")
    fusion = _build(FusionConfig, model.pop("fusion", None), "model.fusion")
    model_cfg = _build(ModelConfig, {**model, "dgm": dgm, "fusion": fusion}, "model")
    train = dict(data.get("train") or {})
    weights = _build(DgmLossWeights, train.pop("loss_weights", None), "train.loss_weights")
    train_cfg = _build(TrainConfig, {**train, "loss_weights": weights}, "train")
    return RunConfig(model=model_cfg, train=train_cfg, seed=int(data.get("seed", 0)), profile=profile)


def load_config(path=None, overrides: dict = None) -> RunConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a mapping")
    return from_dict(merge(data, overrides or {}))


def ablation_overrides(name: str) -> dict:
    key = name.upper()
    if key not in ABLATIONS:
        raise UsageError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return ABLATIONS[key]
