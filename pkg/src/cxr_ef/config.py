"""Declarative run configuration (YAML), parsed fail-closed.

Unknown keys and invalid values raise :class:`ConfigError` before any
stage touches the filesystem.  The defaults describe the desk-scale
synthetic/TinyConv profile; ``configs/resnet50_full.yaml`` carries the
full-scale recipe (lr 1e-3, batch 32, 50 epochs).
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cohort import DEFAULT_FRACTIONS
from .evaluation import FACETS
from .explain import Method
from .imaging import AugmentationPolicy
from .models import BackboneKind, ModelConfig, Pretrained
from .training import TrainConfig

OUTPUT_ROOT_ENV = "CXR_EF_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSection:
    n: int = 200
    class_signal: float = 1.0
    seed: int = 7
    image_size: int = 64


@dataclass
class CohortSection:
    source: str = "synthetic"
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    metadata_path: str | None = None
    icd_map_path: str | None = None
    image_root: str | None = None


@dataclass
class SplitSection:
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    seed: int = 0


@dataclass
class ModelSection:
    backbone: str = "tinyconv"
    pretrained: str | None = None
    input_size: list[int] = field(default_factory=lambda: [64, 64])
    weights_path: str | None = None


@dataclass
class AugmentationSection:
    rotation_max_deg: float = 10.0
    crop_scale_min: float = 0.75
    crop_scale_max: float = 1.0
    rotation_enabled: bool = True
    crop_enabled: bool = True


@dataclass
class TrainSection:
    # TinyConv desk profile; the full-scale recipe (lr 0.001, batch 32) is in configs/resnet50_full.yaml
    initial_lr: float = 0.01
    plateau_patience: int = 5
    lr_factor: float = 0.1
    max_epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)


@dataclass
class EvaluationSection:
    split: str = "test"
    hi_threshold: float = 0.9
    lo_threshold: float = 0.1
    subgroups: list[str] = field(default_factory=lambda: ["race", "sex"])
    min_support: int = 5


@dataclass
class ExplainSection:
    k: int = 6
    alpha: float = 0.5
    methods: list[str] = field(default_factory=lambda: ["saliency", "gradcam"])
    colormap: str = "inferno"
    target: str = "predicted"


@dataclass
class RunConfig:
    run_id: str = "synthetic-tinyconv"
    output_root: str | None = None
    cohort: CohortSection = field(default_factory=CohortSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    explain: ExplainSection = field(default_factory=ExplainSection)

    # -- derived domain objects ------------------------------------------------

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(backbone=m.backbone, pretrained=m.pretrained, input_size=tuple(m.input_size),
                           weights_path=m.weights_path)

    def augmentation_policy(self, enabled: bool = True) -> AugmentationPolicy:
        policy = AugmentationPolicy(**dataclasses.asdict(self.train.augmentation))
        return policy if enabled else dataclasses.replace(policy, rotation_enabled=False, crop_enabled=False)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(initial_lr=t.initial_lr, plateau_patience=t.plateau_patience, lr_factor=t.lr_factor,
                           max_epochs=t.max_epochs, batch_size=t.batch_size, seed=t.seed,
                           augmentation=self.augmentation_policy())

    def output_dir(self) -> Path:
        root = self.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "out"
        return Path(root) / self.run_id

    # -- validation / serialisation ------------------------------------------------

    def validate(self) -> "RunConfig":
        try:
            if not self.run_id or "/" in self.run_id or self.run_id in (".", ".."):
                raise ValueError(f"run_id must be a plain directory name, got {self.run_id!r}")
            c = self.cohort
            if c.source not in ("synthetic", "metadata"):
                raise ValueError(f"cohort.source must be 'synthetic' or 'metadata', got {c.source!r}")
            if c.source == "synthetic":
                if c.synthetic.n < 10:
                    raise ValueError(f"cohort.synthetic.n must be >= 10, got {c.synthetic.n}")
                if not 0.0 <= c.synthetic.class_signal <= 1.0:
                    raise ValueError("cohort.synthetic.class_signal must lie in [0, 1]")
                if c.synthetic.image_size < 8:
                    raise ValueError("cohort.synthetic.image_size must be >= 8")
            if len(self.split.fractions) != 3 or any(f < 0 for f in self.split.fractions):
                raise ValueError("split.fractions must be three non-negative numbers (train, val, test)")
            if abs(sum(self.split.fractions) - 1.0) > 1e-9:
                raise ValueError(f"split.fractions must sum to 1, got {sum(self.split.fractions)!r}")
            if len(self.model.input_size) != 2:
                raise ValueError("model.input_size must be [height, width]")
            BackboneKind(self.model.backbone)
            if self.model.pretrained is not None:
                Pretrained(self.model.pretrained)
            self.model_config()
            self.train_config()
            e = self.evaluation
            if e.split not in ("train", "val", "test"):
                raise ValueError(f"evaluation.split must be train, val or test, got {e.split!r}")
            if not 0.0 < e.lo_threshold < e.hi_threshold < 1.0:
                raise ValueError("evaluation thresholds must satisfy 0 < lo_threshold < hi_threshold < 1")
            for facet in e.subgroups:
                if facet not in FACETS:
                    raise ValueError(f"evaluation.subgroups entries must be in {FACETS}, got {facet!r}")
            if e.min_support < 1:
                raise ValueError("evaluation.min_support must be >= 1")
            x = self.explain
            if x.k < 1:
                raise ValueError("explain.k must be >= 1")
            if not 0.0 <= x.alpha <= 1.0:
                raise ValueError("explain.alpha must lie in [0, 1]")
            for m in x.methods:
                Method(m)
            if x.target not in ("predicted", "reduced", "preserved"):
                raise ValueError("explain.target must be predicted, reduced or preserved")
            from matplotlib import colormaps
            if x.colormap not in colormaps:
                raise ValueError(f"unknown colormap {x.colormap!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        return _build(cls, data or {}, "").validate()

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config must be a mapping at top level")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.loads(path.read_text(encoding="utf-8"))


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, prefix + name)
    return cls(**kwargs)


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key + ".")
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", typing.Union)):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, key)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        return [_coerce(args[0], v, f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported config type {tp}")
