"""Backbone classifiers with a single-logit head and attribution hooks.

Every model is split into ``features`` (ending at the last convolutional
feature map) and ``head`` (global average pool + linear).  Attribution
reads the feature map directly, so no module hooks are registered.
"""
from __future__ import annotations

import io
import os
import tempfile
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cohort import Label


class BackboneKind(str, Enum):
    DENSENET121 = "densenet121"
    EFFICIENTNET_B0 = "efficientnet_b0"
    RESNET50 = "resnet50"
    TINYCONV = "tinyconv"


class Pretrained(str, Enum):
    IMAGENET = "imagenet"
    NONE = "none"


class PretrainedWeightsUnavailable(RuntimeError):
    pass


# reported sizes, compared in whole millions by parameter_report
REPORTED_PARAM_COUNTS = {
    BackboneKind.DENSENET121: 8_000_000,
    BackboneKind.EFFICIENTNET_B0: 11_000_000,
    BackboneKind.RESNET50: 23_000_000,
}

# which tensor Grad-CAM reads, per backbone
LAST_CONV_LAYER = {
    BackboneKind.DENSENET121: "features.denseblock4 -> norm5 -> relu (1024 x H/32 x W/32)",
    BackboneKind.EFFICIENTNET_B0: "features.8 (Conv2dNormActivation, 1280 x H/32 x W/32)",
    BackboneKind.RESNET50: "layer4 (2048 x H/32 x W/32)",
    BackboneKind.TINYCONV: "conv2 -> SiLU (8 x H x W)",
}


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneKind = BackboneKind.RESNET50
    pretrained: Pretrained | None = None
    input_size: tuple[int, int] = (224, 224)
    weights_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "backbone", BackboneKind(self.backbone))
        pre = self.pretrained
        if pre is None:
            pre = Pretrained.NONE if self.backbone is BackboneKind.TINYCONV else Pretrained.IMAGENET
        object.__setattr__(self, "pretrained", Pretrained(pre))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        h, w = self.input_size
        if self.backbone is BackboneKind.TINYCONV:
            if h < 8 or w < 8:
                raise ValueError(f"tinyconv input must be at least 8x8, got {self.input_size}")
            if self.pretrained is Pretrained.IMAGENET:
                raise ValueError("tinyconv has no pretrained weights")
        elif h % 32 or w % 32:
            raise ValueError(f"{self.backbone.value} input size must be a multiple of 32, got {self.input_size}")

    @property
    def in_channels(self) -> int:
        return 1 if self.backbone is BackboneKind.TINYCONV else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        d["pretrained"] = self.pretrained.value
        d["input_size"] = list(self.input_size)
        return d


class BinaryHead(nn.Module):
    def __init__(self, in_channels: int, dropout: float = 0.0):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.fc = nn.Linear(in_channels, 1)

    def forward(self, fmap):
        return self.fc(self.dropout(torch.flatten(self.pool(fmap), 1)))


class Model(nn.Module):
    """Binary classifier: ``forward`` returns one logit per image (P(ReducedEF) after sigmoid)."""

    def __init__(self, features: nn.Module, head: nn.Module, config: ModelConfig | None = None,
                 input_shape: tuple[int, int, int] | None = None):
        super().__init__()
        self.features = features
        self.head = head
        self.config = config
        if input_shape is None and config is not None:
            input_shape = (config.in_channels, *config.input_size)
        self.input_shape = input_shape

    def forward(self, x):
        return self.head(self.features(x)).reshape(-1)

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return torch.get_default_dtype()

    def as_batch(self, images) -> torch.Tensor:
        """Convert (N, H, W, C) arrays / lists of images to an NCHW tensor, checking shape."""
        if isinstance(images, torch.Tensor):
            x = images
        else:
            arr = np.asarray(images if not isinstance(images, list) else np.stack(images))
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4:
                raise ValueError(f"expected a batch of (H, W, C) images, got shape {arr.shape}")
            x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
        x = x.to(self.dtype)
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"input shape mismatch: expected (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {tuple(x.shape)}")
        return x

    def predict_proba(self, images) -> np.ndarray:
        """P(ReducedEF) per image, in input order; evaluation mode."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits = self(self.as_batch(images))
        finally:
            self.train(was_training)
        return torch.sigmoid(logits.double()).numpy()

    # -- attribution interface ---------------------------------------------------

    @staticmethod
    def target_score(logits, target_class: Label):
        # log-odds of the target class: +z for ReducedEF, -z for PreservedEF
        return logits if Label(target_class) is Label.REDUCED else -logits

    def input_gradient(self, images, target_class: Label = Label.REDUCED) -> np.ndarray:
        """d(target logit)/d(input), shape (N, H, W, C)."""
        x = self.as_batch(images).detach().requires_grad_(True)
        score = self.target_score(self(x), target_class).sum()
        (grad,) = torch.autograd.grad(score, x)
        return grad.detach().permute(0, 2, 3, 1).numpy()

    def last_conv_activations(self, images) -> np.ndarray:
        with torch.no_grad():
            return self.features(self.as_batch(images)).numpy()

    def last_conv_gradients(self, images, target_class: Label = Label.REDUCED):
        """(activations, d(target logit)/d(activations)), each (N, K, h, w)."""
        x = self.as_batch(images)
        fmap = self.features(x)
        fmap_leaf = fmap.detach().requires_grad_(True)
        score = self.target_score(self.head(fmap_leaf).reshape(-1), target_class).sum()
        (grad,) = torch.autograd.grad(score, fmap_leaf)
        return fmap.detach().numpy(), grad.detach().numpy()


def tinyconv_features() -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(1, 4, kernel_size=3, padding=1),
        nn.SiLU(),
        nn.Conv2d(4, 8, kernel_size=3, padding=1),
        nn.SiLU(),
    )


def _torchvision_backbone(kind: BackboneKind, config: ModelConfig):
    from torchvision import models as tvm

    builders = {
        BackboneKind.DENSENET121: (tvm.densenet121, tvm.DenseNet121_Weights.IMAGENET1K_V1),
        BackboneKind.EFFICIENTNET_B0: (tvm.efficientnet_b0, tvm.EfficientNet_B0_Weights.IMAGENET1K_V1),
        BackboneKind.RESNET50: (tvm.resnet50, tvm.ResNet50_Weights.IMAGENET1K_V1),
    }
    builder, weights = builders[kind]
    net = builder(weights=None)
    if config.pretrained is Pretrained.IMAGENET:
        if config.weights_path:
            try:
                state = torch.load(config.weights_path, map_location="cpu", weights_only=True)
            except (OSError, RuntimeError) as exc:
                raise PretrainedWeightsUnavailable(
                    f"cannot read ImageNet weights from {config.weights_path}: {exc}") from exc
        else:
            try:
                state = weights.get_state_dict(progress=False)
            except Exception as exc:  # network / cache failures surface in many forms
                raise PretrainedWeightsUnavailable(
                    f"ImageNet weights for {kind.value} could not be fetched ({exc}); "
                    "supply model.weights_path or use pretrained: none") from exc
        net.load_state_dict(state)

    if kind is BackboneKind.RESNET50:
        features = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                 net.layer1, net.layer2, net.layer3, net.layer4)
        return features, 2048, 0.0
    if kind is BackboneKind.DENSENET121:
        return nn.Sequential(net.features, nn.ReLU(inplace=False)), 1024, 0.0
    return net.features, 1280, 0.2


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Build the backbone with a fresh single-logit head (training mode).

    Head (and, without pretraining, stem) initialisation is seeded by
    ``seed`` without touching the global torch RNG.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.backbone is BackboneKind.TINYCONV:
            features, width, dropout = tinyconv_features(), 8, 0.0
        else:
            features, width, dropout = _torchvision_backbone(config.backbone, config)
        head = BinaryHead(width, dropout)
    model = Model(features, head, config)
    model.train()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def tinyconv_closed_form() -> int:
    """conv(1->4, 3x3) + conv(4->8, 3x3) + linear(8->1), weights plus biases."""
    return 4 * (1 * 9 + 1) + 8 * (4 * 9 + 1) + (8 + 1)


@dataclass
class ParameterReport:
    backbone: BackboneKind
    count: int
    reported_count: int | None
    discrepancy: bool

    def describe(self) -> str:
        text = f"{self.backbone.value}: {self.count:,} parameters"
        if self.reported_count is not None:
            text += f" (reported {self.reported_count / 1e6:g}M)"
            if self.discrepancy:
                text += " [DISCREPANCY: canonical architecture differs from the reported count]"
        return text


def parameter_report(model: Model) -> ParameterReport:
    """Count parameters and compare, in whole millions, with the reported figure."""
    kind = model.config.backbone
    count = count_parameters(model)
    reported = REPORTED_PARAM_COUNTS.get(kind)
    discrepancy = reported is not None and round(count / 1e6) != round(reported / 1e6)
    return ParameterReport(kind, count, reported, discrepancy)


def predict_proba(model: Model, images) -> np.ndarray:
    return model.predict_proba(images)


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_FORMAT = "cxr_ef.checkpoint/1"


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: Model, train_state: dict | None = None) -> bytes:
    buf = io.BytesIO()
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "train_state": train_state or {},
    }, buf)
    return buf.getvalue()


def save_checkpoint(path, model: Model, train_state: dict | None = None) -> Path:
    """Write config + weights + training state atomically (temp file, then rename)."""
    path = Path(path)
    _atomic_write(path, checkpoint_bytes(model, train_state))
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = dict(blob["config"])
    # weights come from the checkpoint, never from the network
    config = ModelConfig(backbone=cfg["backbone"], pretrained=Pretrained.NONE,
                         input_size=tuple(cfg["input_size"]), weights_path=None)
    model = build_model(config)
    model.load_state_dict(blob["state_dict"])
    model.config = ModelConfig(backbone=cfg["backbone"], pretrained=cfg["pretrained"],
                               input_size=tuple(cfg["input_size"]), weights_path=cfg.get("weights_path"))
    model.eval()
    return model, blob["train_state"]
