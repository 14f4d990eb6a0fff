"""Vanilla-gradient saliency, Grad-CAM, overlays and error-case selection.

Both attribution methods differentiate the target-class logit (log-odds),
not the loss.  For a fixed truth the BCE gradient is a positive multiple
of the logit gradient, so normalized maps agree; the logit keeps maps
independent of the label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .cohort import Label
from .evaluation import PredictionRecord

DEFAULT_COLORMAP = "inferno"


class Method(str, Enum):
    SALIENCY = "saliency"
    GRADCAM = "gradcam"


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionMap:
    data: np.ndarray          # (H, W), min-max normalized to [0, 1]
    raw: np.ndarray           # (H, W), before normalization
    method: Method
    target_class: Label
    degenerate: bool
    coarse: np.ndarray | None = None  # Grad-CAM map at feature-map resolution

    def sidecar(self, study_id: str | None = None) -> dict:
        return {"method": self.method.value, "target_class": self.target_class.value,
                "degenerate": self.degenerate, "study_id": study_id}


def _normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        # constant map carries no localisation; all-zero is the only constant
        # a rectified/absolute map reaches in practice
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def _single(model, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected one (H, W, C) image, got shape {image.shape}")
    return image[None]


def saliency_map(model, image: np.ndarray, target_class: Label = Label.REDUCED) -> AttributionMap:
    """|d logit / d pixel|, max over channels, min-max normalized."""
    was_training = model.training
    model.eval()
    try:
        grad = model.input_gradient(_single(model, image), target_class)[0]
    finally:
        model.train(was_training)
    if not np.all(np.isfinite(grad)):
        raise AttributionError(f"non-finite input gradient ({int((~np.isfinite(grad)).sum())} entries)")
    raw = np.abs(grad).max(axis=2).astype(np.float64)
    data, degenerate = _normalize(raw)
    return AttributionMap(data, raw, Method.SALIENCY, Label(target_class), degenerate)


def grad_cam(model, image: np.ndarray, target_class: Label = Label.REDUCED) -> AttributionMap:
    """ReLU(sum_k mean(dlogit/dA_k) * A_k), bilinearly upsampled, min-max normalized."""
    if not hasattr(model, "last_conv_gradients"):
        raise AttributionError(f"{type(model).__name__} exposes no last convolutional layer")
    was_training = model.training
    model.eval()
    try:
        acts, grads = model.last_conv_gradients(_single(model, image), target_class)
    finally:
        model.train(was_training)
    acts = acts[0].astype(np.float64)
    grads = grads[0].astype(np.float64)
    if acts.ndim != 3:
        raise AttributionError(f"last conv output must be (K, h, w), got {acts.shape}")
    if not np.all(np.isfinite(grads)):
        raise AttributionError("non-finite gradient at the last convolutional layer")
    weights = grads.mean(axis=(1, 2))
    coarse = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    h, w = np.asarray(image).shape[:2]
    raw = kernels.resize_bilinear(coarse, (h, w)) if coarse.shape != (h, w) else coarse.copy()
    raw = np.maximum(raw, 0.0)
    data, degenerate = _normalize(raw)
    return AttributionMap(data, raw, Method.GRADCAM, Label(target_class), degenerate, coarse=coarse)


ATTRIBUTION_METHODS = {Method.SALIENCY: saliency_map, Method.GRADCAM: grad_cam}


# -- rendering ---------------------------------------------------------------------------

def colormap(values: np.ndarray, name: str = DEFAULT_COLORMAP) -> np.ndarray:
    """Map [0, 1] values to RGB floats via a named matplotlib colormap."""
    from matplotlib import colormaps

    return colormaps[name](np.clip(values, 0.0, 1.0))[..., :3].astype(np.float64)


def to_gray_rgb(image: np.ndarray) -> np.ndarray:
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    return np.repeat(gray[:, :, None], 3, axis=2)


def overlay(image: np.ndarray, amap: AttributionMap, alpha: float = 0.5,
            cmap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """Three panels side by side: original, colormapped map, alpha blend.

    A degenerate map has nothing to highlight, so its blend panel is the
    original image.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    image = np.asarray(image)
    if image.shape[:2] != amap.data.shape:
        raise ValueError(f"image {image.shape[:2]} and map {amap.data.shape} differ in size")
    gray = to_gray_rgb(image)
    heat = colormap(amap.data, cmap)
    blend = gray.copy() if amap.degenerate else (1.0 - alpha) * gray + alpha * heat
    return np.concatenate([gray, heat, blend], axis=1)


def write_map_png(amap: AttributionMap, path, study_id: str | None = None) -> Path:
    """16-bit grayscale PNG of the normalized map plus a JSON sidecar."""
    from PIL import Image as PILImage

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(amap.data * 65535.0).astype(np.uint16)
    PILImage.fromarray(pixels).save(path)
    path.with_suffix(".json").write_text(json.dumps(amap.sidecar(study_id), sort_keys=True) + "\n",
                                         encoding="utf-8")
    return path


def write_composite_png(panels: np.ndarray, path) -> Path:
    from PIL import Image as PILImage

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.round(np.clip(panels, 0, 1) * 255.0).astype(np.uint8), mode="RGB").save(path)
    return path


# -- case selection ------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorCaseSelection:
    correct: list[str]
    false_positive: list[str]
    false_negative: list[str]
    k: int

    def groups(self) -> dict[str, list[str]]:
        return {"correct": self.correct, "false_positive": self.false_positive,
                "false_negative": self.false_negative}

    def to_dict(self) -> dict:
        return {"k": self.k, **self.groups()}


def select_error_cases(preds: Iterable[PredictionRecord], k: int = 6) -> ErrorCaseSelection:
    """Up to ``k`` most confident cases (largest |p - 0.5|) per outcome group.

    Ties are broken by study_id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    groups: dict[str, list[PredictionRecord]] = {"correct": [], "fp": [], "fn": []}
    for p in preds:
        if p.correct:
            groups["correct"].append(p)
        elif p.predicted is Label.REDUCED:
            groups["fp"].append(p)
        else:
            groups["fn"].append(p)

    def top(items: Sequence[PredictionRecord]) -> list[str]:
        ranked = sorted(items, key=lambda p: (-abs(p.p_reduced - 0.5), p.study_id))
        return [p.study_id for p in ranked[:k]]

    return ErrorCaseSelection(top(groups["correct"]), top(groups["fp"]), top(groups["fn"]), k)
