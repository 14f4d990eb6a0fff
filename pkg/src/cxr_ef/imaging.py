"""Image loading, normalization and training-time augmentation.

Images are float64 numpy arrays of shape (H, W, C) with values in [0, 1].
Warping goes through :mod:`cxr_ef.kernels` (compiled when available).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

DEFAULT_INPUT_SIZE = (224, 224)


class ImageDecodeError(IOError):
    def __init__(self, ref, reason):
        super().__init__(f"cannot decode image {ref}: {reason}")
        self.ref = str(ref)


def validate_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got {image.shape[:2]}")
    return image


class RngStream:
    """Seeded random stream; equal seeds give equal draw sequences."""

    def __init__(self, seed):
        self.seed = seed
        self.draws = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    @classmethod
    def for_sample(cls, seed: int, study_id: str, epoch: int) -> "RngStream":
        """Per-sample stream keyed on ``(seed, study_id, epoch)``."""
        digest = hashlib.sha256(study_id.encode("utf-8")).digest()
        return cls([int(seed), int.from_bytes(digest[:8], "little"), int(epoch)])

    def uniform(self, low: float, high: float) -> float:
        self.draws += 1
        return float(self._gen.uniform(low, high))

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)


def load_and_normalize(image_ref, target_size=DEFAULT_INPUT_SIZE, channels: int = 3) -> np.ndarray:
    """Decode an 8-bit JPEG/PNG, divide by 255, resize bilinearly.

    Normalization happens before the resize.  Grayscale sources are
    replicated to 3 channels when ``channels == 3``; RGB sources are
    converted to luminance when ``channels == 1``.
    """
    from PIL import Image as PILImage, UnidentifiedImageError

    th, tw = (int(v) for v in target_size)
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must have positive area, got {target_size}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    path = Path(image_ref)
    try:
        with PILImage.open(path) as pil:
            pil.load()
            if pil.mode not in ("L", "RGB"):
                if pil.mode in ("I;16", "I", "F"):
                    raise ImageDecodeError(image_ref, f"not an 8-bit image (mode {pil.mode})")
                pil = pil.convert("RGB")
            if channels == 1 and pil.mode == "RGB":
                pil = pil.convert("L")
            raw = np.asarray(pil, dtype=np.uint8)
    except FileNotFoundError:
        raise ImageDecodeError(image_ref, "file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageDecodeError):
            raise
        raise ImageDecodeError(image_ref, exc) from exc

    img = raw.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = img[:, :, None]
    if (img.shape[0], img.shape[1]) != (th, tw):
        img = kernels.resize_bilinear(img, (th, tw))
    if channels == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.clip(img, 0.0, 1.0)


# -- rotation ------------------------------------------------------------------

def sample_rotation(max_deg: float, rng: RngStream) -> float:
    if not 0.0 <= max_deg < 45.0:
        raise ValueError(f"rotation max_deg must lie in [0, 45), got {max_deg}")
    return rng.uniform(-max_deg, max_deg)


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the centre; bilinear, out-of-frame pixels filled with 0."""
    if angle_deg == 0.0:
        return image.copy()
    out = kernels.warp_affine(image, image.shape[:2], kernels.rotation_matrix(image.shape, angle_deg),
                              clamp=False, fill=0.0)
    return np.clip(out, 0.0, 1.0)


def random_rotation(image: np.ndarray, max_deg: float, rng: RngStream) -> np.ndarray:
    return rotate(image, sample_rotation(max_deg, rng))


# -- crop + resize ---------------------------------------------------------------

class CropBox(NamedTuple):
    top: float
    left: float
    height: float
    width: float
    scale: float


def sample_crop_box(shape, scale_range, rng: RngStream) -> CropBox:
    """Draw an area fraction uniformly from ``scale_range`` and a uniform placement.

    The box keeps the source aspect ratio and has real-valued corners.
    """
    lo, hi = (float(v) for v in scale_range)
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"crop scale range must satisfy 0 < min <= max <= 1, got {scale_range}")
    h, w = shape[:2]
    scale = rng.uniform(lo, hi)
    side = math.sqrt(scale)
    bh, bw = side * h, side * w
    if bh < 1.0 or bw < 1.0:
        raise ValueError(f"crop of {bh:.3g}x{bw:.3g} pixels is smaller than one pixel")
    top = rng.uniform(0.0, h - bh)
    left = rng.uniform(0.0, w - bw)
    return CropBox(top, left, bh, bw, scale)


def crop_resize(image: np.ndarray, box: CropBox) -> np.ndarray:
    h, w = image.shape[:2]
    if box.height == h and box.width == w and box.top == 0.0 and box.left == 0.0:
        return image.copy()
    matrix = kernels.resize_matrix(image.shape, (h, w), box=box[:4])
    return np.clip(kernels.warp_affine(image, (h, w), matrix, clamp=True), 0.0, 1.0)


def random_resized_crop(image: np.ndarray, scale_range, rng: RngStream) -> np.ndarray:
    return crop_resize(image, sample_crop_box(image.shape, scale_range, rng))


# -- policy ----------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_max_deg: float = 10.0
    crop_scale_min: float = 0.75
    crop_scale_max: float = 1.0
    rotation_enabled: bool = True
    crop_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rotation_max_deg < 45.0:
            raise ValueError(f"rotation_max_deg must lie in [0, 45), got {self.rotation_max_deg}")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ValueError("crop scales must satisfy 0 < crop_scale_min <= crop_scale_max <= 1, "
                             f"got ({self.crop_scale_min}, {self.crop_scale_max})")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(rotation_enabled=False, crop_enabled=False)

    @property
    def active(self) -> bool:
        return self.rotation_enabled or self.crop_enabled


def apply_policy(image: np.ndarray, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    """Rotation, then crop-resize; each only if enabled."""
    out = image
    if policy.rotation_enabled:
        out = random_rotation(out, policy.rotation_max_deg, rng)
    if policy.crop_enabled:
        out = random_resized_crop(out, (policy.crop_scale_min, policy.crop_scale_max), rng)
    return out if out is not image else image.copy()
