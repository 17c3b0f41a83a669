"""Image preprocessing and training-time augmentation.

Everything here is a pure function of its arguments; randomness comes only
from the explicit ``seed``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyImage, ImageLoadError

SCALING_MODES = ("unit_interval", "symmetric", "mean_subtracted")


@dataclass(frozen=True)
class PreprocessSpec:
    target_height: int
    target_width: int
    scaling: str = "unit_interval"
    channel_means: tuple[float, float, float] | None = None
    channel_count: int = 3

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ValueError(f"target size must be positive, got {self.target_height}x{self.target_width}")
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"scaling must be one of {SCALING_MODES}, got {self.scaling!r}")
        if self.channel_count != 3:
            raise ValueError("only 3-channel output is supported")
        if self.scaling == "mean_subtracted":
            if self.channel_means is None or len(self.channel_means) != 3:
                raise ValueError("mean_subtracted scaling needs three channel_means")
            object.__setattr__(self, "channel_means", tuple(float(m) for m in self.channel_means))
        elif self.channel_means is not None:
            raise ValueError(f"channel_means only apply to mean_subtracted scaling, not {self.scaling}")

    @property
    def value_range(self) -> tuple[float, float]:
        if self.scaling == "unit_interval":
            return 0.0, 1.0
        if self.scaling == "symmetric":
            return -1.0, 1.0
        return -max(self.channel_means), 255.0 - min(self.channel_means)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentParams:
    flip_probability: float = 0.5
    shear_max: float = 0.2          # radians
    zoom_range: tuple[float, float] = (0.8, 1.2)
    rotation_max: float = 10.0      # degrees
    fill: str = "nearest"           # "nearest" or "constant"
    fill_value: float = 0.0

    def __post_init__(self):
        lo, hi = self.zoom_range
        object.__setattr__(self, "zoom_range", (float(lo), float(hi)))
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if self.shear_max < 0 or self.rotation_max < 0:
            raise ValueError("shear_max and rotation_max must be >= 0")
        if not 0 < lo <= 1.0 <= hi:
            raise ValueError(f"zoom_range must satisfy 0 < lo <= 1 <= hi, got {self.zoom_range}")
        if self.fill not in ("nearest", "constant"):
            raise ValueError(f"fill must be 'nearest' or 'constant', got {self.fill!r}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(flip_probability=0.0, shear_max=0.0, zoom_range=(1.0, 1.0), rotation_max=0.0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d


@dataclass(frozen=True)
class TransformConfig:
    """Preprocessing plus the augmentation applied to training batches."""

    preprocess: PreprocessSpec
    augment: AugmentParams = field(default_factory=AugmentParams)

    def to_json(self) -> dict:
        return {"preprocess": self.preprocess.to_json(), "augment": self.augment.to_json()}


def _resize_channel(channel: np.ndarray, height: int, width: int) -> np.ndarray:
    if channel.shape == (height, width):
        return channel
    img = Image.fromarray(channel.astype(np.float32))
    return np.asarray(img.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)


def scale_values(pixels: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Map 0..255 intensities into the range the backbone expects."""
    if spec.scaling == "unit_interval":
        return pixels / 255.0
    if spec.scaling == "symmetric":
        return pixels / 127.5 - 1.0
    return pixels - np.asarray(spec.channel_means, dtype=pixels.dtype)


def preprocess_image(image, spec: PreprocessSpec) -> np.ndarray:
    """Resize to the target size in ``spec``, replicate grayscale to RGB, and rescale.

    ``image`` holds 0..255 intensities, shaped (H, W), (H, W, 1) or (H, W, 3).
    Returns float32 of shape (target_height, target_width, 3).
    """
    pixels = np.asarray(image)
    if pixels.size == 0:
        raise EmptyImage("image has no pixels")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = pixels[:, :, :3]
    if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] != 3):
        raise ValueError(f"expected a grayscale or RGB raster, got shape {pixels.shape}")

    pixels = pixels.astype(np.float32)
    h, w = spec.target_height, spec.target_width
    if pixels.ndim == 2:
        resized = _resize_channel(pixels, h, w)
        out = np.repeat(resized[:, :, None], 3, axis=2)
    else:
        out = np.stack([_resize_channel(pixels[:, :, c], h, w) for c in range(3)], axis=2)
    out = np.clip(out, 0.0, 255.0)
    return scale_values(out, spec).astype(np.float32)


def sample_affine(params: AugmentParams, rng: np.random.Generator):
    """Draw (flip, 2x2 output-to-input matrix) for one image.

    All five variates are drawn on every call so a given seed yields the same
    stream whatever the magnitudes are.
    """
    flip = rng.random() < params.flip_probability
    theta = np.deg2rad(rng.uniform(-params.rotation_max, params.rotation_max))
    shear = rng.uniform(-params.shear_max, params.shear_max)
    zy = rng.uniform(*params.zoom_range)
    zx = rng.uniform(*params.zoom_range)

    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shearing = np.array([[1.0, 0.0], [np.tan(shear), 1.0]])
    zoom = np.diag([zy, zx])
    return bool(flip), rotation @ shearing @ zoom


def apply_affine(image: np.ndarray, matrix: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Warp each channel about the image centre with bilinear sampling."""
    if np.array_equal(matrix, np.eye(2)):
        return image
    h, w = image.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    mode = "nearest" if params.fill == "nearest" else "constant"
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], matrix, offset=offset, order=1, mode=mode, cval=params.fill_value
        )
    return out


def augment_image(image: np.ndarray, params: AugmentParams, seed: int) -> np.ndarray:
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {image.shape}")
    rng = np.random.default_rng(seed)
    flip, matrix = sample_affine(params, rng)
    out = image[:, ::-1, :] if flip else image
    out = apply_affine(np.ascontiguousarray(out), matrix, params)
    return out.copy() if out is image else out


def load_image(record) -> np.ndarray:
    try:
        with Image.open(record.image_path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            return np.asarray(img)
    except (OSError, ValueError) as exc:
        raise ImageLoadError(record.id, record.image_path, exc) from exc


def make_batch(records: Sequence, spec: PreprocessSpec, params: AugmentParams, mode: str = "eval", seed: int = 0):
    """Load, preprocess and (in train mode) augment a batch.

    Returns ``(images, targets)`` with images float32 [B, H, W, 3] and targets
    float32 bone ages in months, aligned with ``records``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(records) == 0:
        raise ValueError("make_batch needs at least one record")
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=len(records))
    images = np.empty((len(records), spec.target_height, spec.target_width, 3), dtype=np.float32)
    for i, rec in enumerate(records):
        x = preprocess_image(load_image(rec), spec)
        if mode == "train":
            x = augment_image(x, params, int(seeds[i]))
        images[i] = x
    targets = np.array([r.bone_age for r in records], dtype=np.float32)
    return images, targets
