"""Synthetic per-client segmentation data and the paired view augmentations.

Each client draws shapes from its own family on its own background, with
client-specific intensities, texture and noise, so that pixel statistics
and the intensity-to-label mapping differ across clients.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SHAPE_FAMILIES = ("ellipse", "rectangle", "blob")


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClientDataConfig:
    client_id: int
    num_train: int = 64
    num_test: int = 64
    shape_family: str = "ellipse"
    intensity_fg_range: tuple[float, float] = (0.7, 0.9)
    intensity_bg_range: tuple[float, float] = (0.1, 0.3)
    noise_sigma: float = 0.05
    object_scale_range: tuple[float, float] = (0.12, 0.25)
    texture_frequency: float = 0.0
    texture_amplitude: float = 0.0
    image_side: int = 32
    num_classes: int = 2
    max_shapes: int = 3

    def __post_init__(self) -> None:
        for key in ("intensity_fg_range", "intensity_bg_range", "object_scale_range"):
            object.__setattr__(self, key, tuple(float(v) for v in getattr(self, key)))
        self.validate()

    def validate(self) -> None:
        if self.shape_family not in SHAPE_FAMILIES:
            raise DataConfigError(f"unknown shape family {self.shape_family!r}")
        for key in ("intensity_fg_range", "intensity_bg_range"):
            lo, hi = getattr(self, key)
            if not 0.0 <= lo <= hi <= 1.0:
                raise DataConfigError(f"{key} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        if self.intensity_fg_range == self.intensity_bg_range:
            raise DataConfigError("foreground and background intensity ranges must differ")
        if self.num_train < 1 or self.num_test < 1:
            raise DataConfigError("num_train and num_test must be >= 1")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise DataConfigError("noise_sigma and texture_amplitude must be >= 0")
        lo, hi = self.object_scale_range
        if not 0.0 < lo <= hi <= 0.5:
            raise DataConfigError(f"object_scale_range must lie in (0, 0.5], got {(lo, hi)}")
        if self.num_classes < 2 or self.max_shapes < 1:
            raise DataConfigError("num_classes must be >= 2 and max_shapes >= 1")


@dataclass
class Sample:
    image: np.ndarray  # (1, side, side) float64 in [0, 1]
    mask: np.ndarray  # (side, side) uint8 class labels


@dataclass
class ClientDataset:
    """Stacked images ``(N,1,S,S)`` and masks ``(N,S,S)``."""

    images: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "ClientDataset":
        return cls(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))

    def samples(self) -> list[Sample]:
        return [Sample(img, m) for img, m in zip(self.images, self.masks)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.masks).tobytes())
        return h.hexdigest()


def _shape_mask(family: str, side: int, rng: np.random.Generator, scale: tuple[float, float]) -> np.ndarray:
    radius = rng.uniform(*scale) * side
    cy, cx = rng.uniform(radius, side - radius, size=2)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    angle = rng.uniform(0, np.pi)
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    if family == "ellipse":
        a, b = radius, radius * rng.uniform(0.5, 1.0)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # mean areas differ by family (about 1.6, 2.4 and 3.4 radius^2 for blob,
    # ellipse and rectangle) so that families are distinguishable by size too
    if family == "rectangle":
        a, b = radius, radius * rng.uniform(0.7, 1.0)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    theta = np.arctan2(dy, dx)
    r = 0.7 * radius * (1.0 + 0.3 * np.sin(3 * theta + phase[0]) + 0.15 * np.sin(5 * theta + phase[1]))
    return np.hypot(dx, dy) <= r


def _make_sample(cfg: ClientDataConfig, rng: np.random.Generator) -> Sample:
    side = cfg.image_side
    image = np.full((side, side), rng.uniform(*cfg.intensity_bg_range))
    if cfg.texture_amplitude > 0 and cfg.texture_frequency > 0:
        yy, xx = np.mgrid[0:side, 0:side] / side
        angle, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * cfg.texture_frequency * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        image = image + cfg.texture_amplitude * wave
    mask = np.zeros((side, side), dtype=np.uint8)
    for _ in range(int(rng.integers(1, cfg.max_shapes + 1))):
        region = _shape_mask(cfg.shape_family, side, rng, cfg.object_scale_range)
        image[region] = rng.uniform(*cfg.intensity_fg_range)
        mask[region] = rng.integers(1, cfg.num_classes)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0)[None], mask)


def gen_client_dataset(cfg: ClientDataConfig, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic ``(train, test)`` split generated from ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng([seed, cfg.client_id])
    samples = [_make_sample(cfg, rng) for _ in range(cfg.num_train + cfg.num_test)]
    return samples[:cfg.num_train], samples[cfg.num_train:]


# ---------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class HorizontalFlip:
    p: float = 0.5

    def __call__(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return img[..., ::-1] if rng.random() < self.p else img


@dataclass(frozen=True)
class VerticalFlip:
    p: float = 0.5

    def __call__(self, img, rng):
        return img[..., ::-1, :] if rng.random() < self.p else img


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float = 0.05

    def __call__(self, img, rng):
        return img + rng.normal(0.0, self.sigma, size=img.shape)


@dataclass(frozen=True)
class IntensityScale:
    low: float = 0.8
    high: float = 1.2

    def __call__(self, img, rng):
        return img * rng.uniform(self.low, self.high)


@dataclass(frozen=True)
class IntensityShift:
    low: float = -0.1
    high: float = 0.1

    def __call__(self, img, rng):
        return img + rng.uniform(self.low, self.high)


@dataclass(frozen=True)
class CropResize:
    min_frac: float = 0.8

    def __call__(self, img, rng):
        side = img.shape[-1]
        crop = max(2, int(round(rng.uniform(self.min_frac, 1.0) * side)))
        top, left = rng.integers(0, side - crop + 1, size=2)
        patch = img[..., top:top + crop, left:left + crop]
        return _bilinear_resize(patch, side)


def _bilinear_resize(patch: np.ndarray, side: int) -> np.ndarray:
    src = patch.shape[-1]
    coords = np.clip((np.arange(side) + 0.5) * src / side - 0.5, 0, src - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    w = coords - lo
    rows = patch[..., lo, :] * (1 - w)[:, None] + patch[..., hi, :] * w[:, None]
    return rows[..., lo] * (1 - w) + rows[..., hi] * w


Augmentation = HorizontalFlip | VerticalFlip | GaussianNoise | IntensityScale | IntensityShift | CropResize
AUGMENTATIONS = {
    "horizontal_flip": HorizontalFlip,
    "vertical_flip": VerticalFlip,
    "gaussian_noise": GaussianNoise,
    "intensity_scale": IntensityScale,
    "intensity_shift": IntensityShift,
    "crop_resize": CropResize,
}


@dataclass(frozen=True)
class AugmentationSpec:
    ops: tuple = ()

    def __call__(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = img
        for op in self.ops:
            out = op(out, rng)
        return np.clip(out, 0.0, 1.0)

    @classmethod
    def from_config(cls, items: Sequence[dict]) -> "AugmentationSpec":
        ops = []
        for item in items:
            item = dict(item)
            kind = item.pop("op")
            if kind not in AUGMENTATIONS:
                raise DataConfigError(f"unknown augmentation {kind!r}")
            ops.append(AUGMENTATIONS[kind](**item))
        return cls(tuple(ops))


DEFAULT_AUG_A = AugmentationSpec((HorizontalFlip(0.5), GaussianNoise(0.05)))
DEFAULT_AUG_B = AugmentationSpec((IntensityScale(0.8, 1.2), CropResize(0.8)))


def augment_pair(
    sample: Sample | np.ndarray,
    spec_a: AugmentationSpec,
    spec_b: AugmentationSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Two views of one image from independent RNG streams; mask unused."""
    image = sample.image if isinstance(sample, Sample) else np.asarray(sample)
    rng_a, rng_b = rng.spawn(2)
    return spec_a(image, rng_a), spec_b(image, rng_b)


# ---------------------------------------------------------------------------
# dataset dump: header u32 (count, side, classes), then per sample
# side*side little-endian float64 image followed by side*side uint8 mask


def save_dataset(path: str | os.PathLike, samples: Sequence[Sample], num_classes: int) -> None:
    side = samples[0].mask.shape[-1] if samples else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", len(samples), side, num_classes))
        for s in samples:
            fh.write(np.ascontiguousarray(s.image.reshape(side, side), dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())


def load_dataset(path: str | os.PathLike) -> tuple[list[Sample], int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    count, side, classes = struct.unpack_from("<III", blob, 0)
    offset, out = 12, []
    for _ in range(count):
        img = np.frombuffer(blob, "<f8", side * side, offset).astype(np.float64).reshape(1, side, side)
        offset += 8 * side * side
        mask = np.frombuffer(blob, np.uint8, side * side, offset).reshape(side, side).copy()
        offset += side * side
        out.append(Sample(img, mask))
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return out, classes
