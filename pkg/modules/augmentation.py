"""
Augmentation Module
Small rotations, small translations and image-only Gaussian noise applied
to real radiographs before any generator is trained
"""

import logging
from dataclasses import dataclass, asdict
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .dataset_io import DatasetEntry
from .errors import ConfigError, ShapeError
from .label_codec import as_gray_image, as_label_map

logger = logging.getLogger(__name__)

ROTATION_RANGE = (-2.0, 2.0)
SHIFT_RANGE = (-0.03, 0.03)
NOISE_VARIANCE_RANGE = (0.01, 0.03)
GRAY_LEVELS = 255.0


@dataclass(frozen=True)
class AugmentParams:
    """
    One draw of augmentation parameters

    noise_variance is expressed as a multiple of 255 on the 0-255 gray scale,
    so the variance in the [0, 1] intensity domain is noise_variance / 255.
    A noise_variance of 0 disables noise.
    """
    rotation_deg: float = 0.0
    shift_y_frac: float = 0.0
    shift_x_frac: float = 0.0
    noise_variance: float = 0.0
    seed: int = 0

    def validate(self):
        if not ROTATION_RANGE[0] <= self.rotation_deg <= ROTATION_RANGE[1]:
            raise ConfigError(f"rotation_deg {self.rotation_deg} outside {ROTATION_RANGE}")
        for name in ('shift_y_frac', 'shift_x_frac'):
            value = getattr(self, name)
            if not SHIFT_RANGE[0] <= value <= SHIFT_RANGE[1]:
                raise ConfigError(f"{name} {value} outside {SHIFT_RANGE}")
        if self.noise_variance != 0.0 and not (
                NOISE_VARIANCE_RANGE[0] <= self.noise_variance <= NOISE_VARIANCE_RANGE[1]):
            raise ConfigError(f"noise_variance {self.noise_variance} outside {NOISE_VARIANCE_RANGE}")

    @property
    def unit_variance(self):
        """Noise variance in the [0, 1] intensity domain"""
        return self.noise_variance * GRAY_LEVELS / GRAY_LEVELS ** 2

    def to_dict(self):
        return asdict(self)


def sample_params(rng_seed: int) -> AugmentParams:
    """Draw every field uniformly over its interval; deterministic per seed"""
    rng = np.random.default_rng(rng_seed)
    params = AugmentParams(
        rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
        shift_y_frac=float(rng.uniform(*SHIFT_RANGE)),
        shift_x_frac=float(rng.uniform(*SHIFT_RANGE)),
        noise_variance=float(rng.uniform(*NOISE_VARIANCE_RANGE)),
        seed=int(rng.integers(0, 2 ** 31 - 1))
    )
    params.validate()
    return params


def _shift_pixels(frac: float, size: int) -> int:
    return int(np.rint(frac * size))


def _integer_shift(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Exact translation by whole pixels, uncovered cells set to 0"""
    out = np.zeros_like(grid)
    h, w = grid.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = grid[src_y, src_x]
    return out


def _affine(grid: np.ndarray, theta: float, dy: int, dx: int, order: int) -> np.ndarray:
    """
    Rotate by theta about the center, then translate by (dy, dx)

    affine_transform maps output coordinates to input coordinates, so the
    inverse transform is passed: in = R^T (out - c - t) + c.
    """
    h, w = grid.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = np.cos(theta), np.sin(theta)
    rotation = np.array([[cos, -sin], [sin, cos]])
    inverse = rotation.T
    offset = center - inverse @ (center + np.array([dy, dx], dtype=np.float64))
    return ndimage.affine_transform(
        grid, inverse, offset=offset, output_shape=grid.shape,
        order=order, mode='constant', cval=0.0, prefilter=False
    )


def apply(image: np.ndarray, labels: np.ndarray, p: AugmentParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Apply one geometric transform to both grids, then noise the image only

    Order: rotate about the image center, translate by whole pixels
    (shift fraction times the axis length, rounded), add Gaussian noise to
    the image, clamp the image to [0, 1]. Images use bilinear
    interpolation and labels nearest neighbor; cells that leave the frame
    become intensity 0 and background.
    """
    image = as_gray_image(image)
    labels = as_label_map(labels)
    if image.shape != labels.shape:
        raise ShapeError(f"Image {image.shape} and labels {labels.shape} differ")
    p.validate()

    h, w = image.shape
    dy = _shift_pixels(p.shift_y_frac, h)
    dx = _shift_pixels(p.shift_x_frac, w)

    if p.rotation_deg == 0.0:
        out_image = _integer_shift(image, dy, dx)
        out_labels = _integer_shift(labels, dy, dx)
    else:
        theta = np.deg2rad(p.rotation_deg)
        out_image = _affine(image.astype(np.float64), theta, dy, dx, order=1).astype(np.float32)
        out_labels = _affine(labels, theta, dy, dx, order=0).astype(np.uint8)

    if p.noise_variance > 0.0:
        rng = np.random.default_rng(p.seed)
        noise = rng.normal(0.0, np.sqrt(p.unit_variance), size=out_image.shape)
        out_image = out_image + noise.astype(np.float32)

    out_image = np.clip(out_image, 0.0, 1.0).astype(np.float32)
    return out_image, out_labels


def variant_seed(seed: int, index: int, variant: int) -> int:
    """Per-item seed so parallel or partial runs stay deterministic"""
    return int(np.random.SeedSequence([seed, index, variant]).generate_state(1)[0])


def augment_dataset(entries: List, variants: int, seed: int) -> List:
    """
    Expand each entry into 1 original plus (variants - 1) augmented copies

    Args:
        entries: DatasetEntry list
        variants: Total copies per entry, including the original
        seed: Master augmentation seed

    Returns:
        New DatasetEntry list, grouped per source entry
    """
    if variants < 1:
        raise ConfigError(f"variants must be >= 1, got {variants}")

    expanded = []
    for index, entry in enumerate(entries):
        expanded.append(entry)
        for variant in range(1, variants):
            params = sample_params(variant_seed(seed, index, variant))
            image, labels = apply(entry.image, entry.labels, params)
            expanded.append(DatasetEntry(
                id=f'{entry.id}_aug{variant}',
                image=image,
                labels=labels,
                split=entry.split
            ))

    logger.info(f"Augmented {len(entries)} entries x {variants} variants -> {len(expanded)}")
    return expanded
