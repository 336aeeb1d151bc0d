"""
Dot Maps Module
Per-class centroid "dots" rendered into a low-resolution label map, the
first stage of the three-stage generator
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigError
from .label_codec import ClassCode, ORGAN_CODES, as_label_map, resize_nearest

logger = logging.getLogger(__name__)

DOT_MAP_SIZE = 64
DEFAULT_RADIUS = 2

# Later entries overwrite earlier ones where disks overlap
DRAW_ORDER = ORGAN_CODES

CentroidSet = Dict[ClassCode, Tuple[float, float]]


def centroids(labels: np.ndarray) -> CentroidSet:
    """Mean (row, col) of every non-background code present"""
    labels = as_label_map(labels)
    result = {}
    for code in ORGAN_CODES:
        rows, cols = np.nonzero(labels == code)
        if rows.size == 0:
            continue
        result[code] = (float(rows.mean()), float(cols.mean()))
    return result


def disk_offsets(radius: int) -> np.ndarray:
    """Integer offsets (dy, dx) with dy^2 + dx^2 <= radius^2"""
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing='ij')
    mask = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[mask], dx[mask]], axis=1)


def scale_center(center: Tuple[float, float], src_h: int, src_w: int,
                 size: int = DOT_MAP_SIZE) -> Tuple[int, int]:
    """Proportional mapping of a source coordinate onto the dot grid, rounded half up"""
    row = int(np.floor(center[0] * size / src_h + 0.5))
    col = int(np.floor(center[1] * size / src_w + 0.5))
    return min(max(row, 0), size - 1), min(max(col, 0), size - 1)


def render(cs: CentroidSet, src_h: int, src_w: int, radius_px: int = DEFAULT_RADIUS,
           size: int = DOT_MAP_SIZE) -> np.ndarray:
    """
    Draw a filled disk of each class code at its scaled centroid

    Args:
        cs: Centroids in source-pixel coordinates
        src_h, src_w: Source dimensions the centroids refer to
        radius_px: Disk radius on the dot grid
        size: Dot grid size (64 by default)

    Returns:
        size x size LabelMap, zero outside the disks
    """
    if radius_px < 1:
        raise ConfigError(f"radius_px must be >= 1, got {radius_px}")
    if src_h < 1 or src_w < 1:
        raise ConfigError(f"Source dimensions must be >= 1, got {src_h}x{src_w}")

    dots = np.zeros((size, size), dtype=np.uint8)
    offsets = disk_offsets(radius_px)
    for code in DRAW_ORDER:
        if code not in cs:
            continue
        row, col = scale_center(cs[code], src_h, src_w, size)
        rr = row + offsets[:, 0]
        cc = col + offsets[:, 1]
        inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        dots[rr[inside], cc[inside]] = code
    return dots


@dataclass
class DotTriple:
    """Dot map, label map and image of one entry"""
    id: str
    dot_map: np.ndarray
    dots: np.ndarray
    labels: np.ndarray
    image: np.ndarray


def dotify(labels: np.ndarray, radius_px: int = DEFAULT_RADIUS, size: int = DOT_MAP_SIZE) -> np.ndarray:
    labels = as_label_map(labels)
    h, w = labels.shape
    return render(centroids(labels), h, w, radius_px, size)


def dotify_dataset(entries: List, radius_px: int = DEFAULT_RADIUS,
                   size: int = DOT_MAP_SIZE) -> List[DotTriple]:
    """
    Build dot maps for every entry, in order

    dot_map is the size x size map used to train the dot generator; dots is
    the same map upscaled to the entry's resolution with nearest neighbor,
    which is the source side of the dots -> labels translation pairs.
    """
    triples = []
    for entry in entries:
        h, w = entry.labels.shape
        dot_map = dotify(entry.labels, radius_px, size)
        triples.append(DotTriple(
            id=entry.id,
            dot_map=dot_map,
            dots=resize_nearest(dot_map, h, w),
            labels=entry.labels,
            image=entry.image
        ))
    logger.info(f"Built dot maps for {len(triples)} entries (radius={radius_px})")
    return triples
