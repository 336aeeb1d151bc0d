"""
Quality Probes Module
Cheap mode-collapse and structural plausibility checks on generated data
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .label_codec import ClassCode, as_label_map

logger = logging.getLogger(__name__)


@dataclass
class DiversityStats:
    """
    Pixelwise variance across samples and the distance of each sample to
    its closest training item (mean absolute difference)
    """
    samples: int
    variance_mean: float
    variance_min: float
    variance_max: float
    nn_distances: List[float]

    @property
    def nn_mean(self) -> Optional[float]:
        return float(np.mean(self.nn_distances)) if self.nn_distances else None

    @property
    def nn_min(self) -> Optional[float]:
        return float(np.min(self.nn_distances)) if self.nn_distances else None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.update(nn_mean=self.nn_mean, nn_min=self.nn_min)
        return data


def _stack(grids: Sequence[np.ndarray], name: str) -> np.ndarray:
    arrays = [np.asarray(g, dtype=np.float64) for g in grids]
    shape = arrays[0].shape
    for index, array in enumerate(arrays):
        if array.shape != shape:
            raise ShapeError(f"{name} item {index} has shape {array.shape}, expected {shape}")
    return np.stack(arrays)


def diversity(samples: Sequence[np.ndarray], training: Optional[Sequence[np.ndarray]] = None) -> DiversityStats:
    """
    Args:
        samples: Generated grids of equal shape (images or label maps)
        training: Optional training grids of the same shape for the
            nearest-neighbor distance

    Returns:
        DiversityStats; nn_distances is empty without training grids
    """
    if len(samples) < 2:
        raise ConfigError(f"Diversity needs at least 2 samples, got {len(samples)}")
    stacked = _stack(samples, 'Sample')
    # centred on the first sample so identical samples give exactly zero
    variance = (stacked - stacked[0]).var(axis=0)

    distances = []
    if training is not None and len(training):
        reference = _stack(training, 'Training')
        if reference.shape[1:] != stacked.shape[1:]:
            raise ShapeError(f"Training grids {reference.shape[1:]} and samples {stacked.shape[1:]} differ")
        flat_ref = reference.reshape(len(reference), -1)
        for sample in stacked.reshape(len(stacked), -1):
            distances.append(float(np.abs(flat_ref - sample).mean(axis=1).min()))

    stats = DiversityStats(
        samples=len(samples),
        variance_mean=float(variance.mean()),
        variance_min=float(variance.min()),
        variance_max=float(variance.max()),
        nn_distances=distances
    )
    logger.info(f"Diversity of {stats.samples} samples: mean variance {stats.variance_mean:.6f}, nn mean {stats.nn_mean}")
    return stats


CHECKS = ('right_lung_present', 'left_lung_present', 'lungs_disjoint', 'heart_present')


def check_map(labels: np.ndarray) -> Dict[str, bool]:
    """Structural predicates on a single label map"""
    labels = as_label_map(labels)
    right = labels == ClassCode.RIGHT_LUNG
    left = labels == ClassCode.LEFT_LUNG
    return {
        'right_lung_present': bool(right.any()),
        'left_lung_present': bool(left.any()),
        # Lungs are disjoint when no right-lung pixel touches a left-lung pixel
        'lungs_disjoint': not bool(
            (right[:, :-1] & left[:, 1:]).any() or (left[:, :-1] & right[:, 1:]).any()
            or (right[:-1, :] & left[1:, :]).any() or (left[:-1, :] & right[1:, :]).any()
        ),
        'heart_present': bool((labels == ClassCode.HEART).any())
    }


def label_sanity(maps: Sequence[np.ndarray]) -> Dict:
    """Fraction of maps passing each check, plus the fraction passing all"""
    results = [check_map(m) for m in maps]
    total = len(results)
    report = {'maps': total}
    for name in CHECKS:
        report[name] = sum(r[name] for r in results) / total if total else 0.0
    report['all_passed'] = sum(all(r.values()) for r in results) / total if total else 0.0
    logger.info(f"Label sanity on {total} maps: {report['all_passed']:.1%} pass every check")
    return report
