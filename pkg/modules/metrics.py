"""
Metrics Module
Confusion counting, Jaccard index and Dice score per class, with
micro- or macro-averaged reports over a set of predictions
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .label_codec import CLASS_COUNT, ClassCode, as_label_map, code_from_name

logger = logging.getLogger(__name__)

DEFAULT_SUBSET = (ClassCode.LEFT_LUNG, ClassCode.HEART, ClassCode.RIGHT_LUNG)
MODES = ('micro', 'macro')


def _mean(values: Sequence[float]) -> float:
    """Exactly rounded mean, independent of the order of values"""
    return math.fsum(values) / len(values)


@dataclass
class ConfusionCounts:
    """One-vs-rest TP/FP/FN/TN per class code"""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, class_count: int = CLASS_COUNT) -> 'ConfusionCounts':
        return cls(*(np.zeros(class_count, dtype=np.int64) for _ in range(4)))

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def pixel_count(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def for_class(self, code: int) -> Dict[str, int]:
        return {'tp': int(self.tp[code]), 'fp': int(self.fp[code]),
                'fn': int(self.fn[code]), 'tn': int(self.tn[code])}


def confusion(pred: np.ndarray, target: np.ndarray, class_count: int = CLASS_COUNT) -> ConfusionCounts:
    pred = as_label_map(pred, 'prediction')
    target = as_label_map(target, 'target')
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {target.shape} differ")

    matrix = np.bincount(
        target.ravel().astype(np.int64) * class_count + pred.ravel().astype(np.int64),
        minlength=class_count * class_count
    ).reshape(class_count, class_count)
    tp = np.diag(matrix).astype(np.int64)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def is_empty(c: ConfusionCounts, code: int) -> bool:
    """Neither predicted nor present: both metrics are then defined as 1.0"""
    return int(c.tp[code] + c.fp[code] + c.fn[code]) == 0


def jaccard(c: ConfusionCounts, code: int) -> float:
    if is_empty(c, code):
        return 1.0
    return float(c.tp[code]) / float(c.tp[code] + c.fp[code] + c.fn[code])


def dice(c: ConfusionCounts, code: int) -> float:
    if is_empty(c, code):
        return 1.0
    return 2.0 * float(c.tp[code]) / float(2 * c.tp[code] + c.fp[code] + c.fn[code])


def resolve_subset(subset: Optional[Iterable[Union[int, str]]]) -> Tuple[ClassCode, ...]:
    if subset is None:
        return DEFAULT_SUBSET
    codes = []
    for item in subset:
        codes.append(code_from_name(item) if isinstance(item, str) else ClassCode(int(item)))
    if not codes:
        raise ConfigError("Metric subset must name at least one class")
    return tuple(codes)


@dataclass
class ClassScore:
    code: int
    name: str
    jaccard: float
    dice: float
    empty: bool = False


@dataclass
class MetricsReport:
    """Per-class J and DSC plus their means over the reported subset"""
    classes: List[ClassScore]
    subset: Tuple[int, ...]
    mode: str = 'micro'
    pairs: int = 0
    counts: Optional[ConfusionCounts] = field(default=None, repr=False)

    def score(self, code: int) -> ClassScore:
        for item in self.classes:
            if item.code == int(code):
                return item
        raise KeyError(code)

    @property
    def average_jaccard(self) -> float:
        return _mean([self.score(code).jaccard for code in self.subset])

    @property
    def average_dice(self) -> float:
        return _mean([self.score(code).dice for code in self.subset])

    def rows(self) -> List[Tuple[str, float]]:
        """(row label, value) in the reporting layout: per-class J then DSC, then averages"""
        rows = []
        for metric in ('jaccard', 'dice'):
            label = 'J' if metric == 'jaccard' else 'DSC'
            for code in self.subset:
                item = self.score(code)
                rows.append((f'{label} {item.name}', getattr(item, metric)))
            rows.append((f'{label} average', self.average_jaccard if metric == 'jaccard' else self.average_dice))
        return rows

    def to_dict(self) -> Dict:
        return {
            'mode': self.mode,
            'pairs': self.pairs,
            'subset': [int(code) for code in self.subset],
            'classes': [
                {'code': c.code, 'name': c.name, 'jaccard': c.jaccard, 'dice': c.dice, 'empty': c.empty}
                for c in self.classes
            ],
            'average_jaccard': self.average_jaccard,
            'average_dice': self.average_dice
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MetricsReport':
        return cls(
            classes=[ClassScore(**item) for item in data['classes']],
            subset=tuple(data['subset']),
            mode=data.get('mode', 'micro'),
            pairs=data.get('pairs', 0)
        )


def report(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], subset=None, mode: str = 'micro',
           class_count: int = CLASS_COUNT) -> MetricsReport:
    """
    Score (pred, target) pairs

    Args:
        pairs: Sequence of (prediction, target) label maps
        subset: Class codes or names averaged in the headline numbers
        mode: 'micro' sums counts over all pairs before computing each metric,
            'macro' averages per-pair metrics
        class_count: Number of class codes

    Returns:
        MetricsReport
    """
    if not pairs:
        raise ConfigError("Cannot report metrics on zero pairs")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode}")
    subset = resolve_subset(subset)

    per_pair = [confusion(pred, target, class_count) for pred, target in pairs]
    total = ConfusionCounts.zeros(class_count)
    for counts in per_pair:
        total = total + counts

    classes = []
    for code in range(class_count):
        if mode == 'micro':
            j, d = jaccard(total, code), dice(total, code)
        else:
            j = _mean([jaccard(c, code) for c in per_pair])
            d = _mean([dice(c, code) for c in per_pair])
        classes.append(ClassScore(code=code, name=ClassCode(code).label, jaccard=j, dice=d,
                                  empty=is_empty(total, code)))

    result = MetricsReport(classes=classes, subset=subset, mode=mode, pairs=len(pairs), counts=total)
    logger.info(f"Scored {len(pairs)} pairs ({mode}): J={result.average_jaccard:.4f} DSC={result.average_dice:.4f}")
    return result
