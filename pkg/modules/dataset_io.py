"""
Dataset I/O Module
Real image/label ingestion with the official split, export, and the
deterministic phantom thorax dataset used for desk-scale runs
"""

import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import get_settings
from .errors import CodecError, ConfigError, IngestionError, ShapeError
from .label_codec import (
    ClassCode, Palette, as_gray_image, as_label_map, get_palette,
    read_label_map, write_label_map
)

logger = logging.getLogger(__name__)

SPLITS = ('train', 'test')
IMAGES_DIR = 'images'
MASKS_DIR = 'masks'
SPLIT_FILE = 'split.txt'


@dataclass
class DatasetEntry:
    """One radiograph with its label map"""
    id: str
    image: np.ndarray
    labels: np.ndarray
    split: str = 'train'

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"Entry {self.id} has unknown split '{self.split}'")
        self.image = as_gray_image(self.image, name=f"image {self.id}")
        self.labels = as_label_map(self.labels, name=f"labels {self.id}")
        if self.image.shape != self.labels.shape:
            raise ShapeError(
                f"Entry {self.id}: image {self.image.shape} and labels {self.labels.shape} differ",
                id=self.id
            )

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class PhantomConfig:
    """Parameters of the phantom thorax generator"""
    seed: int = 0
    size: int = 128
    count: int = 1
    lung_jitter: float = 0.08
    heart_jitter: float = 0.10
    clavicle_jitter: float = 0.10
    position_jitter: float = 0.03
    noise_std: float = 0.02
    split: str = 'train'

    def validate(self):
        if self.size < 32 or self.size & (self.size - 1):
            raise ConfigError(f"Phantom size must be a power of two >= 32, got {self.size}")
        if self.count < 1:
            raise ConfigError(f"Phantom count must be >= 1, got {self.count}")
        for name in ('lung_jitter', 'heart_jitter', 'clavicle_jitter', 'position_jitter'):
            value = getattr(self, name)
            if not 0.0 <= value < 0.5:
                raise ConfigError(f"{name} must lie in [0, 0.5), got {value}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.split not in SPLITS:
            raise ConfigError(f"Unknown split '{self.split}'")

    def to_dict(self):
        return asdict(self)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _bar(yy, xx, start, end, thickness):
    """Pixels within thickness/2 of the segment start-end"""
    (y0, x0), (y1, x1) = start, end
    dy, dx = y1 - y0, x1 - x0
    length_sq = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length_sq, 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return dist <= thickness / 2.0


def make_phantom(cfg: PhantomConfig, index: int) -> DatasetEntry:
    """
    Render one phantom thorax; a pure function of (cfg, index)

    Geometry is in normalized coordinates with the patient's right on the
    image left, as on a posteroanterior radiograph.
    """
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size

    def jitter(amp):
        return rng.uniform(-amp, amp)

    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    labels = np.zeros((size, size), dtype=np.uint8)

    pos = cfg.position_jitter
    shift_y = jitter(pos)
    lung_shapes = {}
    for code, base_cx in ((ClassCode.RIGHT_LUNG, 0.30), (ClassCode.LEFT_LUNG, 0.70)):
        cy = 0.52 + shift_y + jitter(pos / 2)
        cx = base_cx + jitter(pos)
        ry = 0.27 * (1 + jitter(cfg.lung_jitter))
        rx = 0.12 * (1 + jitter(cfg.lung_jitter))
        lung_shapes[code] = (cy, cx, ry, rx)
        labels[_ellipse(yy, xx, cy, cx, ry, rx)] = code

    heart = _ellipse(
        yy, xx,
        0.64 + shift_y + jitter(pos),
        0.53 + jitter(pos / 2),
        0.13 * (1 + jitter(cfg.heart_jitter)),
        0.15 * (1 + jitter(cfg.heart_jitter))
    )
    labels[heart & (labels == ClassCode.BACKGROUND)] = ClassCode.HEART

    thickness = max(2.0 / size, 0.025)
    cj = cfg.clavicle_jitter
    for code, mirror in ((ClassCode.RIGHT_CLAVICLE, False), (ClassCode.LEFT_CLAVICLE, True)):
        inner = (0.20 + jitter(cj) * 0.05, 0.46 + jitter(cj) * 0.03)
        outer = (0.12 + jitter(cj) * 0.05, 0.16 + jitter(cj) * 0.05)
        if mirror:
            inner = (inner[0], 1.0 - inner[1])
            outer = (outer[0], 1.0 - outer[1])
        labels[_bar(yy, xx, inner, outer, thickness)] = code

    # Intensity field: dark lungs, bright mediastinum and bones
    image = np.full((size, size), 0.05, dtype=np.float64)
    body = _ellipse(yy, xx, 0.55, 0.50, 0.52, 0.47)
    image[body] = 0.45
    image[body & (np.abs(xx - 0.5) < 0.07)] = 0.70
    image[(labels == ClassCode.RIGHT_LUNG) | (labels == ClassCode.LEFT_LUNG)] = 0.18
    image[labels == ClassCode.HEART] = 0.78
    image[(labels == ClassCode.RIGHT_CLAVICLE) | (labels == ClassCode.LEFT_CLAVICLE)] = 0.90

    image = ndimage.gaussian_filter(image, sigma=1.5 * size / 128.0)
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return DatasetEntry(
        id=f"phantom_{cfg.seed}_{index:05d}",
        image=image,
        labels=labels,
        split=cfg.split
    )


def make_phantoms(cfg: PhantomConfig, start_index: int = 0) -> List[DatasetEntry]:
    """Generate cfg.count phantoms starting at start_index"""
    cfg.validate()
    logger.info(f"Generating {cfg.count} phantoms (seed={cfg.seed}, size={cfg.size})")
    return [make_phantom(cfg, start_index + i) for i in range(cfg.count)]


def read_gray_image(path: str, bit_depth: int = 12) -> np.ndarray:
    """
    Read a grayscale image normalized to [0, 1]

    8-bit images are divided by 255; 16-bit containers are assumed to carry
    bit_depth significant bits and are divided by 2**bit_depth - 1.
    """
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise IngestionError(f"Cannot read image {path}: {e}", file=str(path))

    if img.mode in ('L', 'P'):
        arr = np.array(img.convert('L'), dtype=np.float32) / 255.0
    elif img.mode in ('I;16', 'I;16B', 'I;16L', 'I'):
        scale = float(2 ** bit_depth - 1)
        arr = np.clip(np.array(img, dtype=np.float32) / scale, 0.0, 1.0)
    elif img.mode in ('RGB', 'RGBA'):
        arr = np.array(img.convert('L'), dtype=np.float32) / 255.0
    else:
        raise IngestionError(f"Unsupported image mode {img.mode} in {path}", file=str(path))
    return arr


def write_gray_image(path: str, image: np.ndarray):
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_split_file(path: str) -> Dict[str, str]:
    """Parse '<id>\\t<train|test>' lines"""
    if not os.path.exists(path):
        raise IngestionError(f"Split file not found: {path}", file=str(path))

    splits = {}
    with open(path, 'r') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split('\t') if '\t' in line else line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise IngestionError(f"Malformed split line {line_no} in {path}: {line!r}")
            entry_id, split = parts
            if entry_id in splits:
                raise IngestionError(f"Duplicate id '{entry_id}' in {path}", id=entry_id)
            splits[entry_id] = split
    return splits


class DatasetLoader:
    """Loads an images/ masks/ split.txt directory"""

    def __init__(self, root: str, split_file: Optional[str] = None,
                 palette: Optional[Palette] = None, bit_depth: int = 12,
                 max_workers: Optional[int] = None):
        self.root = root
        self.split_file = split_file or os.path.join(root, SPLIT_FILE)
        self.palette = palette or get_palette()
        self.bit_depth = bit_depth
        self.max_workers = max_workers or get_settings().num_workers

    def _load_entry(self, entry_id: str, split: str) -> DatasetEntry:
        image_path = os.path.join(self.root, IMAGES_DIR, f'{entry_id}.png')
        mask_path = os.path.join(self.root, MASKS_DIR, f'{entry_id}.png')

        if not os.path.exists(image_path):
            raise IngestionError(f"Missing image for id '{entry_id}': {image_path}", id=entry_id)
        if not os.path.exists(mask_path):
            raise IngestionError(f"Missing mask for id '{entry_id}': {mask_path}", id=entry_id)

        image = read_gray_image(image_path, self.bit_depth)
        labels = read_label_map(mask_path, self.palette)
        if image.shape != labels.shape:
            raise IngestionError(
                f"Id '{entry_id}': image {image.shape} and mask {labels.shape} differ",
                id=entry_id
            )
        return DatasetEntry(id=entry_id, image=image, labels=labels, split=split)

    def load(self) -> List[DatasetEntry]:
        """Load and validate every entry listed in the split file"""
        images_dir = os.path.join(self.root, IMAGES_DIR)
        if not os.path.isdir(images_dir) or not os.listdir(images_dir):
            raise IngestionError(f"No images found under {self.root}", root=str(self.root))

        splits = read_split_file(self.split_file)
        if not splits:
            raise IngestionError(f"Split file {self.split_file} lists no ids")

        listed = set(splits)
        on_disk = {os.path.splitext(name)[0] for name in os.listdir(images_dir)}
        unlisted = on_disk - listed
        if unlisted:
            logger.warning(f"{len(unlisted)} images are not listed in the split file and were skipped")

        entries = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_id = {
                executor.submit(self._load_entry, entry_id, split): entry_id
                for entry_id, split in splits.items()
            }
            for future in as_completed(future_to_id):
                entry_id = future_to_id[future]
                try:
                    entries[entry_id] = future.result()
                except CodecError as e:
                    logger.error(f"Invalid mask for id '{entry_id}': {e}")
                    raise

        ordered = [entries[entry_id] for entry_id in sorted(entries)]
        counts = split_counts(ordered)
        logger.info(f"Loaded {len(ordered)} entries from {self.root}: {counts}")
        return ordered


def load_dataset(root_path: str, split_file: Optional[str] = None, **kwargs) -> List[DatasetEntry]:
    """Load a dataset directory; entries come back sorted by id"""
    return DatasetLoader(root_path, split_file, **kwargs).load()


def export_dataset(entries: List[DatasetEntry], root: str, palette: Optional[Palette] = None) -> str:
    """Write entries using the images/ masks/ split.txt layout"""
    palette = palette or get_palette()
    ids = [entry.id for entry in entries]
    if len(set(ids)) != len(ids):
        raise IngestionError("Cannot export a dataset with duplicate ids")

    os.makedirs(os.path.join(root, IMAGES_DIR), exist_ok=True)
    os.makedirs(os.path.join(root, MASKS_DIR), exist_ok=True)

    for entry in entries:
        write_gray_image(os.path.join(root, IMAGES_DIR, f'{entry.id}.png'), entry.image)
        write_label_map(os.path.join(root, MASKS_DIR, f'{entry.id}.png'), entry.labels, palette)

    with open(os.path.join(root, SPLIT_FILE), 'w') as f:
        for entry in entries:
            f.write(f'{entry.id}\t{entry.split}\n')

    logger.info(f"Exported {len(entries)} entries to {root}")
    return root


def split_counts(entries: List[DatasetEntry]) -> Dict[str, int]:
    counts = {split: 0 for split in SPLITS}
    for entry in entries:
        counts[entry.split] += 1
    return counts


def select_split(entries: List[DatasetEntry], split: str) -> List[DatasetEntry]:
    return [entry for entry in entries if entry.split == split]


def subsample_train(entries: List[DatasetEntry], fraction: float, seed: int,
                    count: Optional[int] = None) -> List[DatasetEntry]:
    """
    Seeded uniform choice without replacement, returned in input order

    Args:
        entries: Candidate entries
        fraction: Share to keep, 0 < fraction <= 1 (floor-rounded)
        seed: Selection seed
        count: Exact number to keep; overrides fraction when given

    Returns:
        Selected entries in their original order
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")

    total = len(entries)
    keep = count if count is not None else int(math.floor(total * fraction + 1e-9))
    if keep < 1:
        raise ConfigError(f"Subsampling {total} entries with fraction {fraction} leaves nothing")
    if keep > total:
        raise ConfigError(f"Cannot keep {keep} of {total} entries")

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=keep, replace=False))
    logger.info(f"Subsampled {keep} of {total} training entries (seed={seed})")
    return [entries[i] for i in chosen]
