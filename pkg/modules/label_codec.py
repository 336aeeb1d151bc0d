"""
Label Codec Module
Semantic label maps, palettes and code-preserving geometric transforms

A LabelMap is a 2D ``numpy.uint8`` array of ClassCode values and a GrayImage
is a 2D ``numpy.float32`` array of intensities in [0, 1]. Both are plain
arrays so every stage can share them without conversion.
"""

import io
import json
import logging
from enum import IntEnum
from functools import lru_cache
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from PIL import Image

from .config import get_settings
from .errors import CodecError, ShapeError

logger = logging.getLogger(__name__)


class ClassCode(IntEnum):
    """Anatomical class codes, 0 is always background"""
    BACKGROUND = 0
    RIGHT_LUNG = 1
    LEFT_LUNG = 2
    HEART = 3
    RIGHT_CLAVICLE = 4
    LEFT_CLAVICLE = 5

    @property
    def label(self):
        return self.name.lower()


CLASS_COUNT = len(ClassCode)
ORGAN_CODES = tuple(code for code in ClassCode if code != ClassCode.BACKGROUND)
CLASS_NAMES = {code: code.label for code in ClassCode}


def code_from_name(name: str) -> ClassCode:
    """Look up a class code by its snake_case name"""
    try:
        return ClassCode[name.strip().upper()]
    except KeyError:
        raise CodecError(f"Unknown class name: {name}", name=name)


class Palette:
    """Bijection between class codes, stored pixel values and display colors"""

    def __init__(self, entries: Iterable[Dict], version: int = 1):
        self.version = version
        self.code_to_value = {}
        self.value_to_code = {}
        self.code_to_color = {}

        for entry in entries:
            code = int(entry['code'])
            value = int(entry['value'])
            color = tuple(int(c) for c in entry['color'])

            if code not in ClassCode._value2member_map_:
                raise CodecError(f"Palette declares invalid class code {code}", code=code)
            if not 0 <= value <= 255:
                raise CodecError(f"Palette value {value} does not fit an 8-bit image", value=value)
            if code in self.code_to_value or value in self.value_to_code:
                raise CodecError(f"Palette is not injective at code {code} / value {value}")
            if color in self.code_to_color.values():
                raise CodecError(f"Palette color {color} used twice")

            self.code_to_value[code] = value
            self.value_to_code[value] = code
            self.code_to_color[code] = color

        # Stored value -> code, -1 marks values outside the palette
        self._decode_table = np.full(256, -1, dtype=np.int16)
        for value, code in self.value_to_code.items():
            self._decode_table[value] = code

        self._encode_table = np.full(256, -1, dtype=np.int16)
        for code, value in self.code_to_value.items():
            self._encode_table[code] = value

    @classmethod
    def load(cls, path: str) -> 'Palette':
        """Load a versioned palette from JSON"""
        with open(path, 'r') as f:
            data = json.load(f)
        return cls(data['classes'], version=data.get('version', 1))

    @property
    def codes(self):
        return sorted(self.code_to_value)

    def to_dict(self) -> Dict:
        return {
            'version': self.version,
            'classes': [
                {
                    'code': code,
                    'name': CLASS_NAMES[ClassCode(code)],
                    'value': self.code_to_value[code],
                    'color': list(self.code_to_color[code])
                }
                for code in self.codes
            ]
        }

    def pil_palette(self):
        """Flat 768-entry RGB palette indexed by stored value"""
        flat = [0] * 768
        for code, value in self.code_to_value.items():
            flat[value * 3:value * 3 + 3] = list(self.code_to_color[code])
        return flat

    def colorize(self, labels: np.ndarray) -> np.ndarray:
        """Render a label map as an RGB array for display"""
        rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
        for code, color in self.code_to_color.items():
            rgb[labels == code] = color
        return rgb


@lru_cache(maxsize=4)
def _load_palette(path: str) -> Palette:
    logger.debug(f"Loading palette from {path}")
    return Palette.load(path)


def get_palette(path: Optional[str] = None) -> Palette:
    """Shipped palette, or the one named by CXRSYNTH_PALETTE"""
    return _load_palette(path or get_settings().palette_path)


def as_label_map(array, name: str = 'label map') -> np.ndarray:
    """Validate an array as a LabelMap and return it as uint8"""
    arr = np.asarray(array)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2D grid, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= CLASS_COUNT):
        bad = np.argwhere((arr < 0) | (arr >= CLASS_COUNT))[0]
        raise CodecError(
            f"{name} holds invalid class code {arr[tuple(bad)]} at {tuple(int(i) for i in bad)}",
            location=[int(i) for i in bad]
        )
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise CodecError(f"{name} holds non-integer codes")
    return arr.astype(np.uint8)


def as_gray_image(array, name: str = 'image') -> np.ndarray:
    """Validate an array as a GrayImage and return it as float32"""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} holds non-finite intensities")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ShapeError(f"{name} intensities must lie in [0, 1]")
    return arr


def encode(labels: np.ndarray, palette: Optional[Palette] = None) -> bytes:
    """
    Encode a label map as an indexed (mode 'P') PNG

    Args:
        labels: LabelMap
        palette: Palette covering every code present

    Returns:
        PNG bytes whose pixel values are the palette's stored values
    """
    palette = palette or get_palette()
    labels = as_label_map(labels)

    stored = palette._encode_table[labels]
    if stored.min() < 0:
        missing = sorted(set(np.unique(labels[stored < 0]).tolist()))
        raise CodecError(f"Codes {missing} are missing from the palette", codes=missing)

    h, w = labels.shape
    img = Image.frombytes('P', (w, h), stored.astype(np.uint8).tobytes())
    img.putpalette(palette.pil_palette())

    buffer = io.BytesIO()
    img.save(buffer, format='PNG')
    return buffer.getvalue()


def decode(data: bytes, palette: Optional[Palette] = None, source: str = '<bytes>') -> np.ndarray:
    """
    Decode an indexed PNG back into a label map

    Args:
        data: Image bytes (mode 'P' or 'L')
        palette: Palette that produced the stored values
        source: Name used in error messages

    Returns:
        LabelMap with the image's dimensions
    """
    palette = palette or get_palette()
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as e:
        raise CodecError(f"Cannot read label image {source}: {e}", file=source)

    if img.mode not in ('P', 'L'):
        raise CodecError(
            f"Label image {source} has mode {img.mode}; expected a single-channel indexed image",
            file=source
        )

    stored = np.array(img, dtype=np.uint8)
    codes = palette._decode_table[stored]
    if codes.min() < 0:
        row, col = (int(i) for i in np.argwhere(codes < 0)[0])
        value = int(stored[row, col])
        raise CodecError(
            f"Unknown pixel value {value} at (row={row}, col={col}) in {source}",
            value=value, location=[row, col], file=source
        )
    return codes.astype(np.uint8)


def write_label_map(path: str, labels: np.ndarray, palette: Optional[Palette] = None):
    with open(path, 'wb') as f:
        f.write(encode(labels, palette))


def read_label_map(path: str, palette: Optional[Palette] = None) -> np.ndarray:
    with open(path, 'rb') as f:
        return decode(f.read(), palette, source=str(path))


def nearest_indices(src_size: int, dst_size: int) -> np.ndarray:
    """Source index floor(dst_index * src_size / dst_size) for every destination index"""
    return (np.arange(dst_size, dtype=np.int64) * src_size) // dst_size


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize that never introduces a new class code"""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Output size must be at least 1x1, got {out_h}x{out_w}")
    labels = as_label_map(labels)
    h, w = labels.shape
    if (h, w) == (out_h, out_w):
        return labels.copy()
    rows = nearest_indices(h, out_h)
    cols = nearest_indices(w, out_w)
    return labels[np.ix_(rows, cols)]


def stack_pair(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Stack an image (channel 0) and its label map (channel 1) into a 2xHxW grid"""
    image = np.asarray(image, dtype=np.float32)
    labels = np.asarray(labels)
    if image.shape != labels.shape or image.ndim != 2:
        raise ShapeError(f"Cannot stack image {image.shape} with labels {labels.shape}")
    return np.stack([image, labels.astype(np.float32)], axis=0)


def unstack_pair(grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of stack_pair; the label channel is rounded back to codes"""
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[0] != 2:
        raise ShapeError(f"Expected a 2xHxW grid, got {grid.shape}")
    image = grid[0].astype(np.float32)
    labels = as_label_map(np.rint(grid[1]).astype(np.int64))
    return image, labels
