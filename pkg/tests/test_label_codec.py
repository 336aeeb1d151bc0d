import numpy as np
import pytest

from modules.errors import CodecError, ShapeError
from modules.label_codec import (
    CLASS_COUNT, ClassCode, Palette, code_from_name, decode, encode, get_palette,
    read_label_map, resize_nearest, stack_pair, unstack_pair, write_label_map
)


def test_class_codes_are_fixed():
    assert CLASS_COUNT == 6
    assert ClassCode.BACKGROUND == 0
    assert ClassCode.HEART == 3
    assert code_from_name('left_lung') == ClassCode.LEFT_LUNG
    with pytest.raises(CodecError):
        code_from_name('spleen')


def test_single_background_pixel():
    assert decode(encode(np.zeros((1, 1), dtype=np.uint8))).tolist() == [[0]]


def test_distinct_stored_values():
    palette = get_palette()
    values = {palette.code_to_value[c] for c in (1, 2, 3, 0)}
    assert len(values) == 4
    labels = np.array([[1, 2], [3, 0]], dtype=np.uint8)
    assert np.array_equal(decode(encode(labels)), labels)


def test_round_trip_random_maps():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, CLASS_COUNT, size=(64, 64)).astype(np.uint8)
        assert np.array_equal(decode(encode(labels)), labels)


def test_round_trip_through_file(tmp_path):
    labels = np.random.default_rng(0).integers(0, CLASS_COUNT, size=(17, 23)).astype(np.uint8)
    path = str(tmp_path / 'mask.png')
    write_label_map(path, labels)
    assert np.array_equal(read_label_map(path), labels)


def test_all_background_image():
    out = decode(encode(np.zeros((16, 16), dtype=np.uint8)))
    assert out.shape == (16, 16)
    assert not out.any()


def test_unknown_pixel_value_names_location():
    from PIL import Image
    import io

    stored = np.zeros((4, 4), dtype=np.uint8)
    stored[2, 1] = 200
    buffer = io.BytesIO()
    Image.fromarray(stored, mode='L').save(buffer, format='PNG')
    with pytest.raises(CodecError) as excinfo:
        decode(buffer.getvalue())
    assert excinfo.value.details['value'] == 200
    assert excinfo.value.details['location'] == [2, 1]


def test_code_missing_from_palette():
    partial = Palette([{'code': 0, 'value': 0, 'color': [0, 0, 0]},
                       {'code': 1, 'value': 9, 'color': [1, 2, 3]}])
    with pytest.raises(CodecError):
        encode(np.array([[0, 3]], dtype=np.uint8), partial)


def test_palette_must_be_injective():
    with pytest.raises(CodecError):
        Palette([{'code': 0, 'value': 0, 'color': [0, 0, 0]},
                 {'code': 1, 'value': 0, 'color': [1, 1, 1]}])


def test_integer_upscale_replicates_blocks():
    out = resize_nearest(np.array([[1, 2], [3, 4]], dtype=np.uint8), 4, 4)
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert np.array_equal(out, expected)


def test_left_half_survives_upscale():
    labels = np.zeros((64, 64), dtype=np.uint8)
    labels[:, :32] = 1
    out = resize_nearest(labels, 1024, 1024)
    assert (out[:, :512] == 1).all()
    assert (out[:, 512:] == 0).all()


def test_resize_never_adds_codes():
    rng = np.random.default_rng(7)
    cases = [(1024, 64), (64, 1024)] + [tuple(rng.integers(1, 200, size=2)) for _ in range(98)]
    for src, dst in cases:
        codes = rng.choice(CLASS_COUNT, size=rng.integers(1, CLASS_COUNT + 1), replace=False)
        labels = rng.choice(codes, size=(src, src)).astype(np.uint8)
        out = resize_nearest(labels, dst, dst)
        assert out.shape == (dst, dst)
        assert set(np.unique(out)) <= set(np.unique(labels))


def test_resize_same_size_is_identity():
    labels = np.random.default_rng(1).integers(0, CLASS_COUNT, size=(20, 30)).astype(np.uint8)
    assert np.array_equal(resize_nearest(labels, 20, 30), labels)


def test_resize_rejects_empty_output():
    with pytest.raises(ShapeError):
        resize_nearest(np.zeros((4, 4), dtype=np.uint8), 0, 4)


def test_stack_pair_channels():
    image = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    labels = np.random.default_rng(1).integers(0, CLASS_COUNT, size=(8, 8)).astype(np.uint8)
    grid = stack_pair(image, labels)
    assert grid.shape == (2, 8, 8)
    assert np.array_equal(grid[0], image)


def test_stack_pair_shape_mismatch():
    with pytest.raises(ShapeError):
        stack_pair(np.zeros((8, 8)), np.zeros((16, 16), dtype=np.uint8))


def test_stack_round_trip():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        image = rng.random((12, 9)).astype(np.float32)
        labels = rng.integers(0, CLASS_COUNT, size=(12, 9)).astype(np.uint8)
        out_image, out_labels = unstack_pair(stack_pair(image, labels))
        assert np.array_equal(out_image, image)
        assert np.array_equal(out_labels, labels)
