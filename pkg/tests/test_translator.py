import json

import numpy as np
import pytest
import torch

from modules.dataset_io import PhantomConfig, make_phantoms
from modules.dot_maps import centroids, dotify_dataset
from modules.errors import CodecError, ConfigError, ShapeError
from modules.label_codec import ClassCode
from modules.translator import (
    CoarseToFineGenerator, TranslationPair, TranslatorConfig, Translator, argmax_decode, build,
    feature_matching_loss, generator_losses, one_hot, pairs_from_entries, pairs_from_triples,
    to_model_output, train_translation, translate
)


def small_config(**overrides):
    values = dict(base_filters=8, disc_filters=8, resblocks=1, disc_layers=2, steps=0, batch_size=2, log_every=1)
    values.update(overrides)
    return TranslatorConfig(**values)


def random_pairs(count=3, size=16, kind='label', seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        source = rng.integers(0, 6, size=(size, size)).astype(np.uint8)
        target = rng.integers(0, 6, size=(size, size)).astype(np.uint8) if kind == 'label' \
            else rng.random((size, size)).astype(np.float32)
        pairs.append(TranslationPair(id=f'p{i}', source=source, target=target))
    return pairs


def test_one_hot_small_map():
    grid = one_hot(np.array([[0, 1], [2, 0]]), 6)
    assert grid.shape == (6, 2, 2)
    assert np.array_equal(grid.sum(axis=0), np.ones((2, 2)))
    assert grid[2, 1, 0] == 1.0


def test_one_hot_round_trip():
    for seed in range(100):
        labels = np.random.default_rng(seed).integers(0, 6, size=(9, 13)).astype(np.uint8)
        grid = one_hot(labels)
        assert np.array_equal(argmax_decode(grid), labels)
        assert np.array_equal(one_hot(argmax_decode(grid)), grid)


def test_argmax_tie_goes_to_lowest_code():
    grid = np.zeros((6, 1, 1), dtype=np.float32)
    grid[2] = grid[4] = 0.5
    assert argmax_decode(grid)[0, 0] == 2
    assert argmax_decode(np.zeros((6, 3, 3)))[1, 1] == 0


def test_one_hot_rejects_out_of_range():
    with pytest.raises(CodecError):
        one_hot(np.array([[6]]), 6)


@pytest.mark.parametrize('levels', [1, 2])
@pytest.mark.parametrize('size', [(16, 16), (20, 28), (7, 9)])
def test_output_dims_match_input(levels, size):
    config = small_config(levels=levels)
    generator = CoarseToFineGenerator(config)
    out = generator(torch.zeros(1, 6, *size))
    assert out.shape == (1, 6, *size)


def test_image_output_is_bounded():
    generator = CoarseToFineGenerator(small_config(output_kind='image'))
    out = generator(torch.rand(2, 6, 16, 16))
    assert out.shape == (2, 1, 16, 16)
    assert out.abs().max().item() <= 1.0


def test_zero_feature_matching_weight():
    config = small_config(fm_weight=0.0)
    generator, discriminator = build(config)
    pair = random_pairs(1)[0]
    source = torch.from_numpy(one_hot(pair.source))[None]
    target = torch.from_numpy(one_hot(pair.target))[None]
    losses = generator_losses(generator, discriminator, source, target, config)
    assert losses['feat'].item() > 0
    assert losses['total'].item() == losses['adv'].item()


def test_feature_matching_gradient():
    config = small_config(base_filters=4, disc_filters=4)
    generator, discriminator = build(config)
    generator.double()
    discriminator.double()
    rng = np.random.default_rng(0)
    source = torch.from_numpy(one_hot(rng.integers(0, 6, size=(2, 16, 16)))).double()
    target = torch.from_numpy(one_hot(rng.integers(0, 6, size=(2, 16, 16)))).double()

    def loss():
        fake = to_model_output(generator(source), config)
        return feature_matching_loss(discriminator(torch.cat([source, fake], 1)),
                                     discriminator(torch.cat([source, target], 1)), config.disc_layers)

    param = generator.head[1].weight
    loss().backward()
    analytic = param.grad[0, 0, 3, 3].item()

    eps = 1e-6
    with torch.no_grad():
        param[0, 0, 3, 3] += eps
        plus = loss().item()
        param[0, 0, 3, 3] -= 2 * eps
        minus = loss().item()
        param[0, 0, 3, 3] += eps
    numeric = (plus - minus) / (2 * eps)
    assert abs(analytic - numeric) <= 1e-3 * abs(numeric) + 1e-9


def test_empty_pairs():
    with pytest.raises(ConfigError):
        train_translation([], small_config())


def test_mismatched_pair():
    pair = TranslationPair(id='bad', source=np.zeros((8, 8), dtype=np.uint8), target=np.zeros((9, 9), dtype=np.uint8))
    with pytest.raises(ShapeError):
        train_translation([pair], small_config())


def test_training_writes_log_and_checkpoint(tmp_path):
    ckpt = train_translation(random_pairs(kind='image'), small_config(output_kind='image', steps=2),
                             output_dir=str(tmp_path))
    with open(tmp_path / 'train_log.jsonl') as f:
        log = [json.loads(line) for line in f]
    assert [r['step'] for r in log] == [1, 2]
    assert all(np.isfinite(r['loss_g']) and np.isfinite(r['loss_d']) for r in log)
    assert (tmp_path / 'translator.pt').exists()
    assert ckpt.metadata['pairs'] == 3


def test_label_translation_is_deterministic_and_valid():
    ckpt = train_translation(random_pairs(), small_config(steps=1))
    source = random_pairs(1, seed=5)[0].source
    first, second = translate(ckpt, source), translate(ckpt, source)
    assert np.array_equal(first, second)
    assert first.shape == source.shape and first.dtype == np.uint8
    assert first.max() <= 5


def test_image_translation_is_clamped():
    ckpt = train_translation(random_pairs(kind='image'), small_config(output_kind='image'))
    out = Translator(ckpt)(random_pairs(1)[0].source)
    assert out.dtype == np.float32
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_channel_mismatch():
    ckpt = train_translation(random_pairs(), small_config())
    with pytest.raises(ShapeError):
        translate(ckpt, np.zeros((3, 16, 16), dtype=np.float32))


def test_pair_builders():
    entries = make_phantoms(PhantomConfig(seed=0, size=32, count=2))
    image_pairs = pairs_from_entries(entries)
    assert np.array_equal(image_pairs[0].source, entries[0].labels)
    dot_pairs = pairs_from_triples(dotify_dataset(entries))
    assert dot_pairs[1].source.shape == entries[1].labels.shape


@pytest.mark.slow
def test_dots_to_labels_keeps_centroids():
    entries = make_phantoms(PhantomConfig(seed=0, size=128, count=41))
    train, held_out = entries[:40], entries[40]
    config = TranslatorConfig(steps=400, batch_size=4, base_filters=16, disc_filters=16, resblocks=2)
    ckpt = train_translation(pairs_from_triples(dotify_dataset(train)), config)

    triple = dotify_dataset([held_out])[0]
    out = translate(ckpt, triple.dots)
    dots_at = centroids(triple.dots)
    got = centroids(out)
    for code in (ClassCode.RIGHT_LUNG, ClassCode.LEFT_LUNG, ClassCode.HEART):
        assert code in got
        assert np.hypot(got[code][0] - dots_at[code][0], got[code][1] - dots_at[code][1]) <= 8
