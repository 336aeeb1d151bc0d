import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from modules.dataset_io import DatasetEntry, PhantomConfig, make_phantoms
from modules.errors import ConfigError
from modules.metrics import report
from modules.segmenter import (
    SegmenterConfig, build_segmenter, effective_crop, finetune, load_segmenter, parameter_count,
    predict_sliding, random_crop, sample_batch, segmentation_loss, train_segmenter, window_offsets
)


def small_config(**overrides):
    values = dict(encoder_blocks=(1, 1, 1, 1), base_width=8, batch_size=2, crop=32, steps=2, log_every=1)
    values.update(overrides)
    return SegmenterConfig(**values)


class PixelScores(nn.Module):
    """Logits that depend on each pixel alone"""

    def forward(self, x):
        return torch.cat([x * 3.0, 1.0 - x, torch.zeros_like(x)], dim=1)


class ConstantScores(nn.Module):

    def forward(self, x):
        n, _, h, w = x.shape
        return torch.tensor([0.2, 1.5, -0.7]).view(1, 3, 1, 1).expand(n, 3, h, w)


@pytest.fixture(scope='module')
def entries():
    return make_phantoms(PhantomConfig(seed=9, size=32, count=4))


def test_output_at_default_crop():
    network = build_segmenter(small_config()).eval()
    with torch.no_grad():
        out = network(torch.rand(1, 1, 377, 377))
    assert out.shape == (1, 6, 377, 377)


@pytest.mark.parametrize('attention', [True, False])
@pytest.mark.parametrize('size', [(8, 8), (13, 21), (32, 32)])
def test_output_shape_equals_input(attention, size):
    network = build_segmenter(small_config(attention=attention)).eval()
    with torch.no_grad():
        assert network(torch.rand(2, 1, *size)).shape == (2, 6, *size)


def test_single_level_decoder():
    network = build_segmenter(small_config(decoder_levels=1)).eval()
    with torch.no_grad():
        assert network(torch.rand(1, 1, 24, 24)).shape == (1, 6, 24, 24)


def test_build_is_stable_across_seeds():
    counts = {parameter_count(build_segmenter(small_config(seed=s))) for s in range(3)}
    assert len(counts) == 1


@pytest.mark.parametrize('overrides', [
    dict(encoder_blocks=(1, 1, 1)), dict(encoder_blocks=(1, 0, 1, 1)), dict(base_width=12),
    dict(decoder_levels=3), dict(crop=4), dict(class_weights=(1.0, 2.0))
])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        build_segmenter(small_config(**overrides))


def test_window_offsets():
    assert window_offsets(512, 377) == [0, 135]
    assert window_offsets(377, 377) == [0]
    assert window_offsets(100, 377) == [0]
    assert window_offsets(1024, 256) == [0, 256, 512, 768]


def test_single_window_for_crop_sized_image():
    calls = []

    class Recorder(PixelScores):
        def forward(self, x):
            calls.append(tuple(x.shape))
            return super().forward(x)

    predict_sliding(Recorder(), np.random.default_rng(0).random((377, 377)), crop=377)
    assert calls == [(1, 1, 377, 377)]


def test_stitching_reproduces_pixel_scores():
    image = np.random.default_rng(1).random((512, 512)).astype(np.float32)
    prediction = predict_sliding(PixelScores(), image, crop=377)
    expected = torch.softmax(PixelScores()(torch.from_numpy(image)[None, None]), dim=1)[0].numpy()
    np.testing.assert_allclose(prediction.scores, expected, rtol=0, atol=1e-7)
    assert np.array_equal(prediction.labels, np.argmax(prediction.scores, axis=0))


def test_constant_scores_survive_averaging():
    prediction = predict_sliding(ConstantScores(), np.zeros((512, 400), dtype=np.float32), crop=377)
    expected = torch.softmax(torch.tensor([0.2, 1.5, -0.7]), dim=0).numpy()
    np.testing.assert_allclose(prediction.scores[:, 200, 200], expected, atol=1e-7)
    np.testing.assert_allclose(prediction.scores[:, 0, 0], expected, atol=1e-7)
    assert (prediction.labels == 1).all()


def test_batch_sampling():
    rng = np.random.default_rng(0)
    oversized = sample_batch(rng, 3, 8)
    assert len(oversized) == 8 and oversized.max() < 3
    assert len(set(sample_batch(rng, 10, 4).tolist())) == 4


def test_crop_clamping_and_padding(entries):
    assert effective_crop(entries, small_config(crop=377)) == 32
    assert effective_crop(entries, small_config(crop=377, clamp_crop=False)) == 377
    image, labels = random_crop(entries[0].image, entries[0].labels, 48, np.random.default_rng(0))
    assert image.shape == labels.shape == (48, 48)
    assert set(np.unique(labels)) <= set(np.unique(entries[0].labels))


def test_cross_entropy_gradient():
    cfg = small_config()
    network = build_segmenter(cfg).double()
    rng = np.random.default_rng(0)
    images = torch.from_numpy(rng.random((2, 1, 32, 32)))
    labels = torch.from_numpy(rng.integers(0, 6, size=(2, 32, 32)))

    param = network.encoder.layer1[0].conv1.weight
    segmentation_loss(network, images, labels, cfg).backward()
    analytic = param.grad[0, 0, 1, 1].item()

    eps = 1e-6
    with torch.no_grad():
        param[0, 0, 1, 1] += eps
        plus = segmentation_loss(network, images, labels, cfg).item()
        param[0, 0, 1, 1] -= 2 * eps
        minus = segmentation_loss(network, images, labels, cfg).item()
        param[0, 0, 1, 1] += eps
    numeric = (plus - minus) / (2 * eps)
    assert abs(analytic - numeric) <= 1e-3 * abs(numeric) + 1e-9


def test_zero_steps_returns_initialization(entries):
    cfg = small_config(steps=0)
    ckpt = train_segmenter(entries, cfg)
    initial = build_segmenter(cfg).state_dict()
    for key, value in ckpt.states['network'].items():
        assert torch.equal(value, initial[key])


def test_training_log_and_checkpoint(tmp_path, entries):
    ckpt = train_segmenter(entries, small_config(steps=3), source='real', output_dir=str(tmp_path))
    with open(tmp_path / 'train_log.jsonl') as f:
        log = [json.loads(line) for line in f]
    assert [r['step'] for r in log] == [1, 2, 3]
    assert all(np.isfinite(r['loss']) for r in log)
    assert (tmp_path / 'segmenter.pt').exists()
    assert ckpt.metadata['crop'] == 32
    assert ckpt.metadata['pretrain_source'] == 'real'


def test_validation_keeps_best_parameters(entries):
    ckpt = train_segmenter(entries, small_config(steps=2, val_every=1), val_entries=entries[:2])
    assert ckpt.metadata['best_val_jaccard'] is not None
    assert any('val_jaccard' in r for r in ckpt.metadata['history'])


def test_zero_step_finetune_keeps_parameters(entries):
    pretrained = train_segmenter(entries, small_config(steps=1), source='synthetic:three_stage')
    tuned = finetune(pretrained, entries, small_config(steps=0))
    for key, value in pretrained.states['network'].items():
        assert torch.equal(value, tuned.states['network'][key])
    assert tuned.metadata['pretrain_source'] == 'synthetic:three_stage'
    assert [p['phase'] for p in tuned.metadata['provenance']] == ['pretrain', 'finetune']


def test_finetune_must_keep_architecture(entries):
    pretrained = train_segmenter(entries, small_config(steps=0))
    with pytest.raises(ConfigError):
        finetune(pretrained, entries, small_config(base_width=16))


def test_prediction_from_checkpoint(entries):
    ckpt = train_segmenter(entries, small_config(steps=1))
    prediction = predict_sliding(ckpt, entries[0].image)
    assert prediction.scores.shape == (6, 32, 32)
    np.testing.assert_allclose(prediction.scores.sum(axis=0), 1.0, atol=1e-5)
    again = predict_sliding(load_segmenter(ckpt), entries[0].image, crop=32)
    assert np.array_equal(prediction.scores, again.scores)


def _average_on(ckpt, test):
    return report([(predict_sliding(ckpt, e.image).labels, e.labels) for e in test]).average_jaccard


@pytest.mark.slow
def test_training_lowers_loss():
    data = make_phantoms(PhantomConfig(seed=0, size=128, count=80))
    improved = 0
    for seed in range(5):
        cfg = SegmenterConfig(crop=96, steps=300, batch_size=4, base_width=16, encoder_blocks=(1, 1, 1, 1),
                              log_every=300, seed=seed)
        history = train_segmenter(data, cfg).metadata['history']
        improved += history[-1]['loss'] < history[0]['loss']
    assert improved >= 4


@pytest.mark.slow
def test_real_training_and_finetune_quality():
    data = make_phantoms(PhantomConfig(seed=0, size=128, count=80))
    test = make_phantoms(PhantomConfig(seed=0, size=128, count=40, split='test'), start_index=80)
    cfg = SegmenterConfig(crop=96, steps=600, batch_size=4, base_width=16, encoder_blocks=(1, 1, 1, 1))
    pretrained = train_segmenter(data, cfg)
    baseline = _average_on(pretrained, test)
    assert baseline >= 0.70

    tuned = finetune(pretrained, data, SegmenterConfig(**dict(cfg.to_dict(), steps=100)))
    assert _average_on(tuned, test) >= baseline - 0.05


def test_entries_must_not_be_empty():
    with pytest.raises(ConfigError):
        train_segmenter([], small_config())


def test_class_weights_apply(entries):
    cfg = small_config(class_weights=(0.5, 1.0, 1.0, 2.0, 1.0, 1.0), steps=1)
    assert np.isfinite(train_segmenter(entries, cfg).metadata['history'][0]['loss'])


def test_dataset_entry_from_prediction(entries):
    ckpt = train_segmenter(entries, small_config(steps=0))
    labels = predict_sliding(ckpt, entries[1].image).labels
    assert DatasetEntry(id='pred', image=entries[1].image, labels=labels).shape == (32, 32)
