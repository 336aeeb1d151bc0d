import hashlib
import json
import logging
import os

import numpy as np
import pytest

from modules.config import get_settings
from modules.errors import ConfigError, StageFailed, StateError
from modules.metrics import report
from modules.pipeline import (
    ExperimentManifest, RunRecord, compare, derive_seed, execution_order, load_manifest, protocol_counts,
    reevaluate, run, stage_graph, stub_synthesizer
)
from modules.run_storage import RunStorage


def smoke_manifest(tmp_path, **overrides):
    values = dict(name='smoke', pipeline='three_stage', regime='tiny', tiny_count=4, augment_variants=2,
                  scale=0.002, phantom_count=12, phantom_test_count=4, phantom_size=64, resolution=64,
                  dot_resolution=16, stub_generation=True, seg_steps=2, finetune_steps=1, seg_crop=48,
                  seg_base_width=8, seg_encoder_blocks=(1, 1, 1, 1), output_dir=str(tmp_path / 'run'))
    values.update(overrides)
    return ExperimentManifest(**values)


def model_manifest(tmp_path, pipeline, **overrides):
    """Trained generation chain at 32x32 with single-digit step budgets"""
    values = dict(name=pipeline, pipeline=pipeline, stub_generation=False, resolution=32, dot_resolution=16,
                  seg_crop=32, gan_latent_dim=8, gan_max_feature_maps=8, gan_steps_per_stage=2,
                  gan_batch_size=2, translator_steps=2, translator_batch_size=2, translator_base_filters=8,
                  output_dir=str(tmp_path / pipeline))
    values.update(overrides)
    return smoke_manifest(tmp_path, **values)


def fake_record(name, pipeline, split='split-a', regime='tiny', seed=0, finetune=True):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 6, size=(8, 8)), rng.integers(0, 6, size=(8, 8))) for _ in range(3)]
    reports = {'pretrain': report(pairs).to_dict()}
    if finetune:
        reports['finetune'] = report(pairs[:2]).to_dict()
    return RunRecord(name=name, manifest={'pipeline': pipeline, 'regime': regime}, manifest_fingerprint=name,
                     split_fingerprint=split, run_dir=f'/runs/{name}', reports=reports)


def test_derived_seeds():
    expected = int.from_bytes(hashlib.sha256(b'7:gan').digest()[:8], 'big') % (2 ** 31)
    assert derive_seed(7, 'gan') == expected
    assert derive_seed(7, 'gan') != derive_seed(7, 'segment')
    assert derive_seed(7, 'gan') != derive_seed(8, 'gan')
    assert 0 <= derive_seed(123, 'augment') < 2 ** 31


def test_tiny_counts():
    counts = protocol_counts(ExperimentManifest(regime='tiny'), 124)
    assert counts['real_train'] == 11 and counts['augmented_train'] == 66


def test_full_counts():
    counts = protocol_counts(ExperimentManifest(regime='full'), 124)
    assert counts == {'real_train': 124, 'augmented_train': 744, 'generation_pool': 10000,
                      'synth_train': 7500, 'synth_val': 2500}


def test_custom_fraction_and_scale():
    counts = protocol_counts(ExperimentManifest(regime='custom', fraction=0.5, scale=0.002), 124)
    assert counts['real_train'] == 62
    assert (counts['generation_pool'], counts['synth_train'], counts['synth_val']) == (20, 15, 5)
    assert protocol_counts(ExperimentManifest(pipeline='real_only'), 124).keys() == {'real_train', 'augmented_train'}


@pytest.mark.parametrize('overrides', [
    dict(pipeline='four_stage'), dict(regime='huge'), dict(regime='custom', fraction=0.0),
    dict(synth_train_count=9000), dict(augment_variants=0), dict(scale=0.0)
])
def test_invalid_manifests(overrides):
    with pytest.raises(ConfigError):
        ExperimentManifest(**overrides).validate()


def test_manifest_file(tmp_path):
    path = tmp_path / 'exp.cfg'
    path.write_text('NAME=demo\nPIPELINE=two_stage\nSEG_ENCODER_BLOCKS=1,1,1,1\nFINETUNE=false\n')
    manifest = load_manifest(str(path), {'seed': '5'})
    assert manifest.pipeline == 'two_stage' and manifest.seed == 5
    assert manifest.seg_encoder_blocks == (1, 1, 1, 1) and manifest.finetune is False
    with pytest.raises(ConfigError):
        load_manifest(str(path), {'unknown_key': '1'})


def test_three_stage_graph():
    graph = stage_graph(ExperimentManifest(pipeline='three_stage'))
    order = execution_order(graph)
    assert order[0] == 'data' and order[-1] == 'evaluate'
    assert order.index('dots') < order.index('gan') < order.index('generate')
    assert order.index('translate_labels') < order.index('generate')
    assert order.index('segment') < order.index('finetune') < order.index('evaluate')


def test_graph_variants():
    assert 'translate_images' not in stage_graph(ExperimentManifest(pipeline='single_stage'))
    assert 'dots' not in stage_graph(ExperimentManifest(pipeline='two_stage'))
    real = stage_graph(ExperimentManifest(pipeline='real_only'))
    assert set(real) == {'data', 'segment', 'evaluate'}
    stub = stage_graph(ExperimentManifest(stub_generation=True))
    assert stub['generate'] == ('data',) and 'gan' not in stub


def test_cycles_and_unknown_stages():
    with pytest.raises(ConfigError):
        execution_order({'a': ('b',), 'b': ('a',)})
    with pytest.raises(ConfigError):
        execution_order({'a': ('missing',)})


def test_stub_run_protocol(tmp_path):
    manifest = smoke_manifest(tmp_path)
    record = run(manifest)

    assert record.counts == {'real_train': 4, 'augmented_train': 8, 'test': 4,
                             'generation_pool': 20, 'synth_train': 15, 'synth_val': 5}
    assert set(record.reports) == {'pretrain', 'finetune'}
    assert set(record.checkpoints) == {'segment', 'finetune'}
    assert all(os.path.exists(path) for path in record.checkpoints.values())
    assert record.probes['label_sanity']['maps'] == 15
    assert record.probes['image_diversity']['samples'] == 15
    assert record.probes['image_diversity']['variance_mean'] > 0.0
    assert 0.0 <= record.report('pretrain').average_jaccard <= 1.0

    loaded = RunRecord.load(manifest.output_dir)
    assert (loaded.name, loaded.counts, loaded.reports) == (record.name, record.counts, record.reports)
    assert loaded.checkpoints == record.checkpoints
    assert RunStorage(get_settings().run_index_path).get_run('smoke')['finetune'] is True
    assert reevaluate(loaded) == record.reports


def test_rerun_skips_completed_stages(tmp_path):
    manifest = smoke_manifest(tmp_path, name='resumed')
    first = run(manifest)
    second = run(manifest)
    assert second.reports == first.reports

    with open(os.path.join(manifest.output_dir, 'run_log.jsonl')) as f:
        events = [json.loads(line) for line in f]
    skipped = [e['stage'] for e in events if e['event'] == 'skipped']
    assert sorted(skipped) == sorted(stage_graph(manifest))


def test_other_manifest_in_same_directory(tmp_path):
    run(smoke_manifest(tmp_path, name='first', finetune=False))
    with pytest.raises(StateError):
        run(smoke_manifest(tmp_path, name='first', finetune=False, seed=1))


def test_failing_stage_is_wrapped(tmp_path):
    def short(ctx, count, seed):
        return stub_synthesizer(ctx, count - 1, seed)

    with pytest.raises(StageFailed) as excinfo:
        run(smoke_manifest(tmp_path, name='broken'), synthesizer=short)
    assert excinfo.value.stage == 'generate'
    assert isinstance(excinfo.value.cause, StateError)


def test_real_only_run(tmp_path):
    record = run(smoke_manifest(tmp_path, name='real', pipeline='real_only'))
    assert set(record.reports) == {'pretrain'}
    assert record.probes == {}
    assert record.checkpoints['segment'].endswith('segmenter.pt')


def test_compare_columns_and_best():
    table = compare([fake_record('real', 'real_only', finetune=False, seed=1), fake_record('synth', 'three_stage')])
    assert table.columns == ['REAL', 'Synth 3', 'Synth 3 FINETUNE']
    assert table.rows[:4] == ['J left_lung', 'J heart', 'J right_lung', 'J average']
    for row in table.rows:
        top = max(table.values[row].values())
        assert table.best(row) == [c for c in table.columns if table.values[row][c] == top]
    assert table.notes == []


def test_compare_marks_regimes_and_notes():
    table = compare([fake_record('a', 'single_stage', regime='full'), fake_record('b', 'three_stage')])
    assert table.columns[0] == 'Synth 1 (full)'
    assert len(table.notes) == 1


def test_compare_needs_one_split():
    with pytest.raises(ConfigError):
        compare([fake_record('a', 'real_only'), fake_record('b', 'three_stage', split='split-b')])
    with pytest.raises(ConfigError):
        compare([])


def test_record_checkpoints_must_exist(tmp_path):
    record = fake_record('x', 'three_stage')
    record.run_dir = str(tmp_path)
    record.checkpoints = {'segment': str(tmp_path / 'absent.pt')}
    with pytest.raises(StateError):
        record.save()


@pytest.mark.parametrize('pipeline, trained', [
    ('three_stage', {'gan', 'translate_labels', 'translate_images'}),
    ('two_stage', {'gan', 'translate_images'}),
    ('single_stage', {'gan'})
])
def test_model_run_produces_checkpoints(tmp_path, pipeline, trained):
    record = run(model_manifest(tmp_path, pipeline))

    assert set(record.checkpoints) == trained | {'segment', 'finetune'}
    assert all(os.path.exists(path) for path in record.checkpoints.values())
    assert record.counts['generation_pool'] == 20 and record.counts['synth_train'] == 15
    assert record.probes['label_sanity']['maps'] == 15
    assert set(record.reports) == {'pretrain', 'finetune'}
    assert 0.0 <= record.report('finetune').average_jaccard <= 1.0


def test_fresh_runs_with_one_seed_agree(tmp_path):
    first = run(model_manifest(tmp_path, 'three_stage', name='fresh_a', output_dir=str(tmp_path / 'a')))
    second = run(model_manifest(tmp_path, 'three_stage', name='fresh_b', output_dir=str(tmp_path / 'b')))

    assert first.reports == second.reports
    assert first.counts == second.counts
    assert first.split_fingerprint == second.split_fingerprint
    assert first.probes == second.probes


def test_index_failure_is_logged(tmp_path, monkeypatch, caplog):
    monkeypatch.setattr(RunStorage, 'save_run', lambda self, record: False)
    with caplog.at_level(logging.WARNING, logger='modules.pipeline'):
        record = run(smoke_manifest(tmp_path, name='unindexed', pipeline='real_only', finetune=False))
    assert os.path.exists(os.path.join(record.run_dir, 'run_record.json'))
    assert any('could not be added to the run index' in r.getMessage() for r in caplog.records)
