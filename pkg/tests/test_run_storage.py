import json

import pytest

from modules.run_storage import RunStorage


def record(name, pipeline='three_stage', regime='tiny', jaccard=0.8, finetune=True):
    reports = {'pretrain': {'average_jaccard': jaccard, 'average_dice': 0.9}}
    if finetune:
        reports['finetune'] = {'average_jaccard': jaccard + 0.05, 'average_dice': 0.92}
    return {'name': name, 'manifest': {'pipeline': pipeline, 'regime': regime}, 'run_dir': f'/runs/{name}',
            'split_fingerprint': 'abc', 'reports': reports, 'timings': {'data': 1.0, 'segment': 2.5}}


def test_index_is_created(run_index):
    storage = RunStorage(run_index)
    with open(run_index) as f:
        assert json.load(f) == {'runs': []}
    assert storage.get_run_count() == 0
    assert storage.get_statistics()['best_average_jaccard'] is None


def test_save_newest_first_and_replace(run_index):
    storage = RunStorage(run_index)
    assert storage.save_run(record('a'))
    assert storage.save_run(record('b', pipeline='real_only', finetune=False))
    assert [r['name'] for r in storage.get_all_runs()] == ['b', 'a']

    storage.save_run(record('a', jaccard=0.5))
    runs = storage.get_all_runs()
    assert [r['name'] for r in runs] == ['a', 'b']
    assert runs[0]['average_jaccard'] == pytest.approx({'pretrain': 0.5, 'finetune': 0.55})
    assert runs[0]['duration'] == 3.5
    assert runs[1]['finetune'] is False


def test_search_and_delete(run_index):
    storage = RunStorage(run_index)
    storage.save_run(record('smoke-3', regime='tiny'))
    storage.save_run(record('full-real', pipeline='real_only', regime='full'))
    assert [r['name'] for r in storage.search_runs('REAL')] == ['full-real']
    assert len(storage.search_runs('tiny')) == 1
    assert storage.delete_run('smoke-3')
    assert not storage.delete_run('smoke-3')
    assert storage.get_run('smoke-3') is None


def test_resolve(run_index, tmp_path):
    storage = RunStorage(run_index)
    storage.save_run(record('named'))
    assert storage.resolve('named') == '/runs/named/run_record.json'
    assert storage.resolve(str(tmp_path)) == str(tmp_path)
    assert storage.resolve('unknown') == 'unknown'


def test_statistics(run_index):
    storage = RunStorage(run_index)
    storage.save_run(record('a', jaccard=0.7))
    storage.save_run(record('b', pipeline='two_stage', jaccard=0.75, finetune=False))
    stats = storage.get_statistics()
    assert stats['total_runs'] == 2
    assert stats['pipeline_distribution'] == {'three_stage': 1, 'two_stage': 1}
    assert stats['best_average_jaccard']['value'] == pytest.approx(0.75)


def test_unreadable_index_reads_as_empty(run_index):
    storage = RunStorage(run_index)
    with open(run_index, 'w') as f:
        f.write('{not json')
    assert storage.get_all_runs() == []
