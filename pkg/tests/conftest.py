"""
Shared fixtures: small phantom datasets and isolated run directories
"""

import os
import sys
import tempfile

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

# Settings are read once per process, so point them away from the repo first
_SCRATCH = tempfile.mkdtemp(prefix='cxrsynth-tests-')
os.environ.setdefault('CXRSYNTH_PALETTE', os.path.join(ROOT, 'data', 'palette.json'))
os.environ.setdefault('CXRSYNTH_RUN_INDEX', os.path.join(_SCRATCH, 'runs.json'))
os.environ.setdefault('CXRSYNTH_RUNS_DIR', os.path.join(_SCRATCH, 'runs'))
os.environ.setdefault('CXRSYNTH_DEVICE', 'cpu')
os.environ.setdefault('CXRSYNTH_NUM_WORKERS', '2')
os.environ.setdefault('LOG_FILE', os.path.join(_SCRATCH, 'cxrsynth.log'))

from modules.dataset_io import PhantomConfig, export_dataset, make_phantoms  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale training tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale training, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def phantoms():
    """Eight 64x64 training phantoms and four test phantoms"""
    train = make_phantoms(PhantomConfig(seed=3, size=64, count=8))
    test = make_phantoms(PhantomConfig(seed=3, size=64, count=4, split='test'), start_index=8)
    return train + test


@pytest.fixture
def dataset_dir(tmp_path, phantoms):
    root = tmp_path / 'dataset'
    export_dataset(phantoms, str(root))
    return str(root)


@pytest.fixture
def run_index(tmp_path):
    return str(tmp_path / 'index' / 'runs.json')
