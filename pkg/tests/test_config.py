from dataclasses import dataclass
from typing import Optional, Tuple

import pytest

from modules.config import build_dataclass, load_config_file, parse_overrides, resolve_device
from modules.errors import CodecError, ConfigError, CXRSynthError, TrainingDiverged


@dataclass
class Sample:
    steps: int = 10
    rate: float = 0.1
    flag: bool = False
    blocks: Tuple[int, ...] = (2, 2)
    names: Tuple[str, ...] = ()
    limit: Optional[int] = None

    def validate(self):
        if self.steps < 0:
            raise ConfigError('steps must be >= 0')


def test_file_values_and_overrides(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text('# comment\nSTEPS=20\nRATE=0.5\nFLAG=yes\n')
    values = load_config_file(str(path), parse_overrides(['steps=30', 'BLOCKS = 1,2,3']))
    assert values == {'steps': '30', 'rate': '0.5', 'flag': 'yes', 'blocks': '1,2,3'}
    sample = build_dataclass(Sample, values)
    assert sample == Sample(steps=30, rate=0.5, flag=True, blocks=(1, 2, 3))


def test_coercion_of_optional_and_tuples():
    sample = build_dataclass(Sample, {'LIMIT': 'none', 'names': 'a, b'})
    assert sample.limit is None and sample.names == ('a', 'b')
    assert build_dataclass(Sample, {'limit': '7', 'steps': 3}).limit == 7


def test_unknown_keys():
    with pytest.raises(ConfigError) as excinfo:
        build_dataclass(Sample, {'stepz': '1'})
    assert excinfo.value.details['key'] == 'stepz'
    assert build_dataclass(Sample, {'stepz': '1'}, allow_unknown=True) == Sample()


@pytest.mark.parametrize('values', [{'steps': 'ten'}, {'flag': 'maybe'}, {'steps': '-1'}])
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        build_dataclass(Sample, values)


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / 'absent.cfg'))
    with pytest.raises(ConfigError):
        parse_overrides(['novalue'])
    assert load_config_file(None, {'a': '1'}) == {'a': '1'}


def test_cpu_device():
    assert resolve_device('cpu').type == 'cpu'


def test_error_records():
    record = CodecError('bad value', value=9, location=[1, 2]).to_record()
    assert record == {'status': 'error', 'error': 'bad value', 'type': 'CodecError', 'value': 9, 'location': [1, 2]}
    diverged = TrainingDiverged('nan', step=4, phase='pretrain')
    assert isinstance(diverged, CXRSynthError) and diverged.step == 4
    assert diverged.to_record()['phase'] == 'pretrain'
