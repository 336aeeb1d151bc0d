import numpy as np
import pytest

from modules.dataset_io import PhantomConfig, make_phantoms
from modules.errors import ConfigError, ShapeError
from modules.quality_probes import check_map, diversity, label_sanity


def test_identical_samples_have_zero_variance():
    grid = np.random.default_rng(0).random((8, 8))
    stats = diversity([grid, grid, grid], training=[grid])
    assert stats.variance_max == 0.0
    assert stats.nn_distances == [0.0, 0.0, 0.0]
    assert stats.nn_min == 0.0


def test_variance_and_nearest_neighbor():
    a, b = np.zeros((4, 4)), np.ones((4, 4))
    stats = diversity([a, b], training=[np.full((4, 4), 0.25), np.ones((4, 4))])
    assert stats.variance_mean == pytest.approx(0.25)
    assert stats.nn_distances == [0.25, 0.0]
    assert stats.to_dict()['nn_mean'] == pytest.approx(0.125)


def test_without_training_grids():
    stats = diversity([np.zeros((2, 2)), np.ones((2, 2))])
    assert stats.nn_distances == [] and stats.nn_mean is None


def test_diversity_errors():
    with pytest.raises(ConfigError):
        diversity([np.zeros((2, 2))])
    with pytest.raises(ShapeError):
        diversity([np.zeros((2, 2)), np.zeros((3, 3))])
    with pytest.raises(ShapeError):
        diversity([np.zeros((2, 2)), np.zeros((2, 2))], training=[np.zeros((3, 3))])


def test_touching_lungs_fail_disjointness():
    labels = np.zeros((6, 6), dtype=np.uint8)
    labels[1:4, 1:3] = 1
    labels[1:4, 3:5] = 2
    labels[5, 5] = 3
    assert check_map(labels) == {'right_lung_present': True, 'left_lung_present': True,
                                 'lungs_disjoint': False, 'heart_present': True}
    labels[:, 3] = 0
    assert check_map(labels)['lungs_disjoint']


def test_phantoms_pass_every_check():
    maps = [e.labels for e in make_phantoms(PhantomConfig(seed=4, size=64, count=5))]
    result = label_sanity(maps + [np.zeros((64, 64), dtype=np.uint8)])
    assert result['maps'] == 6
    assert result['all_passed'] == pytest.approx(5 / 6)
    assert result['heart_present'] == pytest.approx(5 / 6)
    assert label_sanity([])['all_passed'] == 0.0
