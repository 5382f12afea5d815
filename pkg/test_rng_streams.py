import numpy as np
import pytest

from errors import ParameterError
from rng_streams import STREAMS, derive_seed, normals, uniforms


def test_uniforms_lie_in_open_unit_interval():
    u = uniforms(7, 'noise', 3, np.arange(1000), 4)
    assert u.shape == (1000, 4)
    assert np.all(u > 0) and np.all(u < 1)


def test_rows_depend_only_on_particle_id():
    full = normals(11, 'noise', 5, np.arange(50), 3)
    picked = normals(11, 'noise', 5, [42, 3, 17], 3)
    np.testing.assert_array_equal(picked, full[[42, 3, 17]])


def test_streams_and_steps_are_independent():
    ids = np.arange(100)
    base = uniforms(1, 'noise', 0, ids, 2)
    assert not np.array_equal(base, uniforms(1, 'init', 0, ids, 2))
    assert not np.array_equal(base, uniforms(1, 'noise', 1, ids, 2))
    assert not np.array_equal(base, uniforms(2, 'noise', 0, ids, 2))
    np.testing.assert_array_equal(base, uniforms(1, 'noise', 0, ids, 2))


def test_normals_are_standard():
    z = normals(3, 'reference', 0, np.arange(40000), 2)
    assert abs(z.mean()) < 0.02
    assert z.std() == pytest.approx(1.0, abs=0.02)


def test_odd_width_normals():
    assert normals(3, 'picard', 0, np.arange(10), 3).shape == (10, 3)


def test_empty_ids():
    assert uniforms(0, 'init', 0, [], 3).shape == (0, 3)


def test_invalid_inputs():
    with pytest.raises(ParameterError):
        uniforms(-1, 'noise', 0, [0], 1)
    with pytest.raises(ParameterError):
        uniforms(0, 'bogus', 0, [0], 1)
    with pytest.raises(ParameterError):
        uniforms(0, 'noise', 0, [-3], 1)


def test_derive_seed():
    assert derive_seed(42, 2, 0) == derive_seed(42, 2, 0)
    children = {derive_seed(42, 2, j) for j in range(20)}
    assert len(children) == 20
    assert derive_seed(42, 1, 0) != derive_seed(42, 2, 0)
    with pytest.raises(ParameterError):
        derive_seed(-5)


def test_stream_names():
    assert set(STREAMS) == {'init', 'noise', 'reference', 'picard', 'experiment'}
