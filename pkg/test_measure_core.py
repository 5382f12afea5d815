import numpy as np
import pytest

from errors import CoverageError, ParameterError, RangeError, ShapeError
from measure_core import (Density, EmpiricalMeasure, Grid, InitialLaw, MeasureFlow, auto_grid, evaluate_density,
                          flow_from_laws, flow_interpolate, kde_estimate, sample_initial, silverman_bandwidth)


# ==========================================
# GRID / DENSITY
# ==========================================

def test_centered_grid_endpoints():
    grid = Grid.centered(2, 3.0, 7)
    assert grid.counts == (7, 7)
    np.testing.assert_allclose(grid.lower, [-3.0, -3.0])
    np.testing.assert_allclose(grid.upper, [3.0, 3.0])
    assert grid.nodes().shape == (49, 2)


def test_grid_validation():
    with pytest.raises(ParameterError):
        Grid(1, (0.0,), (0.0,), (10,))
    with pytest.raises(ParameterError):
        Grid(1, (0.0,), (0.1,), (1,))
    with pytest.raises(ParameterError):
        Grid(4, 0.0, 0.1, 10)
    with pytest.raises(ShapeError):
        Grid(2, (0.0, 0.0), (0.1, 0.1), (10, 10, 10))


def test_density_requires_unit_mass(line_grid):
    with pytest.raises(ParameterError):
        Density(line_grid, np.ones(5))
    density = Density.normalized(line_grid, np.ones(5))
    assert density.mass == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        Density(line_grid, [1.6, 1.6, 1.6, 1.6, -2.4])
    with pytest.raises(ShapeError):
        Density(line_grid, np.full(4, 1.0))


def test_density_is_read_only(uniform_density):
    with pytest.raises(ValueError):
        uniform_density.values[0] = 1.0


def test_empirical_measure_shapes():
    assert EmpiricalMeasure(np.arange(4.0)).points.shape == (4, 1)
    with pytest.raises(ShapeError):
        EmpiricalMeasure(np.zeros((3, 4)))
    with pytest.raises(ParameterError):
        EmpiricalMeasure([[np.nan]])


# ==========================================
# INITIAL LAWS / SAMPLING
# ==========================================

def test_gaussian_sample_moments():
    law = InitialLaw.gaussian([1.0, -2.0], std=[0.5, 2.0])
    points = sample_initial(law, 20000, 5).points
    np.testing.assert_allclose(points.mean(axis=0), [1.0, -2.0], atol=0.05)
    np.testing.assert_allclose(points.std(axis=0), [0.5, 2.0], rtol=0.03)


def test_sampling_is_reproducible_and_prefix_stable():
    law = InitialLaw.uniform([0.0], [2.0])
    a = sample_initial(law, 100, 9).points
    np.testing.assert_array_equal(a, sample_initial(law, 100, 9).points)
    np.testing.assert_array_equal(a[:40], sample_initial(law, 40, 9).points)
    assert np.all((a >= 0) & (a <= 2))


def test_dirac_and_mixture():
    assert np.all(sample_initial(InitialLaw.dirac([3.0, 4.0]), 10, 0).points == [3.0, 4.0])
    mix = InitialLaw.mixture([1.0, 3.0], [[-5.0], [5.0]], [0.1, 0.1])
    points = sample_initial(mix, 8000, 1).points[:, 0]
    assert np.mean(points > 0) == pytest.approx(0.75, abs=0.02)


def test_power_law_stays_in_ball():
    law = InitialLaw.power_law(2, 1.0, radius=2.0)
    radii = np.linalg.norm(sample_initial(law, 5000, 3).points, axis=1)
    assert radii.max() <= 2.0
    with pytest.raises(ParameterError):
        InitialLaw.power_law(2, 2.5)


def test_law_validation():
    with pytest.raises(ParameterError):
        InitialLaw.gaussian([0.0], std=-1.0)
    with pytest.raises(ParameterError):
        InitialLaw.uniform([1.0], [0.0])
    with pytest.raises(ParameterError):
        sample_initial(InitialLaw.dirac([0.0]), 0, 1)


def test_evaluate_density():
    grid = Grid.centered(1, 6.0, 241)
    density = evaluate_density(InitialLaw.gaussian([1.0], std=1.0), grid)
    assert density.mass == pytest.approx(1.0)
    assert grid.axes()[0][np.argmax(density.values)] == pytest.approx(1.0, abs=0.05)
    assert evaluate_density(InitialLaw.dirac([0.0]), grid) is None
    with pytest.raises(ShapeError):
        evaluate_density(InitialLaw.dirac([0.0, 0.0]), grid)


# ==========================================
# KDE
# ==========================================

def test_kde_matches_gaussian():
    law = InitialLaw.gaussian([0.0], std=1.0)
    sample = sample_initial(law, 20000, 2)
    grid = auto_grid(sample)
    estimate = kde_estimate(sample, grid)
    exact = evaluate_density(law, grid)
    assert estimate.mass == pytest.approx(1.0)
    assert np.abs(estimate.values - exact.values).sum() * grid.cell_volume < 0.05


def test_kde_coverage_error():
    sample = EmpiricalMeasure(np.array([[0.0], [5.0]]))
    with pytest.raises(CoverageError) as info:
        kde_estimate(sample, Grid.centered(1, 1.0, 21), bandwidth=0.1)
    assert info.value.points.shape[0] == 1


def test_auto_grid_covers_sample():
    sample = sample_initial(InitialLaw.gaussian([0.0, 0.0], std=[1.0, 3.0]), 2000, 4)
    grid = auto_grid(sample)
    assert not np.any(grid.uncovered(sample.points, 3.0 * silverman_bandwidth(sample)))
    assert kde_estimate(sample, grid).mass == pytest.approx(1.0)


def test_kde_of_a_point_mass():
    sample = sample_initial(InitialLaw.dirac([0.0]), 50, 0)
    density = kde_estimate(sample, auto_grid(sample))
    assert density.mass == pytest.approx(1.0)


# ==========================================
# FLOWS
# ==========================================

def test_flow_interpolate_is_piecewise_constant():
    grid = Grid.centered(1, 5.0, 101)
    laws = [InitialLaw.gaussian([0.0], std=s) for s in (1.0, 1.5, 2.0)]
    flow = flow_from_laws([0.0, 0.5, 1.0], grid, laws)
    assert flow_interpolate(flow, 0.49) is flow.densities[0]
    assert flow_interpolate(flow, 0.5) is flow.densities[1]
    assert flow_interpolate(flow, 1.0) is flow.densities[2]
    with pytest.raises(RangeError):
        flow_interpolate(flow, 1.5)


def test_flow_without_initial_density():
    grid = Grid.centered(1, 5.0, 101)
    density = evaluate_density(InitialLaw.gaussian([0.0]), grid)
    flow = MeasureFlow([0.0, 1.0], (None, density), InitialLaw.dirac([0.0]))
    assert flow_interpolate(flow, 0.0) is density
    with pytest.raises(ParameterError):
        MeasureFlow([0.0, 1.0], (None, density))


def test_flow_mesh_validation():
    grid = Grid.centered(1, 5.0, 101)
    density = evaluate_density(InitialLaw.gaussian([0.0]), grid)
    with pytest.raises(ParameterError):
        MeasureFlow.constant(density, [0.0, 0.5, 0.5])
    with pytest.raises(ParameterError):
        MeasureFlow.constant(density, [0.1, 0.5])
    other = evaluate_density(InitialLaw.gaussian([0.0]), Grid.centered(1, 4.0, 101))
    with pytest.raises(ShapeError):
        MeasureFlow([0.0, 1.0], (density, other))
