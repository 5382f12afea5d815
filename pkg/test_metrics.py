import itertools
import logging
import math

import numpy as np
import pytest
from scipy.stats import norm

from errors import ConvergenceError, ParameterError, ShapeError
from measure_core import Density, EmpiricalMeasure, Grid, InitialLaw, evaluate_density, kde_estimate, sample_initial
from metrics import (KStarParams, covering_constants, dual_oracle_bounds, kstar_distance, kstar_norm_dual_oracle,
                     kstar_norm_surrogate, overlap_multiplicity, relative_entropy, tv_distance, unit_ball_volume,
                     wasserstein_q)


def test_kstar_params():
    with pytest.raises(ParameterError):
        KStarParams(1.0)
    with pytest.raises(ParameterError):
        KStarParams(2.0, r=0.5).radius(2)
    assert KStarParams(2.0).radius(2) == pytest.approx(math.sqrt(2))
    assert KStarParams(math.inf).k_star_dual_exponent == 1.0
    assert KStarParams(3.0).k_star_dual_exponent == pytest.approx(1.5)


# ==========================================
# TOTAL VARIATION / ENTROPY
# ==========================================

def test_tv_by_hand(uniform_density, step_density):
    assert tv_distance(uniform_density, step_density) == pytest.approx(1.2)
    assert tv_distance(step_density, uniform_density) == pytest.approx(1.2)
    assert tv_distance(uniform_density, uniform_density) == 0.0


def test_relative_entropy_by_hand(uniform_density, step_density):
    assert relative_entropy(step_density, uniform_density) == pytest.approx(math.log(2.5))
    assert relative_entropy(uniform_density, uniform_density) == 0.0
    assert math.isinf(relative_entropy(uniform_density, step_density))


def test_grids_must_match(uniform_density, gaussian_1d):
    with pytest.raises(ShapeError):
        tv_distance(uniform_density, gaussian_1d)


# ==========================================
# K* SURROGATE
# ==========================================

def test_surrogate_at_infinite_k_counts_overlaps(gaussian_1d):
    r = 1.0
    expected = float((gaussian_1d.values * overlap_multiplicity(gaussian_1d.grid, r)).sum()
                     * gaussian_1d.grid.cell_volume)
    value = kstar_norm_surrogate(gaussian_1d, KStarParams(math.inf, r))
    assert value == pytest.approx(expected, rel=1e-9)
    assert value >= 1.0


def test_surrogate_matches_closed_form_lattice_sum(gaussian_1d):
    # ||g 1_{B(z,1)}||_2^2 = (Phi(sqrt2 (z+1)) - Phi(sqrt2 (z-1))) / (2 sqrt(pi)) for g = N(0, 1)
    closed = sum(math.sqrt((norm.cdf(math.sqrt(2) * (z + 1)) - norm.cdf(math.sqrt(2) * (z - 1)))
                           / (2.0 * math.sqrt(math.pi))) for z in range(-9, 10))
    value = kstar_norm_surrogate(gaussian_1d, KStarParams(2.0, 1.0))
    assert value == pytest.approx(closed, rel=0.05)
    l2 = (1.0 / (2.0 * math.sqrt(math.pi))) ** 0.5
    assert value >= l2


def test_kstar_distance_properties(gaussian_1d):
    grid = gaussian_1d.grid
    x = grid.axes()[0]
    shifted = Density.normalized(grid, np.exp(-0.5 * (x - 0.5) ** 2))
    far = Density.normalized(grid, np.exp(-0.5 * (x - 1.0) ** 2))
    params = KStarParams(2.0)
    assert kstar_distance(gaussian_1d, gaussian_1d, params) == 0.0
    ab = kstar_distance(gaussian_1d, shifted, params)
    assert ab == pytest.approx(kstar_distance(shifted, gaussian_1d, params))
    assert 0 < ab < kstar_distance(gaussian_1d, far, params)


def test_overlap_multiplicity_in_one_dimension():
    grid = Grid(1, (0.0,), (0.5,), (9,))
    counts = overlap_multiplicity(grid, 1.0)
    # interior half-integers sit in two balls, integers in three
    assert counts[4] == 3
    assert counts[3] == 2


def test_covering_constants():
    c = covering_constants(1, 1.0)
    assert c.lattice_cover >= 2
    assert c.c_of_r == max(c.lattice_cover, c.unit_cover)
    assert covering_constants(2, math.sqrt(2)).c_of_r >= covering_constants(1, 1.0).c_of_r


# ==========================================
# DUAL ORACLE
# ==========================================

def test_oracle_at_infinite_k_is_mass(uniform_density):
    bounds = dual_oracle_bounds(uniform_density, KStarParams(math.inf))
    assert bounds.converged
    assert bounds.lower == pytest.approx(1.0)


def test_oracle_brackets():
    grid = Grid.centered(1, 4.0, 81)
    x = grid.axes()[0]
    mu = Density.normalized(grid, np.exp(-0.5 * x * x))
    bounds = dual_oracle_bounds(mu, KStarParams(2.0), tol=1e-4, max_iter=300)
    assert 0 < bounds.lower <= bounds.upper * (1 + 1e-12)
    assert bounds.iterations <= 300


def test_oracle_reports_non_convergence():
    grid = Grid.centered(1, 4.0, 81)
    x = grid.axes()[0]
    mu = Density.normalized(grid, np.exp(-0.5 * x * x))
    bounds = dual_oracle_bounds(mu, KStarParams(2.0), tol=1e-14, max_iter=3)
    if not bounds.converged:
        with pytest.raises(ConvergenceError) as info:
            kstar_norm_dual_oracle(mu, KStarParams(2.0), tol=1e-14, max_iter=3)
        assert info.value.lower <= info.value.upper


def test_oracle_rejects_three_dimensions():
    grid = Grid(3, (0.0,) * 3, (0.5,) * 3, (4,) * 3)
    mu = Density.normalized(grid, np.ones(grid.shape))
    with pytest.raises(ParameterError):
        dual_oracle_bounds(mu, KStarParams(2.0))


# ==========================================
# WASSERSTEIN
# ==========================================

def test_wasserstein_translation_in_one_dimension():
    a = EmpiricalMeasure(np.linspace(-1.0, 1.0, 101))
    b = EmpiricalMeasure(np.linspace(-1.0, 1.0, 101)[::-1] + 0.3)
    assert wasserstein_q(a, b, 2.0) == pytest.approx(0.3)
    assert wasserstein_q(a, b, 1.0) == pytest.approx(0.3)


def test_wasserstein_is_permutation_invariant():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(64, 2))
    a = EmpiricalMeasure(points)
    b = EmpiricalMeasure(points[rng.permutation(64)])
    assert wasserstein_q(a, b, 2.0) == pytest.approx(0.0, abs=1e-12)
    shifted = EmpiricalMeasure(points + [0.0, 0.25])
    assert wasserstein_q(a, shifted, 2.0) <= 0.25 + 1e-12


def test_wasserstein_validation():
    a = EmpiricalMeasure(np.zeros((4, 1)))
    with pytest.raises(ParameterError):
        wasserstein_q(a, a, 0.5)
    with pytest.raises(ShapeError):
        wasserstein_q(a, EmpiricalMeasure(np.zeros((5, 1))), 2.0)


# ==========================================
# PROPERTIES ON RANDOM DENSITIES
# ==========================================

# nodes sit at cell midpoints, so a discrete ball B(z, 1) holds exactly 20 cells of volume 0.1
MIDPOINT_GRID = Grid(1, (-3.95,), (0.1,), (80,))


def _random_mixture(rng, grid, components=3):
    law = InitialLaw.mixture(rng.uniform(0.2, 1.0, components), rng.uniform(-2.0, 2.0, components),
                             rng.uniform(0.3, 1.0, components))
    return evaluate_density(law, grid)


@pytest.fixture(scope='module')
def random_triples():
    rng = np.random.default_rng(2024)
    return [tuple(_random_mixture(rng, MIDPOINT_GRID) for _ in range(3)) for _ in range(100)]


def test_kstar_distance_triangle_inequality(random_triples):
    params = KStarParams(2.0)
    for a, b, c in random_triples:
        ac = kstar_distance(a, c, params)
        assert ac <= (kstar_distance(a, b, params) + kstar_distance(b, c, params)) * (1 + 1e-12)


def test_kstar_distance_dominates_total_variation(random_triples):
    for k in (1.5, 2.0, 4.0):
        params = KStarParams(k)
        scale = (unit_ball_volume(1) * params.radius(1)) ** (-1.0 / k)
        for a, b, _ in random_triples:
            assert kstar_distance(a, b, params) >= scale * tv_distance(a, b) * (1 - 1e-12)


def test_surrogate_exponent_monotonicity(random_triples):
    ball = unit_ball_volume(1) * 1.0
    for k, p in ((1.5, 2.0), (2.0, 4.0), (2.0, math.inf)):
        factor = ball ** (1.0 / k - (0.0 if math.isinf(p) else 1.0 / p))
        for mu, _, _ in random_triples[:30]:
            high = kstar_norm_surrogate(mu, KStarParams(p))
            assert high <= factor * kstar_norm_surrogate(mu, KStarParams(k)) * (1 + 1e-12)


def test_pinsker_inequality(random_triples):
    for a, b, _ in random_triples:
        assert tv_distance(a, b) <= math.sqrt(2.0 * relative_entropy(a, b)) + 1e-12


def test_surrogate_is_sandwiched_by_the_oracle():
    rng = np.random.default_rng(7)
    grid = Grid.centered(1, 6.0, 121)
    params = KStarParams(2.0)
    c = covering_constants(1, params.radius(1)).c_of_r
    for _ in range(20):
        mu = _random_mixture(rng, grid)
        ratio = kstar_norm_surrogate(mu, params) / kstar_norm_dual_oracle(mu, params, tol=1e-3)
        assert 1.0 / c <= ratio <= c


def test_oracle_of_uniform_on_the_unit_interval():
    grid = Grid(1, (-0.99,), (0.02,), (150,))
    mu = evaluate_density(InitialLaw.uniform([0.0], [1.0]), grid)
    assert kstar_norm_dual_oracle(mu, KStarParams(2.0), tol=1e-4) == pytest.approx(1.0, rel=0.02)


# ==========================================
# GAUSSIAN CLOSED FORMS
# ==========================================

def test_tv_of_shifted_gaussians(gaussian_1d):
    x = gaussian_1d.grid.axes()[0]
    shifted = Density.normalized(gaussian_1d.grid, np.exp(-0.5 * (x - 0.5) ** 2))
    # L1 distance of N(0, 1) and N(m, 1) is 2 (2 Phi(m / 2) - 1)
    assert tv_distance(gaussian_1d, shifted) == pytest.approx(2.0 * (2.0 * norm.cdf(0.25) - 1.0), abs=0.01)


@pytest.mark.parametrize('offset', [0.5, 1.0])
def test_kde_entropy_of_translated_gaussian_samples(offset):
    points = np.random.default_rng(11).normal(size=100000)
    h = 0.3
    grid = Grid.centered(1, 8.0, 801)
    base = kde_estimate(EmpiricalMeasure(points), grid, bandwidth=h)
    moved = kde_estimate(EmpiricalMeasure(points + offset), grid, bandwidth=h)
    # both estimates are close to Gaussians with variance sigma_hat^2 + h^2
    exact = offset ** 2 / (2.0 * (points.var() + h * h))
    assert relative_entropy(moved, base) == pytest.approx(exact, rel=0.02)


def test_kde_error_shrinks_with_sample_size():
    grid = Grid.centered(1, 8.0, 401)
    truth = evaluate_density(InitialLaw.gaussian([0.0]), grid)
    votes = 0
    for seed in range(3):
        errors = [tv_distance(kde_estimate(sample_initial(InitialLaw.gaussian([0.0]), n, seed), grid), truth)
                  for n in (1000, 10000, 100000)]
        votes += errors[0] >= errors[1] >= errors[2]
    assert votes >= 2


# ==========================================
# WASSERSTEIN OPTIMALITY
# ==========================================

@pytest.mark.parametrize('n', [3, 6, 8])
def test_wasserstein_matches_brute_force_in_the_plane(n):
    rng = np.random.default_rng(n)
    a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2) ** 2
    best = min(cost[np.arange(n), list(perm)].mean() for perm in itertools.permutations(range(n)))
    assert wasserstein_q(EmpiricalMeasure(a), EmpiricalMeasure(b), 2.0) == pytest.approx(math.sqrt(best), rel=1e-12)


def test_wasserstein_orders_are_monotone():
    rng = np.random.default_rng(5)
    for dim in (1, 2):
        for _ in range(20):
            a = EmpiricalMeasure(rng.normal(size=(40, dim)))
            b = EmpiricalMeasure(rng.standard_t(3.0, size=(40, dim)) + 0.5)
            w1, w2, w4 = (wasserstein_q(a, b, q) for q in (1.0, 2.0, 4.0))
            assert w1 <= w2 * (1 + 1e-12)
            assert w2 <= w4 * (1 + 1e-12)


# ==========================================
# LOGGING
# ==========================================

def test_clipped_negative_entropy_is_logged(caplog):
    grid = Grid(1, (0.0,), (0.5,), (2,))
    # the reference carries slightly more mass than mu, within the density tolerance
    mu = Density(grid, [1.0, 1.0])
    nu = Density(grid, [1.0 + 4e-7, 1.0 + 4e-7])
    with caplog.at_level(logging.WARNING, logger='metrics'):
        assert relative_entropy(mu, nu) == 0.0
    assert any('discretization' in record.getMessage() for record in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger='metrics'):
        relative_entropy(nu, mu)
    assert not caplog.records
