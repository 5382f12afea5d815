import math

import numpy as np
import pytest
from scipy import integrate

from errors import ParameterError, SingularityError
from kernels import (DriftSpec, KernelSpec, LipschitzTerm, SingularTerm, assemble_drift, eval_kernel,
                     kernel_bound_constant, mean_field_drift, pairwise_kernel)
from measure_core import Density, EmpiricalMeasure, Grid
from metrics import sphere_area


# ==========================================
# KERNEL VALUES
# ==========================================

def test_coulomb_and_newton_in_the_plane():
    coulomb = KernelSpec('coulomb', 2)
    np.testing.assert_allclose(eval_kernel(coulomb, [1.0, 0.0], [0.0, 0.0]), [1.0 / (2 * math.pi), 0.0])
    np.testing.assert_allclose(eval_kernel(KernelSpec('newton', 2), [1.0, 0.0], [0.0, 0.0]),
                               [-1.0 / (2 * math.pi), 0.0])


def test_biot_savart_is_rotated_and_orthogonal():
    spec = KernelSpec('biot_savart', 2)
    value = eval_kernel(spec, [1.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(value, [0.0, 1.0 / (2 * math.pi)], atol=1e-15)
    z = np.array([0.3, -1.2])
    assert np.dot(eval_kernel(spec, z, [0.0, 0.0]), z) == pytest.approx(0.0, abs=1e-15)


def test_biot_savart_in_three_dimensions():
    spec = KernelSpec('biot_savart', 3)
    np.testing.assert_allclose(eval_kernel(spec, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                               [0.0, 1.0 / (4 * math.pi), 0.0], atol=1e-15)


def test_riesz_scaling():
    spec = KernelSpec('riesz', 1, kappa=1.0, beta=0.5)
    assert eval_kernel(spec, [1.0], [0.0])[0] == pytest.approx(1.0)
    assert eval_kernel(spec, [4.0], [0.0])[0] == pytest.approx(0.5)
    assert eval_kernel(spec, [-4.0], [0.0])[0] == pytest.approx(-0.5)


def test_shifted_riesz_adds_anchor_terms():
    plain = KernelSpec('riesz', 1, kappa=1.0, beta=0.5)
    shifted = KernelSpec('shifted_riesz', 1, kappa=1.0, beta=0.5, anchors=((2.0,),))
    value = eval_kernel(shifted, [1.0], [0.0])
    assert value[0] == pytest.approx(eval_kernel(plain, [1.0], [0.0])[0] + eval_kernel(plain, [2.0], [0.0])[0])


def test_regularization_and_singularity():
    singular = KernelSpec('coulomb', 2)
    with pytest.raises(SingularityError):
        eval_kernel(singular, [0.5, 0.5], [0.5, 0.5])
    blob = KernelSpec('coulomb', 2, epsilon=0.1)
    np.testing.assert_array_equal(eval_kernel(blob, [0.5, 0.5], [0.5, 0.5]), [0.0, 0.0])
    near = eval_kernel(blob, [1e-3, 0.0], [0.0, 0.0])
    assert np.all(np.isfinite(near)) and near[0] < 1.0


def test_cutoff_truncates():
    spec = KernelSpec('coulomb', 2, epsilon=0.01, cutoff=1.0)
    assert np.any(eval_kernel(spec, [0.5, 0.0], [0.0, 0.0]) != 0)
    np.testing.assert_array_equal(eval_kernel(spec, [1.5, 0.0], [0.0, 0.0]), [0.0, 0.0])


def test_kernel_validation():
    with pytest.raises(ParameterError):
        KernelSpec('gravity', 2)
    with pytest.raises(ParameterError):
        KernelSpec('biot_savart', 1)
    with pytest.raises(ParameterError):
        KernelSpec('riesz', 2, beta=2.0)
    with pytest.raises(ParameterError):
        KernelSpec('riesz', 2, kappa=0.0, beta=1.0)
    with pytest.raises(ParameterError):
        KernelSpec('coulomb', 2, epsilon=-1.0)
    with pytest.raises(ParameterError):
        KernelSpec('coulomb', 2, anchors=((0.0, 0.0),))


def test_pairwise_is_antisymmetric():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    spec = KernelSpec('coulomb', 2, epsilon=0.05)
    forward = pairwise_kernel(spec, x, y)
    backward = pairwise_kernel(spec, y, x)
    assert forward.shape == (6, 5, 2)
    np.testing.assert_allclose(forward, -backward.transpose(1, 0, 2))


# ==========================================
# MEAN FIELD / BOUND CONSTANT
# ==========================================

def test_mean_field_of_empirical_measure():
    spec = KernelSpec('coulomb', 2, epsilon=0.1)
    points = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, -1.0]])
    x = np.array([0.2, 0.3])
    expected = np.mean([eval_kernel(spec, x, p) for p in points], axis=0)
    np.testing.assert_allclose(mean_field_drift(spec, x, EmpiricalMeasure(points)), expected)


def test_mean_field_of_density_uses_quadrature():
    spec = KernelSpec('riesz', 1, kappa=1.0, beta=0.5, epsilon=0.1)
    grid = Grid(1, (0.0,), (0.25,), (5,))
    density = Density(grid, [0.0, 0.0, 0.0, 2.0, 2.0])
    expected = 0.5 * eval_kernel(spec, [-1.0], [0.75]) + 0.5 * eval_kernel(spec, [-1.0], [1.0])
    np.testing.assert_allclose(mean_field_drift(spec, [-1.0], density), expected)
    with pytest.raises(ParameterError):
        mean_field_drift(KernelSpec('coulomb', 2), [0.0, 0.0], density)


def test_kernel_bound_constant():
    spec = KernelSpec('riesz', 2, kappa=2.0, beta=0.5)
    bound = kernel_bound_constant(spec, 3.0)
    assert bound.finite
    assert bound.value == pytest.approx(sphere_area(2) * 2.0 ** 3 / (2 - 1.5))
    assert not kernel_bound_constant(spec, 4.0).finite
    assert bound.admissible == (1.0, 4.0)


# ==========================================
# DRIFT DECOMPOSITION
# ==========================================

def test_lipschitz_forms():
    x = np.array([[1.0, -2.0]])
    np.testing.assert_allclose(LipschitzTerm('ou', 2, rate=0.5)(0.0, x), [[-0.5, 1.0]])
    linear = LipschitzTerm('linear', 2, matrix=((0.0, 1.0), (-1.0, 0.0)))
    np.testing.assert_allclose(linear(0.0, x), [[-2.0, -1.0]])
    assert linear.lipschitz_constant == pytest.approx(1.0)
    np.testing.assert_allclose(LipschitzTerm('constant', 2, vector=(3.0, 4.0))(0.0, x), [[3.0, 4.0]])
    with pytest.raises(ParameterError):
        LipschitzTerm('linear', 2, matrix=((1.0,),))


def test_faithful_decomposition_needs_b1_zero_at_origin():
    with pytest.raises(ParameterError):
        DriftSpec(2, b1=LipschitzTerm('constant', 2, vector=(1.0, 0.0)), faithful=True)
    DriftSpec(2, b1=LipschitzTerm('constant', 2, vector=(1.0, 0.0)))
    DriftSpec(2, b1=LipschitzTerm('ou', 2), faithful=True)


def test_singular_term_class_k_check():
    with pytest.raises(ParameterError, match="d/p' \\+ 2/q' < 1"):
        SingularTerm(2, 1.0, (0.0, 0.0), 0.5, 3.0, 3.0)
    with pytest.raises(ParameterError):
        SingularTerm(2, 1.0, (0.0, 0.0), 0.5, 4.0, 8.0)
    term = SingularTerm(2, 1.0, (0.0, 0.0), 0.25, 4.0, 8.0)
    np.testing.assert_allclose(term(0.0, np.array([[2.0, 0.0]])), [[2.0 ** -0.25, 0.0]])
    with pytest.raises(SingularityError):
        term(0.0, np.zeros((1, 2)))


def test_assemble_drift():
    spec = KernelSpec('coulomb', 2, epsilon=0.1)
    drift = DriftSpec(2, kernel=spec, coupling=2.0, b1=LipschitzTerm('ou', 2))
    measure = EmpiricalMeasure(np.array([[1.0, 1.0]]))
    x = np.array([0.5, 0.0])
    expected = -x + 2.0 * eval_kernel(spec, x, [1.0, 1.0])
    np.testing.assert_allclose(assemble_drift(drift, 0.0, x, measure), expected)
    with pytest.raises(ParameterError):
        assemble_drift(drift, 0.0, x, None)
    np.testing.assert_allclose(assemble_drift(DriftSpec(2, b1=LipschitzTerm('ou', 2)), 0.0, x, None), -x)


# ==========================================
# KERNEL PROPERTIES
# ==========================================

ANTISYMMETRIC = [('coulomb', 2, {}), ('coulomb', 3, {}), ('newton', 2, {}), ('newton', 1, {}),
                 ('biot_savart', 2, {}), ('biot_savart', 3, {}), ('riesz', 1, {'beta': 0.5}),
                 ('riesz', 2, {'kappa': -1.5, 'beta': 1.2}), ('riesz', 3, {'beta': 2.5})]


@pytest.mark.parametrize('epsilon', [0.0, 0.05])
@pytest.mark.parametrize('family, dim, extra', ANTISYMMETRIC)
def test_kernels_are_antisymmetric(family, dim, extra, epsilon):
    spec = KernelSpec(family, dim, epsilon=epsilon, **extra)
    rng = np.random.default_rng(dim * 10 + len(family))
    for x, y in zip(rng.normal(size=(25, dim)), rng.normal(size=(25, dim))):
        np.testing.assert_allclose(eval_kernel(spec, x, y), -eval_kernel(spec, y, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize('family, dim, extra', ANTISYMMETRIC)
def test_blob_converges_monotonically(family, dim, extra):
    x, y = np.full(dim, 0.7), np.full(dim, -0.2)
    exact = eval_kernel(KernelSpec(family, dim, **extra), x, y)
    gaps = [np.linalg.norm(eval_kernel(KernelSpec(family, dim, epsilon=eps, **extra), x, y) - exact)
            for eps in (0.1, 0.05, 0.025, 0.0125)]
    assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.02 * np.linalg.norm(exact)


def test_riesz_magnitude_law():
    spec = KernelSpec('riesz', 2, kappa=-2.0, beta=0.75)
    for z in np.random.default_rng(4).normal(size=(10, 2)):
        assert np.linalg.norm(eval_kernel(spec, z, [0.0, 0.0])) == pytest.approx(2.0 * np.linalg.norm(z) ** -0.75,
                                                                                  rel=1e-12)


def test_bound_constant_closed_forms():
    assert kernel_bound_constant(KernelSpec('riesz', 2, kappa=1.0, beta=1.0), 1.0).value == pytest.approx(2 * math.pi)
    assert kernel_bound_constant(KernelSpec('biot_savart', 2), 1.0).value == pytest.approx(1.0)


@pytest.mark.parametrize('spec, k', [
    (KernelSpec('coulomb', 2), 1.5),
    (KernelSpec('coulomb', 3), 1.25),
    (KernelSpec('biot_savart', 2), 1.5),
    (KernelSpec('riesz', 2, kappa=2.0, beta=0.5), 3.0),
    (KernelSpec('riesz', 1, kappa=1.0, beta=0.25), 2.0),
])
def test_bound_constant_matches_radial_quadrature(spec, k):
    direction, origin = np.eye(spec.dim)[0], np.zeros(spec.dim)

    def shell(r):
        magnitude = np.linalg.norm(eval_kernel(spec, r * direction, origin))
        return sphere_area(spec.dim) * r ** (spec.dim - 1) * magnitude ** k

    numeric, _ = integrate.quad(shell, 0.0, 1.0, limit=200)
    assert numeric == pytest.approx(kernel_bound_constant(spec, k).value, rel=0.02)
