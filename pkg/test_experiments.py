import inspect
import math

import numpy as np
import pytest

from errors import ParameterError
from kernels import DriftSpec, KernelSpec
from measure_core import InitialLaw
from picard_solver import PicardConfig, class_d_check
from experiments import (RUNNERS, SCENARIOS, ExperimentReport, fit_loglog_slope, regression_through_origin,
                         run_decay_slope, run_entropy_cost, run_kstar_wasserstein, run_lamb_oseen,
                         run_picard_contraction, run_two_vortex)
from sde_engine import SdeConfig, SigmaSpec


def test_every_scenario_has_a_runner():
    assert set(SCENARIOS) == set(RUNNERS)


def test_fit_helpers():
    t = np.array([0.01, 0.05, 0.1, 0.2])
    assert fit_loglog_slope(t, 3.0 * t ** -0.75) == pytest.approx(-0.75)
    slope, r2 = regression_through_origin([0.1, 0.2, 0.4], [0.3, 0.6, 1.2])
    assert slope == pytest.approx(3.0)
    assert r2 == pytest.approx(1.0)


def test_report_json_has_no_wall_time():
    report = ExperimentReport('two_vortex', 'abc', {'T': 1.0}, wall_time=12.5)
    report.check('ok', True, 'fine')
    report.check('bad', False, 'broken')
    payload = report.to_json_dict()
    assert 'wall_time' not in payload
    assert not payload['passed']
    assert [c.name for c in report.failures()] == ['bad']


# ==========================================
# VORTICES
# ==========================================

def test_two_vortices_co_rotate(baseline):
    report = run_two_vortex(seed=1, thresholds=baseline['two_vortex'], T=0.5, dt=1e-3)
    assert report.passed, report.failures()
    assert report.measured['centre_drift'].value == 0.0
    assert report.measured['angle'].value == pytest.approx(report.measured['angle_exact'].value, rel=1e-5)
    assert report.tables['trajectory']['particle'].nunique() == 2


@pytest.mark.slow
def test_lamb_oseen(baseline):
    report = run_lamb_oseen(nu=0.5, sigma0=1.0, N=2000, dt=0.01, T=1.0, epsilon=0.05, seed=2024,
                            thresholds=baseline['lamb_oseen'], n_seeds=10)
    assert report.passed, report.failures()
    assert report.measured['variance'].value == pytest.approx(2.0, rel=0.1)


# ==========================================
# DECAY SLOPE
# ==========================================

def test_frozen_point_mass_has_flat_norms(baseline):
    report = run_decay_slope(k=2.0, d=1, T=0.2, N=200, seed=1, thresholds=baseline['decay_slope'],
                             n_times=4, dt=0.01, sigma_scale=0.0, n_seeds=2)
    assert report.passed, report.failures()
    assert report.measured['slope_predicted'].value == 0.0
    norms = report.tables['norms']['kstar_norm']
    assert norms.max() == pytest.approx(norms.min())


def test_decay_slope_requires_class_d():
    with pytest.raises(ParameterError, match='class D'):
        run_decay_slope(k=2.0, d=2, T=0.2, N=10, seed=0, thresholds={})
    with pytest.raises(ParameterError):
        run_decay_slope(k=3.0, d=2, T=0.2, N=10, seed=0, thresholds={}, t_min=0.5)


@pytest.mark.slow
def test_brownian_decay_slope(baseline):
    report = run_decay_slope(k=3.0, d=2, T=0.2, N=100000, seed=5, thresholds=baseline['decay_slope'],
                             t_min=0.01, n_times=8, dt=1e-3, n_seeds=10)
    assert report.passed, report.failures()
    assert report.measured['slope'].value == pytest.approx(-1.0 / 3.0, rel=baseline['decay_slope']['relative_tolerance'])


# ==========================================
# ENTROPY COST / K* VS WASSERSTEIN
# ==========================================

def test_entropy_cost_translation_is_exact(baseline):
    report = run_entropy_cost(mean_offset=0.5, t_grid=[0.5], N=2000, seed=3, thresholds=baseline['entropy_cost'],
                              dt=0.05, n_seeds=2)
    assert report.measured['w2_initial'].value == pytest.approx(0.5, abs=1e-12)
    verdicts = {c.name: c.passed for c in report.criteria}
    assert verdicts['w2_translation']
    assert verdicts['entropy_finite']
    table = report.tables['entropy_cost']
    assert table['entropy_exact'].iloc[0] == pytest.approx(0.25 / 3.0)


def test_entropy_cost_validation(baseline):
    with pytest.raises(ParameterError):
        run_entropy_cost(0.5, [0.0, 1.0], 100, 0, baseline['entropy_cost'])
    with pytest.raises(ParameterError, match='regularized'):
        run_entropy_cost(0.5, [1.0], 100, 0, baseline['entropy_cost'], kernel=KernelSpec('coulomb', 1))


@pytest.mark.slow
def test_entropy_cost_matches_closed_form(baseline):
    report = run_entropy_cost(mean_offset=0.5, t_grid=[0.25, 0.5, 1.0], N=20000, seed=3,
                              thresholds=baseline['entropy_cost'], dt=0.01, n_seeds=10)
    assert report.passed, report.failures()


def test_kstar_wasserstein_bookkeeping(baseline):
    report = run_kstar_wasserstein(offsets=[0.0, 0.2, 0.4], t=0.2, k=2.0, p=4.0, q=2.0, seed=17,
                                   thresholds=baseline['kstar_wasserstein'], N=2000, dt=0.02, n_seeds=2)
    table = report.tables['distances']
    assert len(table) == 12
    assert table['seed'].nunique() == 2
    np.testing.assert_allclose(table['wasserstein'], table['offset'], atol=1e-12)
    verdicts = {c.name: c.passed for c in report.criteria}
    assert verdicts['zero_offset']


def test_kstar_wasserstein_verdicts_use_the_seed_median(baseline):
    report = run_kstar_wasserstein(offsets=[0.0, 0.2, 0.4], t=0.2, k=2.0, p=4.0, q=2.0, seed=17,
                                   thresholds=baseline['kstar_wasserstein'], N=1000, dt=0.05, n_seeds=3)
    fits = report.tables['fits']
    assert len(fits) == 3
    assert report.measured['r_squared'].value == pytest.approx(float(np.median(fits['r_squared'])))
    assert report.measured['slope_ratio'].value == pytest.approx(float(np.median(fits['slope_ratio'])))
    assert report.params['n_seeds'] == 3


def test_runners_default_to_ten_seeds():
    for runner in (run_lamb_oseen, run_decay_slope, run_entropy_cost, run_kstar_wasserstein,
                   run_picard_contraction):
        assert inspect.signature(runner).parameters['n_seeds'].default == 10


def test_kstar_wasserstein_requires_class_d(baseline):
    with pytest.raises(ParameterError, match='class D'):
        run_kstar_wasserstein([0.1], 0.2, k=1.5, p=2.0, q=2.0, seed=0, thresholds=baseline['kstar_wasserstein'],
                              d=3, N=10)


@pytest.mark.slow
def test_kstar_wasserstein_proportionality(baseline):
    report = run_kstar_wasserstein(offsets=[0.0, 0.1, 0.2, 0.4], t=0.5, k=2.0, p=4.0, q=2.0, seed=17,
                                   thresholds=baseline['kstar_wasserstein'], N=20000, dt=0.01, n_seeds=10)
    assert report.passed, report.failures()


# ==========================================
# PICARD CONTRACTION
# ==========================================

@pytest.mark.slow
def test_picard_contraction(baseline):
    kernel = KernelSpec('riesz', 1, kappa=1.0, beta=0.5, epsilon=0.1)
    sde = SdeConfig(1, DriftSpec(1, kernel=kernel), SigmaSpec.scaled_identity(1), 0.05, 0.001, 2000, seed=42)
    cfg = PicardConfig(class_d_check(1, 4.0, 2.0), sde, M=2000, mesh_size=8, max_iter=12, beta0=1.0)
    report = run_picard_contraction(InitialLaw.gaussian([0.0]), cfg, seed=42,
                                    thresholds=baseline['picard_contraction'], n_seeds=10, use_tau_horizon=True,
                                    triangle_particles=2000)
    assert report.passed, report.failures()
    assert not report.tables['iterations'].empty
    assert math.isfinite(report.measured['horizon'].value)
