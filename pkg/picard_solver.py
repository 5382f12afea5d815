"""
Picard fixed-point construction on measure flows

mu -> Phi(mu) is the law of the decoupled SDE driven by the frozen flow mu, estimated with
M particles and a grid KDE at every mesh node. Progress is measured in the weighted metric

    rho_lambda(mu, nu) = max_{t > 0} exp(-lambda t) t^{decay} ||mu_t - nu_t||_{k*}

and the exponent pair (p, k) must belong to class D before anything runs.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import DivergenceError, ParameterError, ShapeError
from measure_core import (DEFAULT_NODES, Density, EmpiricalMeasure, Grid, InitialLaw, MeasureFlow,
                          evaluate_density, kde_estimate, sample_initial)
from metrics import KStarParams, kstar_distance, kstar_norm_surrogate
from rng_streams import derive_seed
from sde_engine import SdeConfig, simulate_decoupled

logger = logging.getLogger(__name__)

RATIO_ALERT = 0.9
NON_CONTRACTION_RUN = 3

# seed labels for derive_seed(base, label, index)
SEED_START, SEED_FLOOR, SEED_ITERATE, SEED_CHECK = 0, 1, 2, 3


def _inverse(v: float) -> float:
    return 0.0 if math.isinf(v) else 1.0 / v


# ==========================================
# EXPONENTS
# ==========================================

@dataclass(frozen=True)
class ExponentParams:
    d: int
    p: float
    k: float
    theta: float
    decay_exponent: float
    in_class_D: bool

    def inequality(self) -> str:
        """The class-D inequality with numbers filled in"""
        lhs = _inverse(self.k) - 1.0 / self.d
        rhs = _inverse(self.p)
        verdict = '<' if lhs < rhs else '>='
        return f"1/k - 1/d < 1/p: 1/{self.k:g} - 1/{self.d} = {lhs:.6g} {verdict} {rhs:.6g} = 1/{self.p:g}"

    def describe(self) -> Dict[str, Any]:
        return {'d': self.d, 'p': self.p, 'k': self.k, 'theta': self.theta,
                'decay_exponent': self.decay_exponent, 'in_class_D': self.in_class_D}


def class_d_check(d: int, p: float, k: float) -> ExponentParams:
    """Membership of (p, k) in class D for dimension d, with theta and the decay exponent"""
    if d < 1:
        raise ParameterError(f"dimension must be >= 1, got {d}")
    if k < 1 or p < k:
        raise ParameterError(f"exponents must satisfy 1 <= k <= p <= inf, got k={k}, p={p}")
    if math.isinf(k):
        decay = 0.0
    elif math.isinf(p):
        decay = d / (2.0 * k)
    else:
        decay = d * (p - k) / (2.0 * p * k)
    in_d = _inverse(k) - 1.0 / d < _inverse(p)
    return ExponentParams(d, float(p), float(k), 0.5 - decay, decay, in_d)


def class_d_table(cases: Iterable[Tuple[int, float, float]]) -> pd.DataFrame:
    """Evaluate many (d, p, k) triples; ordering violations are reported, not raised"""
    rows = []
    for d, p, k in cases:
        try:
            e = class_d_check(d, p, k)
            rows.append({**e.describe(), 'error': ''})
        except ParameterError as exc:
            rows.append({'d': d, 'p': p, 'k': k, 'theta': math.nan, 'decay_exponent': math.nan,
                         'in_class_D': False, 'error': str(exc)})
    return pd.DataFrame(rows)


def tau_n(gamma_pstar_norm: float, n: int, exponents: ExponentParams, beta0: float, b0_present: bool) -> float:
    """Existence horizon: n when p = inf or no mean field, else beta0 * ||gamma||_{p*}^(-1/theta)"""
    if exponents.theta <= 0:
        raise ParameterError(f"theta = {exponents.theta:.6g} <= 0: exponents are inadmissible")
    if math.isinf(exponents.p) or not b0_present:
        return float(n)
    if not gamma_pstar_norm > 0:
        raise ParameterError("the initial p*-norm must be positive")
    return beta0 * gamma_pstar_norm ** (-1.0 / exponents.theta)


# ==========================================
# CONFIG
# ==========================================

@dataclass(frozen=True)
class PicardConfig:
    """
    Settings of the fixed-point iteration. `sde` is a template: its seed is the base seed,
    its T is the horizon, and n_particles / record_mesh are replaced per iterate.
    """

    exponents: ExponentParams
    sde: SdeConfig
    M: int = 2000
    mesh_size: int = 10
    lam: float = 0.0
    lambda_auto: bool = True
    max_doublings: int = 8
    tol: float = 1e-3
    max_iter: int = 20
    bandwidth: Union[str, float] = 'silverman'
    beta0: float = 0.25
    n: int = 1
    ceiling: float = 1e3
    grid: Optional[Grid] = None
    grid_floor: float = 1.0
    grid_margin: float = 1.0
    grid_nodes: Optional[int] = None
    r: Optional[float] = None

    def __post_init__(self):
        if not self.exponents.in_class_D:
            raise ParameterError(f"(p, k) is not in class D: {self.exponents.inequality()}")
        if not self.exponents.k > 1:
            raise ParameterError(f"k must exceed 1 for k*-metrics, got {self.exponents.k}")
        if self.exponents.d != self.sde.dim:
            raise ParameterError("exponent dimension does not match the SDE dimension")
        if not self.tol > 0:
            raise ParameterError("tol must be positive")
        if self.M < 2 or self.mesh_size < 1 or self.max_iter < 1:
            raise ParameterError("M >= 2, mesh_size >= 1 and max_iter >= 1 are required")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if not 0 < self.beta0 <= 1:
            raise ParameterError("beta0 must lie in (0, 1]")
        if isinstance(self.bandwidth, str) and self.bandwidth != 'silverman':
            raise ParameterError("bandwidth must be 'silverman' or a positive number")

    @property
    def kparams(self) -> KStarParams:
        return KStarParams(self.exponents.k, self.r)

    @property
    def mesh(self) -> np.ndarray:
        """Uniform mesh of [0, T] snapped to multiples of dt"""
        dt = self.sde.dt
        steps = np.unique(np.round(np.linspace(0.0, self.sde.T, self.mesh_size + 1) / dt).astype(int))
        return steps * dt

    @property
    def kde_bandwidth(self) -> Optional[float]:
        return None if self.bandwidth == 'silverman' else float(self.bandwidth)


# ==========================================
# DIAGNOSTICS
# ==========================================

@dataclass(frozen=True, eq=False)
class FlowDiagnostics:
    times: np.ndarray
    kstar_norms: np.ndarray
    rho_seminorm: float
    kappa_t: np.ndarray
    kstar_square_integral: float
    blowup_flag: bool
    blowup_time: Optional[float] = None
    leray_series: np.ndarray = field(default_factory=lambda: np.empty(0))
    log_series: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'times': self.times.tolist(),
            'kstar_norms': self.kstar_norms.tolist(),
            'rho_seminorm': self.rho_seminorm,
            'kappa_t': self.kappa_t.tolist(),
            'kstar_square_integral': self.kstar_square_integral,
            'blowup_flag': self.blowup_flag,
            'blowup_time': self.blowup_time,
            'leray_series': self.leray_series.tolist(),
            'log_series': self.log_series.tolist(),
        }


def flow_diagnostics(flow: MeasureFlow, exponents: ExponentParams, kparams: KStarParams,
                     b0_present: bool = False, gamma_pstar_norm: Optional[float] = None,
                     ceiling: float = 1e3, log_power: float = 0.75) -> FlowDiagnostics:
    """
    Regularity monitors of a flow

    Args:
        flow: measure flow
        exponents: class-D exponents (decay exponent and theta)
        kparams: k*-metric parameters
        b0_present: whether the drift has a mean-field part
        gamma_pstar_norm: ||gamma||_{p*}; computed from node 0 when omitted
        ceiling: k*-norm level that counts as blow-up
        log_power: exponent of the logarithmic correction in the second blow-up series

    Returns:
        FlowDiagnostics
    """
    times = flow.mesh[1:]
    norms = np.array([kstar_norm_surrogate(d, kparams) for d in flow.densities[1:]])
    weighted = times ** exponents.decay_exponent * norms
    rho_seminorm = float(weighted.max())

    if b0_present:
        if gamma_pstar_norm is None:
            gamma_pstar_norm = _node_pstar_norm(flow.densities[0], exponents, kparams.r)
        kappa = np.maximum(gamma_pstar_norm, np.maximum.accumulate(weighted))
    else:
        kappa = np.zeros_like(times)

    integral = float(np.sum(norms ** 2 * np.diff(flow.mesh)))

    over = np.flatnonzero(norms > ceiling)
    blowup = over.size > 0
    blowup_time = float(times[over[0]]) if blowup else None
    leray, log_series = np.empty(0), np.empty(0)
    if blowup:
        before = times < blowup_time
        gap = blowup_time - times[before]
        pstar = np.array([_node_pstar_norm(d, exponents, kparams.r)
                          for d, keep in zip(flow.densities[1:], before) if keep])
        leray = gap ** exponents.theta * pstar
        log_series = norms[before] * np.sqrt(gap) * np.log1p(1.0 / gap) ** log_power
        logger.warning("k*-norm crossed the ceiling %g at t=%g", ceiling, blowup_time)

    return FlowDiagnostics(times, norms, rho_seminorm, kappa, integral, blowup, blowup_time, leray, log_series)


def _node_pstar_norm(density: Optional[Density], exponents: ExponentParams, r: Optional[float]) -> float:
    if math.isinf(exponents.p):
        return 1.0
    if density is None:
        return math.inf
    return kstar_norm_surrogate(density, KStarParams(exponents.p, r))


# ==========================================
# METRIC / MAP
# ==========================================

def weighted_rho(flow_a: MeasureFlow, flow_b: MeasureFlow, lam: float, exponents: ExponentParams,
                 kparams: KStarParams) -> float:
    """max over mesh nodes t > 0 of exp(-lam t) t^decay ||a_t - b_t||_{k*}"""
    if not np.array_equal(flow_a.mesh, flow_b.mesh):
        raise ShapeError("flows have different meshes")
    if flow_a.grid != flow_b.grid:
        raise ShapeError("flows live on different grids")
    best = 0.0
    for t, a, b in zip(flow_a.mesh[1:], flow_a.densities[1:], flow_b.densities[1:]):
        weight = math.exp(-lam * t) * t ** exponents.decay_exponent
        best = max(best, weight * kstar_distance(a, b, kparams))
    return best


def solver_grid(gamma: InitialLaw, cfg: PicardConfig) -> Grid:
    """Fixed grid wide enough for the whole run: 6 standard deviations of the diffused law"""
    if cfg.grid is not None:
        return cfg.grid
    if gamma.variant == 'density':
        return gamma.density.grid
    pilot = sample_initial(gamma, cfg.M, derive_seed(cfg.sde.seed, SEED_START, 1)).points
    spread = float(pilot.var(axis=0).max()) if pilot.shape[0] > 1 else 0.0
    diffusion = cfg.sde.sigma.eigen_range()[1] * cfg.sde.T
    centre = float(np.abs(pilot.mean(axis=0)).max())
    half_width = max(6.0 * math.sqrt(spread + diffusion) + centre + cfg.grid_margin, cfg.grid_floor)
    return Grid.centered(cfg.sde.dim, half_width, cfg.grid_nodes or DEFAULT_NODES[cfg.sde.dim])


def initial_pstar_norm(gamma: InitialLaw, cfg: PicardConfig, grid: Grid) -> float:
    """||gamma||_{p*} on the solver grid; empirical laws go through a KDE, Dirac laws are infinite"""
    if gamma.variant == 'empirical':
        return _node_pstar_norm(kde_estimate(gamma.empirical, grid), cfg.exponents, cfg.r)
    return _node_pstar_norm(evaluate_density(gamma, grid), cfg.exponents, cfg.r)


def at_horizon(gamma: InitialLaw, cfg: PicardConfig) -> PicardConfig:
    """Copy of cfg whose horizon is tau_n, rounded down to a multiple of dt"""
    b0_present = cfg.sde.drift.measure_dependent
    horizon = tau_n(initial_pstar_norm(gamma, cfg, solver_grid(gamma, cfg)), cfg.n, cfg.exponents,
                    cfg.beta0, b0_present)
    dt = cfg.sde.dt
    steps = math.floor(horizon / dt * (1 + 1e-12))
    if steps < cfg.mesh_size:
        raise ParameterError(f"tau_n={horizon:.6g} leaves fewer than {cfg.mesh_size} steps of dt={dt}")
    return replace(cfg, sde=cfg.sde.with_updates(T=steps * dt))


def initial_flow(gamma: InitialLaw, cfg: PicardConfig, grid: Grid) -> MeasureFlow:
    """Constant-in-time flow of the KDE of an M-point sample of gamma"""
    sample = sample_initial(gamma, cfg.M, derive_seed(cfg.sde.seed, SEED_START, 0))
    density = kde_estimate(sample, grid, cfg.kde_bandwidth)
    mesh = cfg.mesh
    densities = [evaluate_density(gamma, grid)] + [density] * (mesh.size - 1)
    return MeasureFlow(mesh, tuple(densities), gamma)


def phi_map(flow: MeasureFlow, gamma: InitialLaw, cfg: PicardConfig, iterate_seed: int) -> MeasureFlow:
    """Law of the decoupled SDE driven by `flow`, estimated by M particles and a KDE per node"""
    sde = cfg.sde.with_updates(n_particles=cfg.M, seed=iterate_seed, T=flow.T,
                               record_mesh=tuple(flow.mesh.tolist()))
    bundle = simulate_decoupled(sde, flow, gamma)
    if bundle.times.size != flow.mesh.size:
        raise ShapeError("flow mesh is not aligned with multiples of dt")
    densities = [flow.densities[0]]
    for j in range(1, flow.mesh.size):
        densities.append(kde_estimate(EmpiricalMeasure(bundle.states[j]), flow.grid, cfg.kde_bandwidth))
    return MeasureFlow(flow.mesh, tuple(densities), gamma)


# ==========================================
# FIXED POINT
# ==========================================

@dataclass
class PicardLog:
    entries: List[Dict[str, float]] = field(default_factory=list)
    floor: float = 0.0
    tolerance: float = 0.0
    lam: float = 0.0
    converged: bool = False
    converged_at: Optional[int] = None
    horizon: float = math.inf
    gamma_pstar_norm: float = math.nan
    beta1_fit: float = math.nan
    timings_ms: List[float] = field(default_factory=list)
    blowup: Optional[Dict[str, Any]] = None

    @property
    def ratios(self) -> np.ndarray:
        return np.array([e['ratio'] for e in self.entries], dtype=float)

    @property
    def blown_up(self) -> bool:
        return self.blowup is not None

    @property
    def final_rho(self) -> float:
        return self.entries[-1]['rho'] if self.entries else math.nan

    def to_frame(self) -> pd.DataFrame:
        """Iteration log without wall-clock columns (timings live in the run manifest)"""
        return pd.DataFrame(self.entries, columns=['iter', 'rho', 'ratio', 'lambda'])

    def summary(self) -> Dict[str, Any]:
        return {
            'floor': self.floor, 'tolerance': self.tolerance, 'lambda': self.lam,
            'converged': self.converged, 'converged_at': self.converged_at, 'horizon': self.horizon,
            'gamma_pstar_norm': self.gamma_pstar_norm, 'beta1_fit': self.beta1_fit,
            'iterations': len(self.entries),
            'blowup_time': self.blowup['blowup_time'] if self.blowup else None,
        }


def _rescore(flows: Sequence[MeasureFlow], lam: float, cfg: PicardConfig) -> List[Tuple[float, float]]:
    scored, previous = [], math.nan
    for j in range(1, len(flows)):
        rho = weighted_rho(flows[j], flows[j - 1], lam, cfg.exponents, cfg.kparams)
        ratio = rho / previous if previous > 0 else math.nan
        scored.append((rho, ratio))
        previous = rho
    return scored


def solve_fixed_point(gamma: InitialLaw, cfg: PicardConfig) -> Tuple[MeasureFlow, PicardLog]:
    """
    Iterate mu_{j+1} = Phi(mu_j) from the constant gamma-KDE flow until
    rho(mu_{j+1}, mu_j) <= max(tol, 2 * Monte-Carlo floor)

    An iterate whose k*-norm crosses cfg.ceiling stops the iteration; that iterate is returned
    and log.blowup holds its diagnostics, including the Leray-style series.
    """
    exponents = cfg.exponents
    if not exponents.in_class_D:
        raise ParameterError(f"(p, k) is not in class D: {exponents.inequality()}")
    grid = solver_grid(gamma, cfg)
    b0_present = cfg.sde.drift.measure_dependent
    log = PicardLog(lam=cfg.lam)
    log.gamma_pstar_norm = initial_pstar_norm(gamma, cfg, grid)
    log.horizon = tau_n(log.gamma_pstar_norm, cfg.n, exponents, cfg.beta0, b0_present)
    if b0_present and cfg.sde.T > log.horizon * (1 + 1e-12):
        raise ParameterError(f"horizon T={cfg.sde.T} exceeds tau_n={log.horizon:.6g}")

    base = cfg.sde.seed
    start = initial_flow(gamma, cfg, grid)
    twins = (phi_map(start, gamma, cfg, derive_seed(base, SEED_FLOOR, 0)),
             phi_map(start, gamma, cfg, derive_seed(base, SEED_FLOOR, 1)))

    def floor_at(lam):
        return weighted_rho(twins[0], twins[1], lam, exponents, cfg.kparams)

    lam = cfg.lam
    log.floor = floor_at(lam)
    log.tolerance = max(cfg.tol, 2.0 * log.floor)
    logger.info("Picard start: floor=%.4g tolerance=%.4g horizon=%.4g", log.floor, log.tolerance, log.horizon)

    flows = [start]
    doublings = 0
    run_of_growth = 0
    for j in range(cfg.max_iter):
        began = time.perf_counter()
        flows.append(phi_map(flows[-1], gamma, cfg, derive_seed(base, SEED_ITERATE, j)))
        log.timings_ms.append(1e3 * (time.perf_counter() - began))

        diagnostics = flow_diagnostics(flows[-1], exponents, cfg.kparams, b0_present,
                                       log.gamma_pstar_norm, cfg.ceiling)
        if diagnostics.blowup_flag:
            log.blowup = diagnostics.to_dict()
            logger.warning("Picard iterate %d crossed the k*-norm ceiling %g at t=%g; stopping", j, cfg.ceiling,
                           diagnostics.blowup_time)
            break

        rho = weighted_rho(flows[-1], flows[-2], lam, exponents, cfg.kparams)
        previous = log.entries[-1]['rho'] if log.entries else math.nan
        ratio = rho / previous if previous > 0 else math.nan
        log.entries.append({'iter': j, 'rho': rho, 'ratio': ratio, 'lambda': lam})
        logger.info("Picard iterate %d: rho=%.4g ratio=%.3g lambda=%g", j, rho, ratio, lam)

        if rho <= log.tolerance:
            log.converged, log.converged_at = True, j
            break

        if ratio >= RATIO_ALERT and cfg.lambda_auto and doublings < cfg.max_doublings:
            lam = 1.0 / cfg.sde.T if lam == 0 else 2.0 * lam
            doublings += 1
            run_of_growth = 0
            log.floor = floor_at(lam)
            log.tolerance = max(cfg.tol, 2.0 * log.floor)
            for entry, (new_rho, new_ratio) in zip(log.entries, _rescore(flows, lam, cfg)):
                entry.update({'rho': new_rho, 'ratio': new_ratio, 'lambda': lam})
            logger.info("Raised lambda to %g; comparisons restarted", lam)
            if log.entries[-1]['rho'] <= log.tolerance:
                log.converged, log.converged_at = True, j
                break
            continue

        if ratio >= 1.0 and rho > log.floor:
            run_of_growth += 1
        else:
            run_of_growth = 0
        if run_of_growth >= NON_CONTRACTION_RUN:
            log.lam = lam
            raise DivergenceError(f"rho grew for {NON_CONTRACTION_RUN} consecutive iterates "
                                  f"(last rho={rho:.4g}, lambda={lam:g})", log)

    log.lam = lam
    final = flows[-1]
    diagnostics = flow_diagnostics(final, exponents, cfg.kparams, b0_present, log.gamma_pstar_norm, cfg.ceiling)
    if math.isfinite(log.gamma_pstar_norm) and log.gamma_pstar_norm > 0:
        log.beta1_fit = diagnostics.rho_seminorm / log.gamma_pstar_norm
    if not (log.converged or log.blown_up):
        logger.warning("Picard iteration stopped after %d iterates without reaching tolerance", cfg.max_iter)
    return final, log


def self_consistency(flow: MeasureFlow, gamma: InitialLaw, cfg: PicardConfig, log: PicardLog) -> float:
    """rho between a converged flow and one more Phi application"""
    extra = phi_map(flow, gamma, cfg, derive_seed(cfg.sde.seed, SEED_CHECK, 0))
    return weighted_rho(extra, flow, log.lam, cfg.exponents, cfg.kparams)
