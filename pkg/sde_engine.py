"""
Euler-Maruyama engine
Simulates the interacting N-particle system (mean field from the current empirical measure)
and the decoupled system driven by a frozen MeasureFlow. Noise is counter-based, keyed by
(seed, step, particle id), and drift work is split into fixed-size particle chunks, so the
thread count never changes a single bit of the output.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from errors import CollisionError, ConfigError, NumericOverflowError, ParameterError, RangeError, ShapeError
from kernels import DriftSpec, displacement_kernel, mean_field_batch, quadrature_nodes
from measure_core import EmpiricalMeasure, InitialLaw, MeasureFlow, flow_interpolate, sample_initial
from rng_streams import normals

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 256


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count: explicit request, else MKVLAB_THREADS, else up to 8 cores"""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get('MKVLAB_THREADS')
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MKVLAB_THREADS must be an integer, got '{env}'")
    return max(1, min(os.cpu_count() or 1, 8))


# ==========================================
# DIFFUSION COEFFICIENT
# ==========================================

@dataclass(frozen=True)
class SigmaSpec:
    """
    constant: fixed d x m matrix
    diagonal_affine: sigma_ii(x) = clip(base_i + slope_i x_i, lower, upper), lower > 0
    """

    form: str
    dim: int
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    base: Optional[Tuple[float, ...]] = None
    slope: Optional[Tuple[float, ...]] = None
    bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.form == 'constant':
            matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if matrix.shape[0] != self.dim:
                raise ParameterError(f"sigma must have {self.dim} rows, got shape {matrix.shape}")
            object.__setattr__(self, 'matrix', tuple(map(tuple, matrix.tolist())))
        elif self.form == 'diagonal_affine':
            base = np.broadcast_to(np.asarray(self.base, dtype=float), (self.dim,))
            slope = np.broadcast_to(np.asarray(self.slope if self.slope is not None else 0.0, dtype=float),
                                    (self.dim,))
            if self.bounds is None or not (0 < self.bounds[0] <= self.bounds[1]):
                raise ParameterError("diagonal_affine sigma needs bounds 0 < lower <= upper")
            object.__setattr__(self, 'base', tuple(base.tolist()))
            object.__setattr__(self, 'slope', tuple(slope.tolist()))
            object.__setattr__(self, 'bounds', (float(self.bounds[0]), float(self.bounds[1])))
        else:
            raise ParameterError(f"unknown sigma form '{self.form}'")

    @classmethod
    def scaled_identity(cls, dim: int, scale: float = 1.0) -> 'SigmaSpec':
        return cls('constant', dim, matrix=tuple(map(tuple, (scale * np.eye(dim)).tolist())))

    @property
    def noise_dim(self) -> int:
        return len(self.matrix[0]) if self.form == 'constant' else self.dim

    def eigen_range(self) -> Tuple[float, float]:
        """Range of the eigenvalues of sigma sigma^T over all states"""
        if self.form == 'diagonal_affine':
            return self.bounds[0] ** 2, self.bounds[1] ** 2
        matrix = np.asarray(self.matrix)
        eig = np.linalg.eigvalsh(matrix @ matrix.T)
        return float(eig.min()), float(eig.max())

    def apply(self, points: np.ndarray, noise: np.ndarray) -> np.ndarray:
        if self.form == 'constant':
            return noise @ np.asarray(self.matrix).T
        diag = np.clip(np.asarray(self.base) + np.asarray(self.slope) * points, *self.bounds)
        return diag * noise


# ==========================================
# CONFIG / BUNDLE
# ==========================================

@dataclass(frozen=True)
class SdeConfig:
    dim: int
    drift: DriftSpec
    sigma: SigmaSpec
    T: float
    dt: float
    n_particles: int
    seed: int
    record_mesh: Optional[Tuple[float, ...]] = None
    ellipticity: Optional[Tuple[float, float]] = None
    use_cell_list: bool = False
    threads: Optional[int] = None
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0):
            raise ParameterError(f"T and dt must be positive, got T={self.T}, dt={self.dt}")
        if self.dt > self.T:
            raise ParameterError(f"dt={self.dt} exceeds the horizon T={self.T}")
        if self.n_particles < 1:
            raise ParameterError("n_particles must be >= 1")
        if self.drift.dim != self.dim or self.sigma.dim != self.dim:
            raise ParameterError("drift, sigma and config dimensions disagree")
        mesh = (0.0, float(self.T)) if self.record_mesh is None else tuple(float(t) for t in self.record_mesh)
        if any(t < -1e-12 or t > self.T * (1 + 1e-12) for t in mesh):
            raise RangeError(f"record times must lie in [0, {self.T}]")
        object.__setattr__(self, 'record_mesh', mesh)
        if self.ellipticity is not None:
            low, high = self.ellipticity
            if not 0 < low <= high:
                raise ParameterError("ellipticity bounds need 0 < lambda_min <= lambda_max")
            eig_low, eig_high = self.sigma.eigen_range()
            if eig_low < low * (1 - 1e-12) or eig_high > high * (1 + 1e-12):
                raise ParameterError(
                    f"sigma sigma^T eigenvalues [{eig_low:.6g}, {eig_high:.6g}] leave the declared "
                    f"ellipticity range [{low}, {high}]")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    @property
    def record_steps(self) -> Tuple[int, ...]:
        steps = sorted({min(max(int(round(t / self.dt)), 0), self.n_steps) for t in self.record_mesh})
        return tuple(steps)

    def snapped_times(self) -> np.ndarray:
        return np.asarray(self.record_steps, dtype=float) * self.dt

    def with_updates(self, **changes) -> 'SdeConfig':
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    times: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    particle_ids: np.ndarray
    seed: int
    dt: float
    n_steps: int

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))
        if hits.size == 0:
            raise RangeError(f"t={t} is not a recorded time; recorded: {self.times.tolist()}")
        return int(hits[0])

    def empirical(self, t: float) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[self.index_of(t)])

    @property
    def terminal(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[-1])

    def to_frame(self) -> pd.DataFrame:
        """Long table: one row per (time, particle)"""
        n_times, n, d = self.states.shape
        frame = pd.DataFrame({
            'time': np.repeat(self.times, n),
            'step': np.repeat(self.steps, n),
            'particle': np.tile(self.particle_ids, n_times),
        })
        for a in range(d):
            frame[f'x{a}'] = self.states[:, :, a].ravel()
        return frame


# ==========================================
# STEPPING
# ==========================================

def em_step(x, t: float, drift_value, sigma, dt: float, noise) -> np.ndarray:
    """
    x + b dt + sigma sqrt(dt) w for one particle (shape (d,)) or a batch (shape (n, d))

    sigma is a d x m matrix or a SigmaSpec evaluated at x; t stamps a NumericOverflowError.
    """
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if isinstance(sigma, SigmaSpec):
        diffusion = sigma.apply(x, noise)
    else:
        diffusion = noise @ np.atleast_2d(np.asarray(sigma, dtype=float)).T
    with np.errstate(over='ignore', invalid='ignore'):
        result = x + np.asarray(drift_value, dtype=float) * dt + diffusion * math.sqrt(dt)
    finite = np.isfinite(result)
    if not np.all(finite):
        bad = result if result.ndim == 1 else result[np.flatnonzero(~finite.all(axis=1))[0]]
        raise NumericOverflowError(t, bad.tolist())
    return result


def _map_chunks(executor: Optional[ThreadPoolExecutor], work: Callable[[slice], np.ndarray],
                n: int, chunk: int) -> np.ndarray:
    slices = [slice(start, min(start + chunk, n)) for start in range(0, n, chunk)]
    parts = list(executor.map(work, slices)) if executor is not None else [work(s) for s in slices]
    return np.concatenate(parts, axis=0)


def _check_collisions(points: np.ndarray, step: int):
    _, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 1):
        group = int(np.flatnonzero(counts > 1)[0])
        pair = np.flatnonzero(inverse.reshape(-1) == group)[:2]
        raise CollisionError("particles collided with an unregularized kernel", step, pair.tolist())


def _cell_list_mean_field(spec, points: np.ndarray) -> np.ndarray:
    """Truncated-kernel mean field from cKDTree neighbour pairs"""
    out = np.zeros_like(points)
    pairs = cKDTree(points).query_pairs(spec.cutoff, output_type='ndarray')
    if pairs.size:
        i, j = pairs[:, 0], pairs[:, 1]
        np.add.at(out, i, displacement_kernel(spec, points[i] - points[j]))
        np.add.at(out, j, displacement_kernel(spec, points[j] - points[i]))
    return out / points.shape[0]


DriftFn = Callable[[float, np.ndarray, int, Optional[ThreadPoolExecutor]], np.ndarray]


def _integrate(config: SdeConfig, x0: np.ndarray, ids: np.ndarray, drift_fn: DriftFn) -> TrajectoryBundle:
    record = set(config.record_steps)
    threads = resolve_threads(config.threads)
    m = config.sigma.noise_dim
    states: List[np.ndarray] = []
    x = np.array(x0, dtype=np.float64)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    logger.info("Integrating %d particles over %d steps (dt=%g, %d threads)",
                x.shape[0], config.n_steps, config.dt, threads)
    try:
        for step in range(config.n_steps + 1):
            if step in record:
                states.append(x.copy())
            if step == config.n_steps:
                break
            t = step * config.dt
            b = drift_fn(t, x, step, executor)
            noise = normals(config.seed, 'noise', step, ids, m)
            x = em_step(x, t + config.dt, b, config.sigma, config.dt, noise)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    steps = np.asarray(config.record_steps)
    return TrajectoryBundle(steps * config.dt, steps, np.stack(states), ids.copy(), config.seed,
                            config.dt, config.n_steps)


def _initial_state(config: SdeConfig, init: InitialLaw, particle_ids: Optional[Sequence[int]]
                   ) -> Tuple[np.ndarray, np.ndarray]:
    if init.dim != config.dim:
        raise ShapeError(f"initial law dimension {init.dim} does not match config dimension {config.dim}")
    x0 = sample_initial(init, config.n_particles, config.seed).points
    if particle_ids is None:
        ids = np.arange(config.n_particles)
    else:
        ids = np.asarray(particle_ids, dtype=np.int64)
        if ids.shape != (config.n_particles,) or np.unique(ids).size != ids.size:
            raise ShapeError("particle_ids must be N distinct ids")
    return x0, ids


def simulate_interacting(config: SdeConfig, init: InitialLaw,
                         particle_ids: Optional[Sequence[int]] = None) -> TrajectoryBundle:
    """
    N coupled particles; the mean field uses the current empirical measure

    Args:
        config: SDE configuration
        init: initial law (sampled with the config seed)
        particle_ids: optional ids addressing the noise streams

    Returns:
        TrajectoryBundle at the snapped record times
    """
    x0, ids = _initial_state(config, init, particle_ids)
    drift = config.drift
    spec = drift.kernel
    use_cells = config.use_cell_list and spec is not None and spec.cutoff is not None
    if config.use_cell_list and not use_cells:
        logger.warning("cell lists need a truncated kernel; using direct summation")

    def drift_fn(t, x, step, executor):
        total = drift.local_part(t, x)
        if drift.measure_dependent:
            if spec.epsilon == 0:
                _check_collisions(x, step)
            if use_cells:
                field = _cell_list_mean_field(spec, x)
            else:
                weights = np.full(x.shape[0], 1.0 / x.shape[0])
                field = _map_chunks(executor, lambda s: mean_field_batch(spec, x[s], x, weights),
                                    x.shape[0], config.chunk_size)
            total = total + drift.coupling * field
        return total

    return _integrate(config, x0, ids, drift_fn)


def simulate_decoupled(config: SdeConfig, flow: MeasureFlow, init: InitialLaw,
                       particle_ids: Optional[Sequence[int]] = None) -> TrajectoryBundle:
    """Independent particles whose mean field integrates the kernel against the frozen flow"""
    if flow.T < config.T * (1 - 1e-12):
        raise ParameterError(f"flow horizon {flow.T} is shorter than the simulation horizon {config.T}")
    drift = config.drift
    if drift.measure_dependent and flow.grid.dim != config.dim:
        raise ShapeError("flow and config dimensions disagree")
    x0, ids = _initial_state(config, init, particle_ids)
    quadrature: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def drift_fn(t, x, step, executor):
        total = drift.local_part(t, x)
        if drift.measure_dependent:
            density = flow_interpolate(flow, t)
            key = id(density)
            if key not in quadrature:
                quadrature[key] = quadrature_nodes(density)
            nodes, weights = quadrature[key]
            field = _map_chunks(executor, lambda s: mean_field_batch(drift.kernel, x[s], nodes, weights),
                                x.shape[0], config.chunk_size)
            total = total + drift.coupling * field
        return total

    return _integrate(config, x0, ids, drift_fn)


# ==========================================
# MOMENTS
# ==========================================

@dataclass(frozen=True)
class MomentSummary:
    order: float
    absolute_moment: float
    axis_moments: np.ndarray
    means: np.ndarray
    variances: np.ndarray


def empirical_moments(bundle: TrajectoryBundle, t: float, order: float) -> MomentSummary:
    """(1/N) sum |x_i|^q plus per-axis |x|^q moments, means and variances at a recorded time"""
    points = bundle.states[bundle.index_of(t)]
    radius = np.linalg.norm(points, axis=1)
    return MomentSummary(
        order=float(order),
        absolute_moment=float(np.mean(radius ** order)),
        axis_moments=np.mean(np.abs(points) ** order, axis=0),
        means=points.mean(axis=0),
        variances=points.var(axis=0, ddof=1) if points.shape[0] > 1 else np.zeros(points.shape[1]),
    )
