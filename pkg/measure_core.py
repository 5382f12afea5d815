"""
Measure representations shared by every other module
Grids, densities on grids, empirical (particle) measures, initial laws, kernel density
estimation and time-indexed measure flows. All values are immutable after construction.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from errors import CoverageError, ParameterError, RangeError, ShapeError
from rng_streams import normals, uniforms

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-6
DEFAULT_NODES = {1: 128, 2: 96, 3: 48}
KDE_CHUNK = {1: 8192, 2: 4096, 3: 512}


def _as_tuple(values, dim, name, cast=float):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, arr.item())
    if arr.shape != (dim,):
        raise ShapeError(f"{name} must have {dim} entries, got shape {arr.shape}")
    return tuple(cast(v) for v in arr)


# ==========================================
# GRID
# ==========================================

@dataclass(frozen=True)
class Grid:
    """Regular grid; node i along axis a sits at origin[a] + i * spacing[a]"""

    dim: int
    origin: Tuple[float, ...]
    spacing: Tuple[float, ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ParameterError(f"grid dimension must be 1, 2 or 3, got {self.dim}")
        object.__setattr__(self, 'origin', _as_tuple(self.origin, self.dim, 'origin'))
        object.__setattr__(self, 'spacing', _as_tuple(self.spacing, self.dim, 'spacing'))
        counts = np.atleast_1d(np.asarray(self.counts))
        if counts.size == 1 and self.dim > 1:
            counts = np.full(self.dim, counts.item())
        if counts.shape != (self.dim,) or np.any(counts != np.round(counts)):
            raise ShapeError(f"counts must be {self.dim} integers, got {self.counts!r}")
        object.__setattr__(self, 'counts', tuple(int(c) for c in counts))
        if not all(math.isfinite(o) for o in self.origin):
            raise ParameterError("grid origin must be finite")
        if any(not (h > 0 and math.isfinite(h)) for h in self.spacing):
            raise ParameterError(f"grid spacing must be positive on every axis, got {self.spacing}")
        if any(c < 2 for c in self.counts):
            raise ParameterError(f"grid needs at least 2 nodes per axis, got {self.counts}")

    @classmethod
    def centered(cls, dim: int, half_width: float, nodes: Optional[int] = None) -> 'Grid':
        """Grid on [-L, L]^d with both endpoints as nodes"""
        nodes = nodes or DEFAULT_NODES[dim]
        if half_width <= 0:
            raise ParameterError(f"half width must be positive, got {half_width}")
        spacing = 2.0 * half_width / (nodes - 1)
        return cls(dim, (-half_width,) * dim, (spacing,) * dim, (nodes,) * dim)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * (np.asarray(self.counts) - 1)

    def axes(self) -> List[np.ndarray]:
        return [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.counts)]

    def nodes(self) -> np.ndarray:
        """All nodes as a (size, dim) array in row-major order"""
        mesh = np.meshgrid(*self.axes(), indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=1)

    def uncovered(self, points: np.ndarray, margin: np.ndarray) -> np.ndarray:
        """Boolean mask of points whose margin-box leaves the grid cells"""
        half = 0.5 * np.asarray(self.spacing)
        lo = self.lower - half - 1e-12
        hi = self.upper + half + 1e-12
        return np.any((points - margin < lo) | (points + margin > hi), axis=1)

    def describe(self) -> Dict[str, Any]:
        return {'dim': self.dim, 'origin': list(self.origin), 'spacing': list(self.spacing),
                'counts': list(self.counts)}


# ==========================================
# DENSITY / EMPIRICAL MEASURE
# ==========================================

@dataclass(frozen=True, eq=False)
class Density:
    """Nonnegative node values on a grid with unit midpoint-quadrature mass"""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.grid.size:
            raise ShapeError(f"density has {values.size} values for a grid of {self.grid.size} nodes")
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ParameterError("density values must be finite")
        if np.any(values < 0):
            raise ParameterError("density values must be nonnegative")
        mass = values.sum() * self.grid.cell_volume
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise ParameterError(f"density mass {mass:.9g} is not 1; use Density.normalized")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @classmethod
    def normalized(cls, grid: Grid, values: np.ndarray) -> 'Density':
        values = np.clip(np.asarray(values, dtype=np.float64).reshape(grid.shape), 0.0, None)
        mass = values.sum() * grid.cell_volume
        if not mass > 0:
            raise ParameterError("cannot normalize a density with zero mass on the grid")
        return cls(grid, values / mass)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """N equally weighted points in R^d"""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        if points.ndim != 2 or points.shape[0] < 1:
            raise ShapeError(f"points must be an (N, d) array with N >= 1, got shape {points.shape}")
        if points.shape[1] not in (1, 2, 3):
            raise ShapeError(f"point dimension must be 1, 2 or 3, got {points.shape[1]}")
        if not np.all(np.isfinite(points)):
            raise ParameterError("empirical measure has non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


# ==========================================
# INITIAL LAWS
# ==========================================

SAMPLER_FAMILIES = ('gaussian', 'uniform', 'mixture', 'dirac', 'power_law')


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """
    Initial distribution: an exact sampler of a named family, a Density, or an EmpiricalMeasure.
    Build through the classmethods, which validate the family parameters.
    """

    variant: str
    dim: int
    family: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    density: Optional[Density] = None
    empirical: Optional[EmpiricalMeasure] = None

    @classmethod
    def gaussian(cls, mean, std=None, cov=None) -> 'InitialLaw':
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        dim = mean.size
        if cov is None:
            std = 1.0 if std is None else std
            std = np.atleast_1d(np.asarray(std, dtype=float))
            if std.size == 1:
                std = np.full(dim, std.item())
            if std.shape != (dim,) or np.any(std <= 0):
                raise ParameterError(f"gaussian std must be positive per axis, got {std}")
            cov = np.diag(std ** 2)
        cov = np.asarray(cov, dtype=float).reshape(dim, dim)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ParameterError("gaussian covariance must be positive definite")
        if not np.allclose(cov, cov.T):
            raise ParameterError("gaussian covariance must be symmetric")
        return cls('sampler', dim, 'gaussian', {'mean': mean.tolist(), 'cov': cov.tolist()})

    @classmethod
    def uniform(cls, low, high) -> 'InitialLaw':
        low = np.atleast_1d(np.asarray(low, dtype=float))
        high = np.atleast_1d(np.asarray(high, dtype=float))
        if low.shape != high.shape or np.any(high <= low):
            raise ParameterError("uniform law needs low < high on every axis")
        return cls('sampler', low.size, 'uniform', {'low': low.tolist(), 'high': high.tolist()})

    @classmethod
    def mixture(cls, weights, means, stds) -> 'InitialLaw':
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means.reshape(-1, 1)
        stds = np.asarray(stds, dtype=float)
        if weights.ndim != 1 or weights.size < 1 or np.any(weights <= 0):
            raise ParameterError("mixture weights must be positive")
        if means.shape[0] != weights.size or stds.shape != weights.shape:
            raise ParameterError("mixture needs one mean and one std per weight")
        if np.any(stds <= 0):
            raise ParameterError("mixture component stds must be positive")
        weights = weights / weights.sum()
        return cls('sampler', means.shape[1], 'mixture',
                   {'weights': weights.tolist(), 'means': means.tolist(), 'stds': stds.tolist()})

    @classmethod
    def dirac(cls, point) -> 'InitialLaw':
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if not np.all(np.isfinite(point)):
            raise ParameterError("dirac location must be finite")
        return cls('sampler', point.size, 'dirac', {'point': point.tolist()})

    @classmethod
    def power_law(cls, dim: int, alpha: float, radius: float = 1.0) -> 'InitialLaw':
        """Density proportional to |x|^{-alpha} on the ball of the given radius"""
        if not 0 < alpha < dim:
            raise ParameterError(f"power-law exponent must lie in (0, {dim}), got {alpha}")
        if radius <= 0:
            raise ParameterError("power-law radius must be positive")
        return cls('sampler', dim, 'power_law', {'alpha': float(alpha), 'radius': float(radius)})

    @classmethod
    def from_density(cls, density: Density) -> 'InitialLaw':
        return cls('density', density.grid.dim, density=density)

    @classmethod
    def from_empirical(cls, empirical: EmpiricalMeasure) -> 'InitialLaw':
        return cls('empirical', empirical.dim, empirical=empirical)

    def describe(self) -> Dict[str, Any]:
        """JSON-friendly description"""
        if self.variant == 'sampler':
            return {'variant': 'sampler', 'family': self.family, 'dim': self.dim, **self.params}
        if self.variant == 'density':
            return {'variant': 'density', 'grid': self.density.grid.describe()}
        return {'variant': 'empirical', 'n': self.empirical.n}


def sample_initial(law: InitialLaw, n: int, seed: int) -> EmpiricalMeasure:
    """
    Draw n i.i.d. points from an initial law

    Draws use the 'init' counter stream, so point i depends only on (law, seed, i).

    Args:
        law: initial law
        n: number of points
        seed: base seed

    Returns:
        EmpiricalMeasure with n points
    """
    if n < 1:
        raise ParameterError(f"sample size must be >= 1, got {n}")
    ids = np.arange(n)
    d = law.dim

    if law.variant == 'empirical':
        source = law.empirical.points
        if n == source.shape[0]:
            return EmpiricalMeasure(source.copy())
        picks = np.minimum((uniforms(seed, 'init', 0, ids, 1)[:, 0] * source.shape[0]).astype(int),
                           source.shape[0] - 1)
        return EmpiricalMeasure(source[picks])

    if law.variant == 'density':
        grid = law.density.grid
        probs = law.density.values.ravel() * grid.cell_volume
        cumulative = np.cumsum(probs)
        u = uniforms(seed, 'init', 0, ids, 1 + d)
        flat = np.minimum(np.searchsorted(cumulative, u[:, 0] * cumulative[-1], side='right'), grid.size - 1)
        nodes = np.stack(np.unravel_index(flat, grid.shape), axis=1)
        points = law.density.grid.lower + nodes * np.asarray(grid.spacing)
        return EmpiricalMeasure(points + (u[:, 1:] - 0.5) * np.asarray(grid.spacing))

    family, params = law.family, law.params
    if family == 'gaussian':
        chol = np.linalg.cholesky(np.asarray(params['cov']))
        z = normals(seed, 'init', 0, ids, d)
        return EmpiricalMeasure(np.asarray(params['mean']) + z @ chol.T)
    if family == 'uniform':
        low, high = np.asarray(params['low']), np.asarray(params['high'])
        return EmpiricalMeasure(low + (high - low) * uniforms(seed, 'init', 0, ids, d))
    if family == 'dirac':
        return EmpiricalMeasure(np.tile(np.asarray(params['point']), (n, 1)))
    if family == 'mixture':
        weights = np.asarray(params['weights'])
        pick = np.searchsorted(np.cumsum(weights), uniforms(seed, 'init', 0, ids, 1)[:, 0] * weights.sum(),
                               side='right')
        pick = np.minimum(pick, weights.size - 1)
        z = normals(seed, 'init', 1, ids, d)
        means = np.asarray(params['means'])
        stds = np.asarray(params['stds'])
        return EmpiricalMeasure(means[pick] + stds[pick, None] * z)
    if family == 'power_law':
        alpha, radius = params['alpha'], params['radius']
        u = uniforms(seed, 'init', 0, ids, 1)[:, 0]
        r = radius * u ** (1.0 / (d - alpha))
        direction = normals(seed, 'init', 1, ids, d)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return EmpiricalMeasure(r[:, None] * direction)
    raise ParameterError(f"unknown initial-law family '{family}'")


def evaluate_density(law: InitialLaw, grid: Grid) -> Optional[Density]:
    """
    Closed-form density of a law on a grid, renormalized by quadrature.
    Returns None for laws without a density (Dirac, empirical).
    """
    if law.dim != grid.dim:
        raise ShapeError(f"law dimension {law.dim} does not match grid dimension {grid.dim}")
    if law.variant == 'empirical' or law.family == 'dirac':
        return None
    if law.variant == 'density':
        if law.density.grid != grid:
            raise ShapeError("density law lives on a different grid")
        return law.density

    nodes = grid.nodes()
    params = law.params
    if law.family == 'gaussian':
        values = stats.multivariate_normal(mean=params['mean'], cov=params['cov']).pdf(nodes)
    elif law.family == 'uniform':
        inside = np.all((nodes >= np.asarray(params['low'])) & (nodes <= np.asarray(params['high'])), axis=1)
        values = inside.astype(float)
    elif law.family == 'mixture':
        values = np.zeros(grid.size)
        for w, m, s in zip(params['weights'], params['means'], params['stds']):
            values += w * stats.multivariate_normal(mean=m, cov=s * s * np.eye(grid.dim)).pdf(nodes)
    elif law.family == 'power_law':
        # the node at the origin is evaluated half a cell away from the singularity
        r = np.maximum(np.linalg.norm(nodes, axis=1), 0.5 * min(grid.spacing))
        values = np.where(r <= params['radius'], r ** (-params['alpha']), 0.0)
    else:
        raise ParameterError(f"unknown initial-law family '{law.family}'")
    return Density.normalized(grid, np.asarray(values).reshape(grid.shape))


# ==========================================
# KERNEL DENSITY ESTIMATION
# ==========================================

def silverman_bandwidth(sample: EmpiricalMeasure, floor: float = 1e-3) -> np.ndarray:
    """Per-axis rule h = sigma_hat * n^(-1/(d+4)); degenerate axes fall back to the floor"""
    n, d = sample.points.shape
    sigma = sample.points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    h = sigma * n ** (-1.0 / (d + 4))
    return np.where(h > 0, h, floor)


def auto_grid(sample: EmpiricalMeasure, floor: float = 1.0, nodes: Optional[int] = None,
              bandwidth: Union[None, float, np.ndarray] = None) -> Grid:
    """
    Centered grid [-L, L]^d with L = max(4 * std, floor), enlarged when needed so the
    KDE coverage requirement holds for this sample.
    """
    h = silverman_bandwidth(sample) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (sample.dim,))
    nodes = nodes or DEFAULT_NODES[sample.dim]
    if nodes < 5:
        raise ParameterError(f"auto grids need at least 5 nodes per axis, got {nodes}")
    std = sample.points.std(axis=0).max() if sample.n > 1 else 0.0
    extent = float(np.max(np.abs(sample.points)))
    reach = float(np.max(np.abs(sample.points) + 3.0 * h))
    # kde_estimate floors its rule bandwidth at half a cell, so 1.5 cells must fit past the extent
    cell_reach = extent * (nodes - 1) / (nodes - 4)
    half_width = max(4.0 * std, floor, reach, cell_reach)
    return Grid.centered(sample.dim, half_width, nodes)


def kde_estimate(sample: EmpiricalMeasure, grid: Grid, bandwidth: Union[None, float, Sequence[float]] = None
                 ) -> Density:
    """
    Gaussian kernel density estimate on a grid

    Separable product kernel; points are processed in fixed-size chunks so memory stays
    bounded and the summation order does not depend on anything but the sample.

    Args:
        sample: particles
        grid: target grid (must cover every point +- 3 bandwidths)
        bandwidth: scalar, per-axis values, or None for the Silverman-style rule

    Returns:
        Density renormalized to unit quadrature mass
    """
    if sample.dim != grid.dim:
        raise ShapeError(f"sample dimension {sample.dim} does not match grid dimension {grid.dim}")
    if bandwidth is None:
        # the rule is floored at half a cell so point masses still resolve on the grid
        h = np.maximum(silverman_bandwidth(sample), 0.5 * np.asarray(grid.spacing))
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.dim,)).copy()
    if np.any(~(h > 0)):
        raise ParameterError(f"bandwidth must be positive, got {h}")

    outside = grid.uncovered(sample.points, 3.0 * h)
    if np.any(outside):
        raise CoverageError(f"{int(outside.sum())} sample points are not covered by the grid",
                            sample.points[outside])

    axes = grid.axes()
    norm = 1.0 / (h * math.sqrt(2.0 * math.pi))
    acc = np.zeros(grid.shape)
    chunk = KDE_CHUNK[grid.dim]
    for start in range(0, sample.n, chunk):
        block = sample.points[start:start + chunk]
        factors = [norm[a] * np.exp(-0.5 * ((axes[a][:, None] - block[None, :, a]) / h[a]) ** 2)
                   for a in range(grid.dim)]
        if grid.dim == 1:
            acc += factors[0].sum(axis=1)
        elif grid.dim == 2:
            acc += factors[0] @ factors[1].T
        else:
            acc += np.einsum('ip,jp,kp->ijk', *factors, optimize=True)
    logger.debug("KDE of %d points on grid %s with bandwidth %s", sample.n, grid.counts, h)
    return Density.normalized(grid, acc / sample.n)


# ==========================================
# MEASURE FLOWS
# ==========================================

@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """
    Densities on a time mesh 0 = t_0 < ... < t_M = T sharing one grid.
    Node 0 may be empty (None) when the initial law has no density; `initial` then
    carries the sampler.
    """

    mesh: np.ndarray
    densities: Tuple[Optional[Density], ...]
    initial: Optional[InitialLaw] = None

    def __post_init__(self):
        mesh = np.array(self.mesh, dtype=np.float64)
        if mesh.ndim != 1 or mesh.size < 2:
            raise ShapeError("a flow mesh needs at least two nodes")
        if mesh[0] != 0.0 or np.any(np.diff(mesh) <= 0):
            raise ParameterError("flow mesh must start at 0 and increase strictly")
        densities = tuple(self.densities)
        if len(densities) != mesh.size:
            raise ShapeError(f"{len(densities)} densities for {mesh.size} mesh nodes")
        if any(d is None for d in densities[1:]):
            raise ParameterError("only the t=0 node may omit its density")
        if densities[0] is None and self.initial is None:
            raise ParameterError("a flow without a t=0 density must carry its initial law")
        grid = densities[1].grid
        if any(d is not None and d.grid != grid for d in densities):
            raise ShapeError("all densities of a flow must share one grid")
        mesh.setflags(write=False)
        object.__setattr__(self, 'mesh', mesh)
        object.__setattr__(self, 'densities', densities)

    @property
    def grid(self) -> Grid:
        return self.densities[1].grid

    @property
    def T(self) -> float:
        return float(self.mesh[-1])

    @classmethod
    def constant(cls, density: Density, mesh: Sequence[float], initial: Optional[InitialLaw] = None
                 ) -> 'MeasureFlow':
        mesh = np.asarray(mesh, dtype=float)
        return cls(mesh, tuple(density for _ in mesh), initial)


def flow_from_laws(mesh: Sequence[float], grid: Grid, laws: Sequence[InitialLaw]) -> MeasureFlow:
    """Flow whose node j is the closed-form density of laws[j]"""
    densities = [evaluate_density(law, grid) for law in laws]
    return MeasureFlow(np.asarray(mesh, dtype=float), tuple(densities), laws[0])


def flow_interpolate(flow: MeasureFlow, t: float) -> Density:
    """Piecewise-constant lookup: density at the largest mesh node <= t"""
    tol = 1e-12 * max(1.0, flow.T)
    if t < -tol or t > flow.T + tol:
        raise RangeError(f"t={t} lies outside the flow horizon [0, {flow.T}]")
    j = int(np.searchsorted(flow.mesh, t + tol, side='right')) - 1
    j = min(max(j, 0), flow.mesh.size - 1)
    density = flow.densities[j]
    if density is None:
        return flow.densities[1]
    return density
