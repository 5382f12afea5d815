"""
Probability distances on grid densities and particle measures

The k*-norm of a measure is the dual of the localized L^k norm sup_x ||1_{B(x,1)} f||_{L^k}.
On a grid it is bracketed by two computable quantities:

* the lattice surrogate  sum_z ||l 1_{B(z,r)}||_{L^{k/(k-1)}}  (z on the integer lattice), and
* the dual oracle, the value of the discretized convex program itself.

The two agree up to the covering constant c(r).
"""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import signal
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import gamma

from errors import ConvergenceError, ParameterError, ShapeError
from measure_core import Density, EmpiricalMeasure, Grid

logger = logging.getLogger(__name__)

ENTROPY_LOG_FLOOR = 1e-300
ENTROPY_DENSITY_FLOOR = 1e-12
ENTROPY_MASS_THRESHOLD = 1e-4
ASSIGNMENT_LIMIT = 4096
ORACLE_MAX_NODES = 256


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2.0) / gamma(d / 2.0 + 1.0)


def sphere_area(d: int) -> float:
    """Surface area s_{d-1} of the unit sphere in R^d"""
    return 2.0 * math.pi ** (d / 2.0) / gamma(d / 2.0)


# ==========================================
# PARAMETERS AND COVERING CONSTANTS
# ==========================================

@dataclass(frozen=True)
class KStarParams:
    """Exponent k in (1, inf] and lattice-ball radius r (None means sqrt(d))"""

    k: float
    r: Optional[float] = None

    def __post_init__(self):
        if not (self.k > 1):
            raise ParameterError(f"k must exceed 1 for k*-metrics, got {self.k}")
        if self.r is not None and not (self.r > 0):
            raise ParameterError(f"lattice radius must be positive, got {self.r}")

    @property
    def k_star_dual_exponent(self) -> float:
        """k/(k-1), equal to 1 at k = inf"""
        return 1.0 if math.isinf(self.k) else self.k / (self.k - 1.0)

    def radius(self, dim: int) -> float:
        r = math.sqrt(dim) if self.r is None else float(self.r)
        if r < math.sqrt(dim) - 1e-12:
            raise ParameterError(f"lattice radius {r} < sqrt({dim}) leaves gaps between lattice balls")
        return r


@dataclass(frozen=True)
class CoveringConstants:
    dim: int
    r: float
    lattice_cover: int
    unit_cover: int

    @property
    def c_of_r(self) -> int:
        return max(self.lattice_cover, self.unit_cover)


def _box_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.linalg.norm(gap, axis=1)


@lru_cache(maxsize=None)
def covering_constants(dim: int, r: float) -> CoveringConstants:
    """
    Geometric covering counts for the lattice balls B(z, r).

    lattice_cover bounds how many balls B(z, r) meet some unit ball B(x, 1), over all x in a
    lattice cell; unit_cover counts unit balls centred on a cube lattice of side 2/sqrt(d)
    (each cube sits inside its unit ball) needed to cover B(0, r).
    """
    reach = int(math.ceil(r + 1.0)) + 1
    span = np.arange(-reach, reach + 2)
    lattice = np.array(list(itertools.product(span, repeat=dim)), dtype=float)
    cell_lo, cell_hi = np.zeros(dim), np.ones(dim)
    lattice_cover = int(np.sum(_box_distance(lattice, cell_lo, cell_hi) < r + 1.0))

    side = 2.0 / math.sqrt(dim)
    steps = int(math.ceil(r / side)) + 1
    centres = side * np.array(list(itertools.product(range(-steps, steps + 1), repeat=dim)), dtype=float)
    dist = _box_distance(np.zeros((1, dim)), centres - side / 2.0, centres + side / 2.0)
    unit_cover = int(np.sum(dist < r))
    return CoveringConstants(dim, float(r), lattice_cover, unit_cover)


# ==========================================
# LATTICE SURROGATE
# ==========================================

def _lattice_blocks(values: np.ndarray, grid: Grid, r: float) -> Iterator[Tuple[tuple, np.ndarray, np.ndarray]]:
    """Yield (slices, in-ball mask, block) for every lattice ball meeting the support of values"""
    support = np.argwhere(values > 0)
    if support.size == 0:
        return
    origin, spacing = grid.lower, np.asarray(grid.spacing)
    lo = origin + support.min(axis=0) * spacing
    hi = origin + support.max(axis=0) * spacing
    axes = grid.axes()
    ranges = [range(int(math.floor(lo[a] - r)), int(math.ceil(hi[a] + r)) + 1) for a in range(grid.dim)]
    for z in itertools.product(*ranges):
        slices = []
        for a in range(grid.dim):
            first = max(int(math.ceil((z[a] - r - origin[a]) / spacing[a] - 1e-9)), 0)
            last = min(int(math.floor((z[a] + r - origin[a]) / spacing[a] + 1e-9)), grid.counts[a] - 1)
            if last < first:
                break
            slices.append(slice(first, last + 1))
        else:
            block = values[tuple(slices)]
            if not np.any(block > 0):
                continue
            dist2 = sum(np.reshape((axes[a][slices[a]] - z[a]) ** 2,
                                   [-1 if b == a else 1 for b in range(grid.dim)])
                        for a in range(grid.dim))
            yield tuple(slices), dist2 <= r * r * (1.0 + 1e-12), block


def _ball_norm(vals: np.ndarray, exponent: float, cell_volume: float) -> float:
    top = vals.max() if vals.size else 0.0
    if top <= 0:
        return 0.0
    if exponent == 1.0:
        return float(vals.sum() * cell_volume)
    scaled = (vals / top) ** exponent
    return float(top * (scaled.sum() * cell_volume) ** (1.0 / exponent))


def lattice_ball_norms(values: np.ndarray, grid: Grid, k_star_dual_exponent: float, r: float) -> np.ndarray:
    """L^{k/(k-1)} norm of values restricted to each lattice ball meeting their support"""
    norms = [_ball_norm(block[mask], k_star_dual_exponent, grid.cell_volume)
             for _, mask, block in _lattice_blocks(values, grid, r)]
    return np.asarray(norms)


def overlap_multiplicity(grid: Grid, r: float) -> np.ndarray:
    """Number of lattice balls B(z, r) containing each grid node"""
    counts = np.zeros(grid.shape, dtype=np.int64)
    for slices, mask, _ in _lattice_blocks(np.ones(grid.shape), grid, r):
        counts[slices] += mask
    return counts


def kstar_norm_surrogate(mu: Density, params: KStarParams) -> float:
    r = params.radius(mu.grid.dim)
    return float(lattice_ball_norms(mu.values, mu.grid, params.k_star_dual_exponent, r).sum())


def _require_same_grid(mu: Density, nu: Density):
    if mu.grid != nu.grid:
        raise ShapeError(f"densities live on different grids: {mu.grid} vs {nu.grid}")


def kstar_distance(mu: Density, nu: Density, params: KStarParams) -> float:
    """Lattice surrogate applied to |l_mu - l_nu|"""
    _require_same_grid(mu, nu)
    diff = np.abs(mu.values - nu.values)
    r = params.radius(mu.grid.dim)
    return float(lattice_ball_norms(diff, mu.grid, params.k_star_dual_exponent, r).sum())


# ==========================================
# DUAL ORACLE
# ==========================================

@dataclass(frozen=True)
class OracleBounds:
    lower: float
    upper: float
    iterations: int
    converged: bool


def _unit_ball_stencil(grid: Grid) -> np.ndarray:
    reach = [int(math.floor(1.0 / h + 1e-9)) for h in grid.spacing]
    offsets = [np.arange(-m, m + 1) * h for m, h in zip(reach, grid.spacing)]
    mesh = np.meshgrid(*offsets, indexing='ij')
    dist2 = sum(m ** 2 for m in mesh)
    return (dist2 <= 1.0 + 1e-12).astype(float)


def dual_oracle_bounds(mu: Density, params: KStarParams, tol: float = 1e-4, max_iter: int = 20000
                       ) -> OracleBounds:
    """
    Bracket the discretized program  max sum f l vol  s.t.  sum_{B(x_j,1)} f^k vol <= 1, f >= 0.

    Multiplicative updates act on the constraint multipliers; each iterate yields a feasible
    primal point (lower bound, after rescaling) and a Lagrangian dual value (upper bound).
    """
    grid = mu.grid
    if grid.dim > 2 or max(grid.counts) > ORACLE_MAX_NODES:
        raise ParameterError(
            f"dual oracle supports d <= 2 and at most {ORACLE_MAX_NODES} nodes per axis, got {grid.counts}")
    vol = grid.cell_volume
    weights = mu.values * vol
    if math.isinf(params.k):
        mass = float(weights.sum())
        return OracleBounds(mass, mass, 0, True)

    k = params.k
    stencil = _unit_ball_stencil(grid)

    def ball_sums(arr):
        return np.clip(signal.convolve(arr, stencil, mode='same', method='auto'), 0.0, None) * vol

    support = weights > 0
    lam = np.ones(grid.shape)
    eta = 0.5 * (k - 1.0) / k
    best_lower, best_upper = 0.0, math.inf
    previous_upper = math.inf
    f = np.zeros(grid.shape)
    for iteration in range(1, max_iter + 1):
        pressure = ball_sums(lam)
        f[:] = 0.0
        f[support] = (weights[support] / (k * np.maximum(pressure[support], 1e-300))) ** (1.0 / (k - 1.0))
        objective = float((weights * f).sum())
        load = ball_sums(f ** k)
        peak = float(load.max())
        lower = objective / peak ** (1.0 / k) if peak > 0 else 0.0
        upper = float(lam.sum()) + (1.0 - 1.0 / k) * objective
        best_lower = max(best_lower, lower)
        best_upper = min(best_upper, upper)
        if best_upper - best_lower <= tol * best_upper:
            logger.debug("dual oracle converged in %d iterations: [%g, %g]", iteration, best_lower, best_upper)
            return OracleBounds(best_lower, best_upper, iteration, True)
        if upper > previous_upper:
            eta = max(0.7 * eta, 1e-3)
        previous_upper = upper
        lam = lam * load ** eta
        lam = np.maximum(lam, 1e-12 * lam.max())

    logger.warning("dual oracle stopped after %d iterations with gap %.3g", max_iter,
                   (best_upper - best_lower) / best_upper)
    return OracleBounds(best_lower, best_upper, max_iter, False)


def kstar_norm_dual_oracle(mu: Density, params: KStarParams, tol: float = 1e-4, max_iter: int = 20000) -> float:
    bounds = dual_oracle_bounds(mu, params, tol=tol, max_iter=max_iter)
    if not bounds.converged:
        raise ConvergenceError("dual oracle did not reach its tolerance", bounds.lower, bounds.upper,
                               bounds.iterations)
    return bounds.lower


# ==========================================
# TOTAL VARIATION / WASSERSTEIN / ENTROPY
# ==========================================

def tv_distance(mu: Density, nu: Density) -> float:
    _require_same_grid(mu, nu)
    return float(np.abs(mu.values - nu.values).sum() * mu.grid.cell_volume)


def wasserstein_q(a: EmpiricalMeasure, b: EmpiricalMeasure, q: float) -> float:
    """
    Exact W_q between two equal-size, equal-weight point clouds

    Args:
        a, b: empirical measures with the same N and dimension
        q: order, 1 <= q < inf

    Returns:
        (min over assignments of mean |x_i - y_pi(i)|^q)^(1/q)
    """
    if not (1.0 <= q < math.inf):
        raise ParameterError(f"Wasserstein order must lie in [1, inf), got {q}")
    if a.n != b.n or a.dim != b.dim:
        raise ShapeError(f"W_q needs equal sizes and dimensions, got {a.points.shape} and {b.points.shape}")
    if a.dim == 1:
        gaps = np.abs(np.sort(a.points[:, 0]) - np.sort(b.points[:, 0]))
        return float(np.mean(gaps ** q) ** (1.0 / q))
    if a.n > ASSIGNMENT_LIMIT:
        raise ParameterError(f"exact assignment is limited to N <= {ASSIGNMENT_LIMIT}; subsample first")
    cost = cdist(a.points, b.points) ** q
    rows, cols = linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols]) ** (1.0 / q))


def relative_entropy(mu: Density, nu: Density) -> float:
    """Ent(mu|nu) by quadrature; math.inf when mu charges a region where nu vanishes"""
    _require_same_grid(mu, nu)
    vol = mu.grid.cell_volume
    p, q = mu.values, nu.values
    charged = p > 0
    orphan = charged & (q < ENTROPY_DENSITY_FLOOR)
    orphan_mass = float(p[orphan].sum() * vol)
    if orphan_mass > ENTROPY_MASS_THRESHOLD:
        logger.info("relative entropy is infinite: mass %.3g sits where the reference vanishes", orphan_mass)
        return math.inf
    ratio = p[charged] / np.maximum(q[charged], ENTROPY_LOG_FLOOR)
    value = float(np.sum(p[charged] * np.log(ratio)) * vol)
    if value < 0.0:
        logger.warning("relative entropy %.3g < 0 from discretization error; reporting 0", value)
        return 0.0
    return value
