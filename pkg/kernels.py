"""
Singular interaction kernels and drift assembly
Coulomb, Newton, Biot-Savart, Riesz and the shifted Riesz kernel, each with optional blob
regularization |z|^a -> (|z|^2 + eps^2)^(a/2), plus the drift decomposition
b = b0 (mean field) + b1 (Lipschitz) + extra singular terms.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from errors import ParameterError, SingularityError
from measure_core import Density, EmpiricalMeasure
from metrics import sphere_area, unit_ball_volume

logger = logging.getLogger(__name__)

FAMILIES = ('coulomb', 'newton', 'biot_savart', 'riesz', 'shifted_riesz')
PAIR_CHUNK = 256

Measure = Union[EmpiricalMeasure, Density]


@dataclass(frozen=True)
class KernelSpec:
    """
    Interaction kernel K(x, y)

    family: coulomb | newton | biot_savart | riesz | shifted_riesz
        biot_savart in d = 3 is the e3-aligned rotation only: (-z2, z1, 0) / (4 pi |z|^3),
        i.e. the velocity of a vortex filament along the z-axis, not a general 3-D vorticity field
    kappa, beta: Riesz strength and singularity order (riesz, shifted_riesz)
    anchors: fixed points x_i of the shifted Riesz kernel
    cutoff: optional truncation radius; K vanishes for |x - y| > cutoff
    """

    family: str
    dim: int
    epsilon: float = 0.0
    kappa: float = 1.0
    beta: Optional[float] = None
    anchors: Tuple[Tuple[float, ...], ...] = ()
    cutoff: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown kernel family '{self.family}', expected one of {FAMILIES}")
        if self.dim not in (1, 2, 3):
            raise ParameterError(f"kernel dimension must be 1, 2 or 3, got {self.dim}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family == 'biot_savart' and self.dim < 2:
            raise ParameterError("the Biot-Savart kernel needs d >= 2")
        if self.family in ('riesz', 'shifted_riesz'):
            if self.kappa == 0:
                raise ParameterError("Riesz strength kappa must be nonzero")
            if self.beta is None or not (0 < self.beta < self.dim):
                raise ParameterError(f"Riesz order beta must lie in (0, {self.dim}), got {self.beta}")
        anchors = tuple(tuple(float(c) for c in a) for a in self.anchors)
        if any(len(a) != self.dim for a in anchors):
            raise ParameterError("every anchor must have dim coordinates")
        if anchors and self.family != 'shifted_riesz':
            raise ParameterError("anchors only apply to the shifted_riesz family")
        object.__setattr__(self, 'anchors', anchors)
        if self.cutoff is not None:
            if not self.cutoff > 0:
                raise ParameterError("cutoff must be positive")
            if self.anchors:
                raise ParameterError("a cutoff needs a translation-invariant kernel")

    @property
    def translation_invariant(self) -> bool:
        return not self.anchors

    def majorant(self) -> Tuple[float, float]:
        """(c, beta) with |K(z)| <= c |z|^-beta"""
        d = self.dim
        if self.family in ('coulomb', 'newton'):
            return 1.0 / sphere_area(d), d - 1.0
        if self.family == 'biot_savart':
            return 1.0 / sphere_area(d), d - 1.0
        c = abs(self.kappa)
        if self.family == 'shifted_riesz':
            c *= 1 + len(self.anchors)
        return c, float(self.beta)


def _radial_factor(spec: KernelSpec, reg2: np.ndarray) -> np.ndarray:
    """1 / (|z|^2 + eps^2)^(power/2) for the family's denominator power"""
    d = spec.dim
    if spec.family in ('coulomb', 'newton'):
        scale = 1.0 / (d * unit_ball_volume(d))
        power = d
    elif spec.family == 'biot_savart':
        scale = 1.0 / sphere_area(d)
        power = d
    else:
        scale = spec.kappa
        power = spec.beta + 1.0
    with np.errstate(divide='ignore', invalid='ignore'):
        factor = scale / reg2 ** (power / 2.0)
    return np.where(reg2 > 0, factor, 0.0)


def displacement_kernel(spec: KernelSpec, z: np.ndarray) -> np.ndarray:
    """Translation-invariant part of K evaluated at displacements z (..., d)"""
    reg2 = np.sum(z * z, axis=-1) + spec.epsilon ** 2
    factor = _radial_factor(spec, reg2)[..., None]
    if spec.family == 'biot_savart':
        rotated = np.zeros_like(z)
        rotated[..., 0] = -z[..., 1]
        rotated[..., 1] = z[..., 0]
        value = rotated * factor
    else:
        value = z * factor
    if spec.family == 'newton':
        value = -value
    if spec.cutoff is not None:
        value = np.where((np.sum(z * z, axis=-1) <= spec.cutoff ** 2)[..., None], value, 0.0)
    return value


def _anchor_terms(spec: KernelSpec, sources: np.ndarray) -> np.ndarray:
    """Sum over anchors of kappa (x_i - y)/|x_i - y|^(beta+1), one row per source y"""
    total = np.zeros_like(sources)
    for anchor in spec.anchors:
        z = np.asarray(anchor)[None, :] - sources
        if spec.epsilon == 0 and np.any(np.all(z == 0, axis=1)):
            raise SingularityError(f"source point coincides with anchor {anchor} and epsilon = 0")
        total += displacement_kernel(spec, z)
    return total


def eval_kernel(spec: KernelSpec, x, y) -> np.ndarray:
    """K(x, y) for single points"""
    x = np.asarray(x, dtype=float).reshape(spec.dim)
    y = np.asarray(y, dtype=float).reshape(spec.dim)
    if spec.epsilon == 0 and np.array_equal(x, y):
        raise SingularityError(f"kernel evaluated at x = y = {x.tolist()} with epsilon = 0")
    value = displacement_kernel(spec, x - y)
    if spec.anchors:
        value = value + _anchor_terms(spec, y[None, :])[0]
    return value


def pairwise_kernel(spec: KernelSpec, targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """
    K(targets[i], sources[j]) as an (M, N, d) array.
    Bit-equal target/source pairs contribute zero (self-exclusion).
    """
    z = targets[:, None, :] - sources[None, :, :]
    value = displacement_kernel(spec, z)
    if spec.anchors:
        value = value + _anchor_terms(spec, sources)[None, :, :]
    return value


def quadrature_nodes(measure: Measure) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights of a measure (zero-density nodes dropped)"""
    if isinstance(measure, EmpiricalMeasure):
        return measure.points, np.full(measure.n, 1.0 / measure.n)
    keep = measure.values.ravel() > 0
    nodes = measure.grid.nodes()[keep]
    return nodes, measure.values.ravel()[keep] * measure.grid.cell_volume


def mean_field_batch(spec: KernelSpec, targets: np.ndarray, nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_j w_j K(x_i, y_j) for every target, chunked over targets"""
    out = np.empty_like(targets)
    for start in range(0, targets.shape[0], PAIR_CHUNK):
        block = targets[start:start + PAIR_CHUNK]
        out[start:start + PAIR_CHUNK] = np.einsum('mnd,n->md', pairwise_kernel(spec, block, nodes), weights)
    return out


def mean_field_drift(spec: KernelSpec, x, measure: Measure) -> np.ndarray:
    """
    b0(x, mu) = integral of K(x, y) mu(dy)

    Empirical measures average over their points; densities use midpoint quadrature over the
    grid. With epsilon = 0, points bit-equal to x are skipped.
    """
    x = np.asarray(x, dtype=float).reshape(1, spec.dim)
    nodes, weights = quadrature_nodes(measure)
    if nodes.shape[1] != spec.dim:
        raise ParameterError(f"measure dimension {nodes.shape[1]} does not match kernel dimension {spec.dim}")
    return mean_field_batch(spec, x, nodes, weights)[0]


@dataclass(frozen=True)
class BoundConstant:
    """Value of the integral of |K|^k over the unit ball (inf when divergent)"""

    value: float
    admissible: Tuple[float, float]

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def kernel_bound_constant(spec: KernelSpec, k: float) -> BoundConstant:
    """s_{d-1} c^k / (d - k beta) for k < d/beta, otherwise the +inf flag"""
    c, beta = spec.majorant()
    d = spec.dim
    admissible = (1.0, d / beta)
    if k * beta >= d:
        return BoundConstant(math.inf, admissible)
    return BoundConstant(sphere_area(d) * c ** k / (d - k * beta), admissible)


# ==========================================
# DRIFT DECOMPOSITION
# ==========================================

LIPSCHITZ_FORMS = ('zero', 'ou', 'linear', 'constant')


@dataclass(frozen=True)
class LipschitzTerm:
    """Named Lipschitz drift b1(t, x): zero, ou (-rate x), linear (A x), constant (v)"""

    form: str
    dim: int
    rate: float = 1.0
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    vector: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.form not in LIPSCHITZ_FORMS:
            raise ParameterError(f"unknown Lipschitz drift form '{self.form}'")
        if self.form == 'linear':
            matrix = np.asarray(self.matrix, dtype=float)
            if matrix.shape != (self.dim, self.dim):
                raise ParameterError(f"linear drift needs a {self.dim}x{self.dim} matrix")
            object.__setattr__(self, 'matrix', tuple(map(tuple, matrix.tolist())))
        if self.form == 'constant':
            vector = np.asarray(self.vector, dtype=float).reshape(-1)
            if vector.shape != (self.dim,):
                raise ParameterError(f"constant drift needs {self.dim} components")
            object.__setattr__(self, 'vector', tuple(vector.tolist()))

    @property
    def lipschitz_constant(self) -> float:
        if self.form == 'ou':
            return abs(self.rate)
        if self.form == 'linear':
            return float(np.linalg.norm(np.asarray(self.matrix), 2))
        return 0.0

    @property
    def vanishes_at_origin(self) -> bool:
        return self.form != 'constant' or not any(self.vector)

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        if self.form == 'ou':
            return -self.rate * points
        if self.form == 'linear':
            return points @ np.asarray(self.matrix).T
        if self.form == 'constant':
            return np.broadcast_to(np.asarray(self.vector), points.shape).copy()
        return np.zeros_like(points)


@dataclass(frozen=True)
class SingularTerm:
    """
    power_well: b(x) = strength (x - center) / |x - center|^(alpha + 1), declared with an
    integrability pair (p_prime, q_prime) from class K: d/p' + 2/q' < 1.
    """

    dim: int
    strength: float
    center: Tuple[float, ...]
    alpha: float
    p_prime: float
    q_prime: float
    epsilon: float = 0.0
    form: str = 'power_well'

    def __post_init__(self):
        if self.form != 'power_well':
            raise ParameterError(f"unknown singular drift form '{self.form}'")
        center = tuple(float(c) for c in np.asarray(self.center, dtype=float).reshape(-1))
        if len(center) != self.dim:
            raise ParameterError("singular drift center must have dim coordinates")
        object.__setattr__(self, 'center', center)
        if not (self.p_prime > 2 and self.q_prime > 2):
            raise ParameterError("integrability exponents must exceed 2")
        if self.dim / self.p_prime + 2.0 / self.q_prime >= 1.0:
            raise ParameterError(
                f"(p', q') = ({self.p_prime}, {self.q_prime}) violates d/p' + 2/q' < 1: "
                f"{self.dim}/{self.p_prime} + 2/{self.q_prime} = "
                f"{self.dim / self.p_prime + 2.0 / self.q_prime:.4g}")
        if not (0 < self.alpha and self.alpha * self.p_prime < self.dim):
            raise ParameterError(
                f"|x|^-alpha is not locally in L^p' for alpha={self.alpha}, p'={self.p_prime}, d={self.dim}")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        z = points - np.asarray(self.center)
        reg2 = np.sum(z * z, axis=-1) + self.epsilon ** 2
        if np.any(reg2 == 0):
            raise SingularityError(f"singular drift evaluated at its center {self.center} with epsilon = 0")
        return self.strength * z / reg2[..., None] ** ((self.alpha + 1.0) / 2.0)


@dataclass(frozen=True)
class DriftSpec:
    """b = coupling * b0(kernel) + b1 + sum of extra singular terms"""

    dim: int
    kernel: Optional[KernelSpec] = None
    coupling: float = 1.0
    b1: Optional[LipschitzTerm] = None
    extra_singular: Tuple[SingularTerm, ...] = field(default_factory=tuple)
    faithful: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'extra_singular', tuple(self.extra_singular))
        if self.kernel is not None and self.kernel.dim != self.dim:
            raise ParameterError("kernel dimension does not match drift dimension")
        if self.b1 is not None and self.b1.dim != self.dim:
            raise ParameterError("b1 dimension does not match drift dimension")
        if any(term.dim != self.dim for term in self.extra_singular):
            raise ParameterError("singular term dimension does not match drift dimension")
        if self.faithful and self.b1 is not None and not self.b1.vanishes_at_origin:
            raise ParameterError("faithful decomposition requires b1(t, 0) = 0")

    @property
    def measure_dependent(self) -> bool:
        return self.kernel is not None and self.coupling != 0

    def local_part(self, t: float, points: np.ndarray) -> np.ndarray:
        """b1 plus the extra singular terms, vectorized over points"""
        total = np.zeros_like(points)
        if self.b1 is not None:
            total += self.b1(t, points)
        for term in self.extra_singular:
            total += term(t, points)
        return total


def assemble_drift(drift: DriftSpec, t: float, x, measure: Optional[Measure]) -> np.ndarray:
    """Full drift b(t, x, mu) at one point"""
    point = np.asarray(x, dtype=float).reshape(1, drift.dim)
    value = drift.local_part(t, point)[0]
    if drift.measure_dependent:
        if measure is None:
            raise ParameterError("a measure is required for the mean-field term")
        value = value + drift.coupling * mean_field_drift(drift.kernel, point[0], measure)
    return value
