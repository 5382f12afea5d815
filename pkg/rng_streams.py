"""
Counter-based random streams
Every draw is addressed by (seed, stream, step, particle id), so results never depend on
how work is split across threads or in which order particles are processed.
"""

from typing import Sequence, Union

import numpy as np

from errors import ParameterError

STREAMS = {
    'init': 1,
    'noise': 2,
    'reference': 3,
    'picard': 4,
    'experiment': 5,
}

_UNIT = 2.0 ** -53


def _philox(seed: int, stream: str, step: int) -> np.random.Philox:
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    if stream not in STREAMS:
        raise ParameterError(f"unknown random stream '{stream}'")
    key = np.random.SeedSequence(entropy=[int(seed), STREAMS[stream]]).generate_state(2, dtype=np.uint64)
    # element 0 of the counter advances with each block; the step lives in element 2
    counter = np.array([0, 0, int(step), 0], dtype=np.uint64)
    return np.random.Philox(key=key, counter=counter)


def uniforms(seed: int, stream: str, step: int, ids: Union[Sequence[int], np.ndarray], width: int) -> np.ndarray:
    """
    Uniform(0,1) block addressed by particle id

    Args:
        seed: base seed
        stream: one of STREAMS
        step: time step (or any other counter level)
        ids: particle ids, one output row each
        width: uniforms per id

    Returns:
        (len(ids), width) array in the open interval (0, 1)
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return np.empty((0, width))
    if ids.min() < 0:
        raise ParameterError("particle ids must be non-negative")
    n_rows = int(ids.max()) + 1
    raw = _philox(seed, stream, step).random_raw(n_rows * width).reshape(n_rows, width)
    block = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _UNIT
    return block[ids]


def normals(seed: int, stream: str, step: int, ids: Union[Sequence[int], np.ndarray], width: int) -> np.ndarray:
    """Standard normal block addressed by particle id (Box-Muller on the uniform block)"""
    pairs = (width + 1) // 2
    u = uniforms(seed, stream, step, ids, 2 * pairs)
    radius = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    angle = 2.0 * np.pi * u[:, 1::2]
    z = np.empty_like(u)
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    return z[:, :width]


def derive_seed(base: int, *labels: int) -> int:
    """Child seed for (base, labels...), e.g. the j-th Picard iterate"""
    if base < 0 or any(label < 0 for label in labels):
        raise ParameterError("seeds and labels must be non-negative")
    state = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(v) for v in labels))
    return int(state.generate_state(1, dtype=np.uint32)[0])
