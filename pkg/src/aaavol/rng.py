"""Counter-based Gaussian streams.

The draw for ``(seed, channel, step, path)`` is a pure function of those four
integers: Philox is keyed by ``(seed, channel)``, the counter's second word
is the time step and the first word indexes blocks of four paths. Any chunk
of paths can therefore be generated independently, in any order or thread,
and reproduce a single-threaded run bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


def _check(seed, channel, step, start, count):
    if not (0 <= seed <= _MASK64):
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    if channel < 0 or step < 0 or start < 0 or count < 0:
        raise ValueError("channel, step, start and count must be nonnegative")


def uniforms(seed: int, channel: int, step: int, start: int, count: int) -> np.ndarray:
    """Open-interval uniforms for paths ``start .. start+count-1`` at ``step``."""
    _check(seed, channel, step, start, count)
    block, lane = divmod(start, 4)
    key = np.array([seed, channel], dtype=np.uint64)
    counter = np.array([block, step, 0, 0], dtype=np.uint64)
    raw = np.random.Philox(key=key, counter=counter).random_raw(count + lane)[lane:]
    # top 53 bits, shifted off the endpoints
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, channel: int, step: int, start: int, count: int) -> np.ndarray:
    return ndtri(uniforms(seed, channel, step, start, count))


def normal_matrix(seed: int, channel: int, n_steps: int, start: int, count: int) -> np.ndarray:
    """Standard normals of shape ``(count, n_steps)`` for a block of paths."""
    out = np.empty((count, n_steps))
    for j in range(n_steps):
        out[:, j] = normals(seed, channel, j, start, count)
    return out
