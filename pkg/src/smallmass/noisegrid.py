"""Brownian increments from a counter-based generator, with exact coarsening.

Increment ``(i, rho)`` of path ``path_id`` is a pure function of
``(seed, path_id, i, rho)``: the Philox key is ``(seed, path_id)`` and the
flat index ``i * k + rho`` selects the counter block, so any entry can be
regenerated on its own and paths never depend on worker scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError

_WORDS_PER_BLOCK = 4
_TWO_PI = 2.0 * np.pi
_MAX_DRAWS = 2**40


def _uniform_open(words):
    # 53-bit mantissa, shifted to the open interval (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _key(seed, path_id):
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_id) & 0xFFFFFFFFFFFFFFFF]


def standard_normals(seed: int, path_id: int, start: int, count: int) -> np.ndarray:
    """Standard normal draws with flat indices ``start .. start + count - 1``.

    Draw ``j`` is the cosine (even j) or sine (odd j) branch of a Box-Muller
    pair built from raw words ``2 * (j // 2)`` and ``2 * (j // 2) + 1``.
    """
    if count <= 0:
        return np.zeros(0)
    pair0 = start // 2
    pair1 = (start + count - 1) // 2 + 1
    word0 = 2 * pair0
    block0 = word0 // _WORDS_PER_BLOCK
    skip = word0 - block0 * _WORDS_PER_BLOCK
    n_words = 2 * (pair1 - pair0) + skip
    bg = np.random.Philox(key=_key(seed, path_id), counter=[block0, 0, 0, 0])
    words = bg.random_raw(n_words)[skip:]
    u1 = _uniform_open(words[0::2])
    u2 = _uniform_open(words[1::2])
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = _TWO_PI * u2
    z = np.empty(2 * len(u1))
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    off = start - 2 * pair0
    return z[off : off + count]


@dataclass(frozen=True)
class WienerGrid:
    """Brownian increments on a uniform grid; ``increments`` has shape ``(steps, k)``."""

    dt: float
    steps: int
    k: int
    increments: np.ndarray
    seed: int = 0
    path_id: int = 0

    @property
    def T(self):
        return self.dt * self.steps

    @property
    def endpoint(self):
        return self.increments.sum(axis=0)

    def partial_sums(self):
        """Discrete path W at grid points 0..steps."""
        W = np.zeros((self.steps + 1, self.k))
        np.cumsum(self.increments, axis=0, out=W[1:])
        return W

    def times(self):
        return self.dt * np.arange(self.steps + 1)


def generate_path(seed: int, path_id: int, steps: int, k: int, dt: float) -> WienerGrid:
    """Independent ``Normal(0, dt)`` increments keyed by ``(seed, path_id, step, component)``."""
    if steps * k >= _MAX_DRAWS:
        raise ValueError("too many draws for one path")
    z = standard_normals(seed, path_id, 0, steps * k).reshape(steps, k)
    inc = np.sqrt(dt) * z
    inc.setflags(write=False)
    return WienerGrid(dt=float(dt), steps=int(steps), k=int(k), increments=inc, seed=seed, path_id=path_id)


def increment_at(seed: int, path_id: int, i: int, rho: int, k: int, dt: float) -> float:
    """Regenerate a single increment without building the path."""
    return float(np.sqrt(dt) * standard_normals(seed, path_id, i * k + rho, 1)[0])


def _prime_factors(f):
    out, p = [], 2
    while p * p <= f:
        while f % p == 0:
            out.append(p)
            f //= p
        p += 1
    if f > 1:
        out.append(f)
    return out


def block_sum(increments, factor: int):
    """Sum consecutive blocks of ``factor`` increments along the step axis (axis -2).

    The sum is taken one prime factor at a time, smallest first, so nested
    power-of-two coarsenings agree bit for bit with a single coarsening.
    """
    steps = increments.shape[-2]
    if factor < 1 or steps % factor:
        raise GridMismatchError(f"coarsening factor {factor} does not divide {steps} steps")
    out = increments
    for p in _prime_factors(factor):
        shape = out.shape[:-2] + (out.shape[-2] // p, p, out.shape[-1])
        out = out.reshape(shape).sum(axis=-2)
    return out


def coarsen(path: WienerGrid, factor: int) -> WienerGrid:
    """Grid with step ``dt * factor`` and block-summed increments."""
    if factor == 1:
        return path
    inc = block_sum(path.increments, factor)
    inc.setflags(write=False)
    return WienerGrid(
        dt=path.dt * factor,
        steps=path.steps // factor,
        k=path.k,
        increments=inc,
        seed=path.seed,
        path_id=path.path_id,
    )


def path_batch(seed: int, path_ids, steps: int, k: int, dt: float) -> np.ndarray:
    """Increments of several paths stacked as ``(steps, paths, k)``."""
    out = np.empty((steps, len(path_ids), k))
    for j, pid in enumerate(path_ids):
        out[:, j, :] = generate_path(seed, pid, steps, k, dt).increments
    return out


def mass_family(m0: float, count: int, ratio: int = 2):
    """Geometric masses ``m0 * ratio**-j``; successive fine grids nest exactly."""
    if count < 1:
        raise ValueError("mass family needs at least one mass")
    if int(ratio) != ratio or ratio < 2:
        raise ValueError("mass ratio must be an integer >= 2")
    return [m0 * float(ratio) ** (-j) for j in range(count)]
