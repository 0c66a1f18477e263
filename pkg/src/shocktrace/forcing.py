"""White-in-time, smooth-in-space forcing on the first K0 Fourier pairs.

The physical force is ``sigma * sum_m sin(m x) dW_m/dt + cos(m x) dW'_m/dt``.
A path stores the Brownian increments ``(dW_m, dW'_m)`` of every step; the
force seen by a time stepper is the increment divided by the step and held
constant over it.  Paths are drawn from numpy's PCG64 generator seeded with a
single 64-bit integer, so any path is reproducible from ``(seed, dt, k0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RNG_ALGORITHM = "numpy.random.PCG64/standard_normal"


@dataclass(frozen=True)
class ForcingSpec:
    sigma: float
    k0: int = 4
    dt: float = 1e-3

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ForcingPath:
    """Brownian increments, shape ``(*batch, nsteps, k0, 2)``.

    ``increments[..., n, m-1, 0]`` is ``dW_m`` over step ``n`` (the sine
    component) and ``[..., 1]`` is ``dW'_m`` (cosine).  ``seed`` is one
    integer for a single path, or an array of per-member seeds matching the
    batch shape.
    """

    increments: np.ndarray
    dt: float
    seed: int | np.ndarray | None = None

    @property
    def nsteps(self) -> int:
        return self.increments.shape[-3]

    @property
    def k0(self) -> int:
        return self.increments.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[:-3]

    def segment(self, start: int, stop: int) -> ForcingPath:
        return ForcingPath(self.increments[..., start:stop, :, :], self.dt, self.seed)


def member_seed(master: int, *key: int) -> int:
    """Deterministic 64-bit child seed of ``master`` for the integer ``key``.

    Used everywhere a run fans out into independent streams, e.g. realisation
    ``i`` of an experiment uses ``member_seed(master, i)``.
    """
    ss = np.random.SeedSequence([int(master) % 2**64, *(int(k) for k in key)])
    return int(ss.generate_state(1, np.uint64)[0])


class PathStream:
    """Draws a path chunk by chunk; the concatenation equals ``sample_path``.

    Long spin-ups and ensembles would not fit in memory as a single path.
    """

    def __init__(self, spec: ForcingSpec, seeds):
        self.spec = spec
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        self._rngs = [np.random.Generator(np.random.PCG64(int(s))) for s in self.seeds.ravel()]
        self.drawn = 0

    def draw(self, nsteps: int) -> ForcingPath:
        scale = np.sqrt(self.spec.dt)
        shape = (nsteps, self.spec.k0, 2)
        blocks = [rng.standard_normal(shape) * scale for rng in self._rngs]
        incs = np.stack(blocks).reshape(self.seeds.shape + shape)
        self.drawn += nsteps
        return ForcingPath(incs, self.spec.dt, self.seeds if self.seeds.ndim else int(self.seeds))


def sample_path(spec: ForcingSpec, nsteps: int, seed) -> ForcingPath:
    """i.i.d. N(0, dt) increments; ``seed`` may be an int or an array of seeds."""
    if nsteps < 1:
        raise ValueError("nsteps must be >= 1")
    return PathStream(spec, seed).draw(nsteps)


def spectral_force(path: ForcingPath, spec: ForcingSpec, step: int) -> np.ndarray:
    """Force coefficients ``f_m, m = 1..K0``, constant over ``step``."""
    if not 0 <= step < path.nsteps:
        raise IndexError(f"step {step} outside path of {path.nsteps} steps")
    return _to_force(path.increments[..., step, :, :], spec.sigma, path.dt)


def spectral_forces(path: ForcingPath, spec: ForcingSpec) -> np.ndarray:
    """All steps at once, shape ``(*batch, nsteps, k0)``."""
    return _to_force(path.increments, spec.sigma, path.dt)


def _to_force(incs: np.ndarray, sigma: float, dt: float) -> np.ndarray:
    # sin(mx) = (e^{imx} - e^{-imx})/(2i), cos(mx) = (e^{imx} + e^{-imx})/2
    return 0.5 * sigma * (incs[..., 1] - 1j * incs[..., 0]) / dt


def coarsen(path: ForcingPath, factor: int) -> ForcingPath:
    """Sum consecutive blocks of ``factor`` increments."""
    if factor < 1 or path.nsteps % factor:
        raise ValueError(f"factor {factor} does not divide {path.nsteps} steps")
    incs = path.increments
    shape = incs.shape[:-3] + (path.nsteps // factor, factor) + incs.shape[-2:]
    return ForcingPath(incs.reshape(shape).sum(axis=-3), path.dt * factor, path.seed)
