"""Reference solver: N-mode Galerkin truncation of the stochastic Burgers equation.

Each mode obeys ``du_k/dt = -nu k^2 u_k + NL_k(u) + f_k``.  Steps use the
Cox-Matthews ETDRK4 scheme with the force held constant over the step, which
makes the scheme exact for the linear part and of strong order one for the
additive noise.  The phi-function weights are averaged over a circle in the
complex plane (Kassam & Trefethen) to avoid cancellation near ``z = 0``.

All routines broadcast over leading batch axes, so an ensemble of
independent trajectories is integrated as one array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import spectral
from .forcing import ForcingPath, ForcingSpec, PathStream, member_seed, spectral_force

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e8
SPINUP_KEY = 0x5350  # stream tag for spin-up forcing


class BlowUpError(FloatingPointError):
    """Solution left the finite range; usually a step-size or resolution problem."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class FullModelConfig:
    nu: float = 0.02
    nmodes: int = 128
    dt: float = 1e-3
    forcing: ForcingSpec = field(default_factory=lambda: ForcingSpec(sigma=0.2))
    zero_nyquist: bool = True
    spinup: float = 50.0

    def __post_init__(self):
        if not self.nu > 0 or not self.dt > 0:
            raise ValueError("nu and dt must be positive")
        if self.forcing.k0 > self.nmodes:
            raise ValueError("forced modes exceed nmodes")
        if not np.isclose(self.forcing.dt, self.dt):
            raise ValueError("forcing dt must match the solver dt")

    @property
    def ngrid(self) -> int:
        return 2 * self.nmodes


@dataclass(frozen=True)
class EtdCoefficients:
    nu: float
    h: float
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray

    @property
    def nmodes(self) -> int:
        return self.E.shape[-1]


def phi_weights(z, h: float, contour_points: int = 64):
    """ETDRK4 weights ``(Q, f1, f2, f3)`` for ``z = L h``.

    Each is a contour mean of the closed form over ``contour_points`` points
    on the unit circle centred at ``z``; the closed forms are entire, so the
    trapezoid rule converges geometrically.
    """
    z = np.asarray(z, dtype=float)
    roots = np.exp(2j * np.pi * (np.arange(contour_points) + 0.5) / contour_points)
    lr = z[..., None] + roots
    elr = np.exp(lr)
    lr3 = lr**3
    Q = h * np.mean((np.exp(lr / 2) - 1) / lr, axis=-1).real
    f1 = h * np.mean((-4 - lr + elr * (4 - 3 * lr + lr**2)) / lr3, axis=-1).real
    f2 = h * np.mean((2 + lr + elr * (lr - 2)) / lr3, axis=-1).real
    f3 = h * np.mean((-4 - 3 * lr - lr**2 + elr * (4 - lr)) / lr3, axis=-1).real
    return Q, f1, f2, f3


def precompute_etd(nu: float, nmodes: int, h: float, contour_points: int = 64) -> EtdCoefficients:
    if not h > 0:
        raise ValueError("step size must be positive")
    z = -nu * spectral.wavenumbers(nmodes) ** 2 * h
    Q, f1, f2, f3 = phi_weights(z, h, contour_points)
    return EtdCoefficients(nu, h, np.exp(z), np.exp(z / 2), Q, f1, f2, f3)


def etd_step(
    u: np.ndarray,
    force: np.ndarray | None,
    c: EtdCoefficients,
    nonlinearity: Callable[[np.ndarray], np.ndarray] = spectral.nonlinear_term,
) -> np.ndarray:
    """One ETDRK4 step of ``du/dt = L u + NL(u) + force`` with ``force`` frozen."""
    if force is None:
        rhs = nonlinearity
    else:
        k0 = force.shape[-1]

        def rhs(v):
            out = nonlinearity(v)
            out[..., :k0] += force
            return out

    nu_ = rhs(u)
    a = c.E2 * u + c.Q * nu_
    na = rhs(a)
    b = c.E2 * u + c.Q * na
    nb = rhs(b)
    cc = c.E2 * a + c.Q * (2 * nb - nu_)
    nc = rhs(cc)
    return c.E * u + c.f1 * nu_ + 2 * c.f2 * (na + nb) + c.f3 * nc


def check_finite(u: np.ndarray, step: int | None = None) -> None:
    peak = np.max(np.abs(u)) if u.size else 0.0
    if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
        raise BlowUpError(f"max |u_k| = {peak:.3g}", step)


def step(
    state: np.ndarray,
    force: np.ndarray | None,
    coeffs: EtdCoefficients,
    *,
    zero_nyquist: bool = True,
    nonlinearity: Callable[[np.ndarray], np.ndarray] = spectral.nonlinear_term,
) -> np.ndarray:
    """Advance the full model one step; the top mode is cleared when ``zero_nyquist``."""
    out = etd_step(state, force, coeffs, nonlinearity)
    if zero_nyquist:
        out[..., -1] = 0.0
    check_finite(out)
    return out


@dataclass
class Trajectory:
    """Snapshots ``states[..., t, k]`` at ``times[t]``, uniformly spaced from 0."""

    states: np.ndarray
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def nmodes(self) -> int:
        return self.states.shape[-1]

    @property
    def sample_dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def project(self, kmodes: int) -> Trajectory:
        return Trajectory(spectral.project(self.states, kmodes), self.times, dict(self.meta))

    def member(self, index) -> Trajectory:
        return Trajectory(self.states[index], self.times, dict(self.meta))


def simulate(
    config: FullModelConfig,
    path: ForcingPath,
    u0,
    nsteps: int,
    stride: int = 10,
    coeffs: EtdCoefficients | None = None,
) -> Trajectory:
    """Integrate ``nsteps`` fine steps from ``u0``, keeping every ``stride``-th state."""
    u = spectral.validate_state(u0).copy()
    if u.shape[-1] != config.nmodes:
        raise ValueError(f"u0 has {u.shape[-1]} modes, config expects {config.nmodes}")
    if path.nsteps < nsteps:
        raise ValueError("forcing path shorter than the run")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c = coeffs or precompute_etd(config.nu, config.nmodes, config.dt)
    snaps = [u.copy()]
    for n in range(nsteps):
        u = _advance(u, spectral_force(path, config.forcing, n), c, config.zero_nyquist, n)
        if (n + 1) % stride == 0:
            snaps.append(u.copy())
    states = np.stack(snaps, axis=-2)
    times = np.arange(len(snaps)) * (stride * config.dt)
    return Trajectory(states, times, _meta(config, stride, path.seed))


def _advance(u, force, c, zero_nyquist, n):
    out = etd_step(u, force, c)
    if zero_nyquist:
        out[..., -1] = 0.0
    peak = np.max(np.abs(out))
    if not peak <= BLOWUP_LIMIT:
        raise BlowUpError(f"max |u_k| = {peak:.3g}", n)
    return out


def _meta(config: FullModelConfig, stride: int, seed) -> dict:
    return {
        "nu": config.nu,
        "nmodes": config.nmodes,
        "dt": config.dt,
        "sigma": config.forcing.sigma,
        "k0": config.forcing.k0,
        "stride": stride,
        "seed": seed,
    }


def cfl(state, dt: float, ngrid: int) -> np.ndarray:
    """``max_j |u(x_j)| dt / dx`` on an ``ngrid``-point grid."""
    u = spectral.to_physical(state, ngrid)
    return np.max(np.abs(u), axis=-1) * dt * ngrid / (2 * np.pi)


def spin_up(config: FullModelConfig, seeds, duration: float | None = None, u0=None) -> np.ndarray:
    """Run each member from rest (or ``u0``) for ``duration`` time units.

    Member ``i`` uses the forcing stream ``member_seed(seeds[i], SPINUP_KEY)``,
    so the returned states are reproducible from the seeds alone.
    """
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
    duration = config.spinup if duration is None else duration
    nsteps = int(round(duration / config.dt))
    u = np.zeros(seeds.shape + (config.nmodes,), complex) if u0 is None else np.array(u0, complex)
    stream = PathStream(config.forcing, [member_seed(int(s), SPINUP_KEY) for s in seeds])
    c = precompute_etd(config.nu, config.nmodes, config.dt)
    u, _ = _stream_run(config, stream, u, nsteps, 2000, c)
    return u


def run_ensemble(
    config: FullModelConfig,
    seeds,
    duration: float,
    stride: int = 10,
    u0=None,
    chunk: int = 2000,
    keep_modes: int | None = None,
) -> tuple[Trajectory, ForcingPath]:
    """Spin up (unless ``u0`` is given) and record one trajectory per seed.

    The recording run is driven by ``sample_path(config.forcing, n, seed)``
    drawn in chunks.  Returns the trajectory (snapshots every ``stride``
    steps) and the forcing path coarsened to the snapshot spacing, which is
    what reduced models and training consume.  ``keep_modes`` stores only
    the leading modes of each snapshot.
    """
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
    if u0 is None:
        u0 = spin_up(config, seeds)
    u = np.array(u0, dtype=complex)
    nsteps = int(round(duration / config.dt))
    if nsteps % stride:
        raise ValueError("duration must be a whole number of snapshot intervals")
    stream = PathStream(config.forcing, seeds)
    c = precompute_etd(config.nu, config.nmodes, config.dt)
    keep = config.nmodes if keep_modes is None else keep_modes
    snaps = [u[..., :keep].copy()]
    coarse = []
    chunk = max(stride, chunk - chunk % stride)
    done = 0
    while done < nsteps:
        n = min(chunk, nsteps - done)
        path = stream.draw(n)
        for i in range(n):
            u = _advance(u, spectral_force(path, config.forcing, i), c, config.zero_nyquist, done + i)
            if (done + i + 1) % stride == 0:
                snaps.append(u[..., :keep].copy())
        coarse.append(path.increments.reshape(path.batch_shape + (n // stride, stride, config.forcing.k0, 2)).sum(-3))
        done += n
    states = np.stack(snaps, axis=-2)
    times = np.arange(states.shape[-2]) * (stride * config.dt)
    meta = _meta(config, stride, seeds)
    meta["spinup"] = config.spinup
    cpath = ForcingPath(np.concatenate(coarse, axis=-3), stride * config.dt, seeds)
    log.info("full model: %d members, %g time units", seeds.size, duration)
    return Trajectory(states, times, meta), cpath


def _stream_run(config, stream, u, nsteps, chunk, c):
    done = 0
    while done < nsteps:
        n = min(chunk, nsteps - done)
        path = stream.draw(n)
        for i in range(n):
            u = _advance(u, spectral_force(path, config.forcing, i), c, config.zero_nyquist, done + i)
        done += n
    return u, done
