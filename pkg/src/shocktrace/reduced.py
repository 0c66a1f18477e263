"""K-mode reduced dynamics stepping at the coarse step ``delta``.

Two models share the Galerkin machinery of the full solver:

* the truncated system, i.e. the full-model ETDRK4 step with N replaced by K;
* the NAR closure model::

      v^n = v^{n-1} + delta * (f^{n-1} + Phi^{n-1}) + g^n
      Phi^{n-1}_k = sum_{j=1..p} cv[k,j] v^{n-j}_k + cR[k,j] R(v^{n-j})_k
                                + cf[k,j] f^{n-j}_k + cw[k,j] Q_{k,j}

  where ``R(v) = (ETDRK4_K(v) - v) / delta`` is the deterministic Galerkin
  increment and ``Q_{k,j}`` couples resolved and extended modes (see
  :func:`closure_features`).  ``cR`` is the *total* weight of the Galerkin
  increment: ``cR[:, 0] = 1`` with everything else zero reproduces the
  Galerkin step ``v + delta*(R(v) + f)``.  This is the parameterisation in
  which fitted values come out near one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

from . import spectral
from .forcing import ForcingPath, ForcingSpec, spectral_force
from .full_model import (
    BLOWUP_LIMIT,
    BlowUpError,
    EtdCoefficients,
    Trajectory,
    check_finite,
    etd_step,
    precompute_etd,
)

FAMILIES = ("cv", "cR", "cf", "cw")


@dataclass(frozen=True)
class ReducedConfig:
    kmodes: int = 8
    delta: float = 0.01
    nu: float = 0.02
    sigma: float = 0.2
    k0: int = 4

    @property
    def forcing(self) -> ForcingSpec:
        return ForcingSpec(self.sigma, self.k0, self.delta)

    def etd(self) -> EtdCoefficients:
        return precompute_etd(self.nu, self.kmodes, self.delta)


@dataclass
class NARParameters:
    """Per-mode closure coefficients, each of shape ``(K, p)``, and residual scale.

    ``sigma_g[k]`` is the standard deviation of the complex one-step residual
    ``g_k`` (``E|g_k|^2 = sigma_g[k]^2``).
    """

    cv: np.ndarray
    cR: np.ndarray
    cf: np.ndarray
    cw: np.ndarray
    sigma_g: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in FAMILIES:
            setattr(self, name, np.atleast_2d(np.array(getattr(self, name), dtype=float)))
        self.sigma_g = np.asarray(self.sigma_g, dtype=float)
        shape = self.cv.shape
        if any(getattr(self, n).shape != shape for n in FAMILIES) or self.sigma_g.shape != shape[:1]:
            raise ValueError("coefficient arrays disagree in shape")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in FAMILIES + ("sigma_g",)):
            raise ValueError("non-finite NAR parameters")
        if np.any(self.sigma_g < 0):
            raise ValueError("sigma_g must be non-negative")

    @property
    def kmodes(self) -> int:
        return self.cv.shape[0]

    @property
    def p(self) -> int:
        return self.cv.shape[1]

    @classmethod
    def zeros(cls, kmodes: int, p: int = 1) -> NARParameters:
        return cls(*(np.zeros((kmodes, p)) for _ in FAMILIES), np.zeros(kmodes))

    @classmethod
    def galerkin(cls, kmodes: int, p: int = 1) -> NARParameters:
        """Closure-free parameters: the plain Galerkin step ``v + delta*(R + f)``."""
        params = cls.zeros(kmodes, p)
        params.cR[:, 0] = 1.0
        return params

    @classmethod
    def from_theta(cls, theta, sigma_g, meta=None) -> NARParameters:
        """Inverse of :meth:`theta`; ``theta`` has shape ``(K, 4p)``, family-major."""
        theta = np.asarray(theta, dtype=float)
        p = theta.shape[1] // 4
        parts = [theta[:, i * p : (i + 1) * p] for i in range(4)]
        return cls(*parts, sigma_g=sigma_g, meta=dict(meta or {}))

    def theta(self) -> np.ndarray:
        return np.concatenate([self.cv, self.cR, self.cf, self.cw], axis=1)

    def combine(self, alpha: float, other: NARParameters, beta: float) -> NARParameters:
        return NARParameters.from_theta(alpha * self.theta() + beta * other.theta(), self.sigma_g)

    def to_dict(self) -> dict:
        return {
            "kmodes": self.kmodes,
            "p": self.p,
            **{name: getattr(self, name).tolist() for name in FAMILIES},
            "sigma_g": self.sigma_g.tolist(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_plain) + "\n")

    @classmethod
    def load(cls, path) -> NARParameters:
        d = json.loads(Path(path).read_text())
        return cls(*(d[n] for n in FAMILIES), sigma_g=d["sigma_g"], meta=d.get("meta", {}))


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def reference_parameters(sigma: float) -> NARParameters:
    """Published fitted parameters for ``sigma`` in {0.2, 1.0} (two-digit precision).

    The tabulated ``sigma_g`` is kept as published.  It is orders of magnitude
    larger than the per-step residual of this package's fits, so noisy runs
    should use a fitted ``sigma_g``; the mean path is unaffected.
    """
    name = {0.2: "nar_sigma0.2.json", 1.0: "nar_sigma1.json"}[float(sigma)]
    return NARParameters.load(Path(__file__).parent / "data" / name)


# --- Galerkin pieces --------------------------------------------------------


def galerkin_increment(v, coeffs: EtdCoefficients) -> np.ndarray:
    """``R(v)`` such that one deterministic ETDRK4 step of the K-mode system is ``v + h R(v)``."""
    v = np.asarray(v, dtype=complex)
    return (etd_step(v, None, coeffs) - v) / coeffs.h


def truncated_step(v, force, coeffs: EtdCoefficients) -> np.ndarray:
    out = etd_step(np.asarray(v, dtype=complex), force, coeffs)
    check_finite(out)
    return out


# --- closure terms ----------------------------------------------------------


@lru_cache(maxsize=None)
def _extension_grid(kmodes: int) -> int:
    # products of |k| <= K reach 2K; keeping |k| <= 2K alias-free needs m > 4K
    m = 4 * kmodes + 1
    while m % 2 or scipy.fft.next_fast_len(m, real=True) != m:
        m += 1
    return m


def quadratic_modes(v) -> np.ndarray:
    """``sum_{|l|<=K, |k-l|<=K} v_{k-l} v_l`` for ``k = 1..2K``."""
    v = np.asarray(v, dtype=complex)
    kmodes = v.shape[-1]
    m = _extension_grid(kmodes)
    u = spectral._synthesise(v, m)
    return spectral._analyse(u * u, 2 * kmodes)


def extended_modes(v, j: int, nu: float, delta: float) -> np.ndarray:
    """Resolved modes followed by the lag-``j`` estimate of modes ``K+1..2K``."""
    v = np.asarray(v, dtype=complex)
    kmodes = v.shape[-1]
    k = np.arange(kmodes + 1, 2 * kmodes + 1)
    high = 0.5j * k * np.exp(-nu * k**2 * j * delta) * quadratic_modes(v)[..., kmodes:]
    return np.concatenate([v, high], axis=-1)


@lru_cache(maxsize=None)
def _cross_pairs(kmodes: int):
    """Index pairs ``(l, k-l)`` of the cross-scale sum for each ``k = 1..K``.

    A pair qualifies when one index is resolved (``|.| <= K``) and the other
    is an extended mode (``K < |.| <= 2K``).  Indices are offsets into the
    two-sided array ``[-2K, ..., 2K]``.
    """
    K = kmodes
    rows, cols, ks = [], [], []
    for k in range(1, K + 1):
        for l in range(-2 * K, 2 * K + 1):
            m = k - l
            if (abs(m) <= K and K < abs(l) <= 2 * K) or (abs(l) <= K and K < abs(m) <= 2 * K):
                rows.append(l + 2 * K)
                cols.append(m + 2 * K)
                ks.append(k - 1)
    return np.array(rows), np.array(cols), np.array(ks)


def _two_sided(vt: np.ndarray) -> np.ndarray:
    n = vt.shape[-1]
    out = np.zeros(vt.shape[:-1] + (2 * n + 1,), dtype=complex)
    out[..., n + 1 :] = vt
    out[..., :n] = np.conj(vt[..., ::-1])
    return out


def cross_scale_sum(vt_first, vt_second) -> np.ndarray:
    """``sum_{pairs} first_l * second_{k-l}`` for ``k = 1..K`` (extended inputs of length 2K)."""
    K = vt_first.shape[-1] // 2
    rows, cols, ks = _cross_pairs(K)
    prod = _two_sided(vt_first)[..., rows] * _two_sided(vt_second)[..., cols]
    out = np.zeros(prod.shape[:-1] + (K,), dtype=complex)
    for k in range(K):
        out[..., k] = prod[..., ks == k].sum(axis=-1)
    return out


def closure_features(v_hist, R_hist, f_hist, nu: float, delta: float) -> np.ndarray:
    """Regression features of shape ``(..., K, 4, p)`` (family-major).

    ``v_hist[j-1]`` is ``v^{n-j}``; ``R_hist`` and ``f_hist`` likewise.  The
    quadratic feature at lag ``j`` pairs the lag-1 extension with the lag-``j``
    one, ``sum tilde v^{n-1}_l tilde v^{n-j}_{k-l}``.
    """
    p = len(v_hist)
    vt1 = extended_modes(v_hist[0], 1, nu, delta)
    quad = []
    for j in range(1, p + 1):
        vtj = vt1 if j == 1 else extended_modes(v_hist[j - 1], j, nu, delta)
        quad.append(cross_scale_sum(vt1, vtj))
    stacked = [np.stack(list(h), axis=-1) for h in (v_hist, R_hist, f_hist, quad)]
    return np.stack(stacked, axis=-2)


def _pad_force(force, kmodes: int, batch_shape=()) -> np.ndarray:
    out = np.zeros(np.broadcast_shapes(np.shape(force)[:-1], batch_shape) + (kmodes,), complex)
    if force is not None:
        out[..., : np.shape(force)[-1]] = force
    return out


class NARState:
    """Lagged history for the NAR step; index ``j-1`` holds lag ``j``.

    Before the first step the history is back-filled with ``v0`` (and its
    Galerkin increment) and zero force.
    """

    def __init__(self, v0, p: int, config: ReducedConfig, coeffs: EtdCoefficients | None = None):
        v0 = np.asarray(v0, dtype=complex)
        self.config = config
        self.coeffs = coeffs or config.etd()
        self.p = p
        R0 = galerkin_increment(v0, self.coeffs)
        self.v = [v0] * p
        self.R = [R0] * p
        self.f = [np.zeros_like(v0)] * p
        self.nsteps = 0

    @property
    def current(self) -> np.ndarray:
        return self.v[0]

    def push_force(self, force) -> None:
        self.f = [_pad_force(force, self.config.kmodes, self.v[0].shape[:-1])] + self.f[:-1]

    def replace_current(self, v) -> None:
        """Overwrite lag 1, e.g. with an analysis update; older lags are kept."""
        v = np.asarray(v, dtype=complex)
        self.v = [v] + self.v[1:]
        self.R = [galerkin_increment(v, self.coeffs)] + self.R[1:]

    def push_state(self, v) -> None:
        self.v = [v] + self.v[:-1]
        self.R = [galerkin_increment(v, self.coeffs)] + self.R[:-1]
        self.nsteps += 1

    def features(self) -> np.ndarray:
        return closure_features(self.v, self.R, self.f, self.config.nu, self.config.delta)


def _contract(features: np.ndarray, params: NARParameters) -> np.ndarray:
    coef = np.stack([params.cv, params.cR, params.cf, params.cw], axis=-2)  # (K, 4, p)
    return np.sum(features * coef, axis=(-2, -1))


def nar_closure(state: NARState, params: NARParameters) -> np.ndarray:
    """``Phi^{n-1}`` for the force most recently pushed into ``state``."""
    if len(state.v) != params.p:
        raise ValueError(f"history holds {len(state.v)} lags, parameters need {params.p}")
    return _contract(state.features(), params)


def complex_noise(rng: np.random.Generator, sigma_g, shape) -> np.ndarray:
    """Circular complex Gaussian with ``E|g_k|^2 = sigma_g[k]^2``."""
    scale = np.asarray(sigma_g) / np.sqrt(2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def nar_step(
    state: NARState,
    force,
    params: NARParameters,
    rng: np.random.Generator | None = None,
    check: bool = True,
):
    """Advance one coarse step; ``rng=None`` gives the noise-free mean path.

    With ``check=False`` a diverging member is left in place for the caller
    to handle instead of raising.
    """
    state.push_force(force)
    phi = nar_closure(state, params)
    v = state.current + state.config.delta * (state.f[0] + phi)
    if rng is not None:
        v = v + complex_noise(rng, params.sigma_g, v.shape)
    if check:
        peak = np.max(np.abs(v))
        if not peak <= BLOWUP_LIMIT:
            raise BlowUpError(f"NAR state max |v_k| = {peak:.3g}", state.nsteps)
    state.push_state(v)
    return v


def simulate_reduced(
    model: str,
    config: ReducedConfig,
    path: ForcingPath,
    v0,
    nsteps: int,
    params: NARParameters | None = None,
    noise_seed: int | None = None,
) -> Trajectory:
    """Run ``'truncated'`` or ``'nar'`` for ``nsteps`` coarse steps from ``v0``.

    ``path`` must already be coarsened to ``config.delta``.  The NAR residual
    noise is drawn from ``PCG64(noise_seed)``; ``noise_seed=None`` runs the
    mean path.
    """
    v = spectral.validate_state(v0)
    if v.shape[-1] != config.kmodes:
        raise ValueError(f"v0 has {v.shape[-1]} modes, config expects {config.kmodes}")
    if not np.isclose(path.dt, config.delta):
        raise ValueError(f"path step {path.dt} differs from delta {config.delta}")
    if path.nsteps < nsteps:
        raise ValueError("forcing path shorter than the run")
    spec = config.forcing
    coeffs = config.etd()
    snaps = [v.copy()]
    if model == "truncated":
        for n in range(nsteps):
            v = etd_step(v, spectral_force(path, spec, n), coeffs)
            peak = np.max(np.abs(v))
            if not peak <= BLOWUP_LIMIT:
                raise BlowUpError(f"truncated state max |v_k| = {peak:.3g}", n)
            snaps.append(v)
    elif model == "nar":
        if params is None:
            raise ValueError("the NAR model needs parameters")
        if params.kmodes != config.kmodes:
            raise ValueError("parameter table and config disagree on K")
        rng = None if noise_seed is None else np.random.Generator(np.random.PCG64(noise_seed))
        state = NARState(v, params.p, config, coeffs)
        for n in range(nsteps):
            snaps.append(nar_step(state, spectral_force(path, spec, n), params, rng))
    else:
        raise ValueError(f"unknown reduced model {model!r}")
    states = np.stack(snaps, axis=-2)
    meta = {"model": model, "kmodes": config.kmodes, "delta": config.delta, "nu": config.nu,
            "sigma": config.sigma, "noise_seed": noise_seed}
    return Trajectory(states, np.arange(nsteps + 1) * config.delta, meta)
