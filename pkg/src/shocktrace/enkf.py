"""Stochastic ensemble Kalman filter (perturbed observations).

States are real vectors.  Reduced Fourier states are mapped to
``(Re v_1, Im v_1, ..., Re v_K, Im v_K)``, so an analysis update can never
break the conjugate symmetry of the underlying field.  Every array may carry
leading batch axes (independent filter runs); the member axis is ``-2`` and
the state axis ``-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .forcing import ForcingPath, spectral_force
from .full_model import BLOWUP_LIMIT, etd_step
from .reduced import NARParameters, NARState, ReducedConfig, galerkin_increment, nar_step

log = logging.getLogger(__name__)


def to_real(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.stack([v.real, v.imag], axis=-1).reshape(v.shape[:-1] + (2 * v.shape[-1],))


def to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    pairs = x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


@dataclass(frozen=True)
class ObservationModel:
    """Linear observation ``z = H x + eps`` with ``eps ~ N(0, R)``."""

    h_matrix: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        R = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if R.shape != (H.shape[0], H.shape[0]):
            raise ValueError("noise covariance does not match the observation dimension")
        if not np.allclose(R, R.T):
            raise ValueError("noise covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ValueError("noise covariance must be positive definite")
        object.__setattr__(self, "h_matrix", H)
        object.__setattr__(self, "noise_cov", R)

    @classmethod
    def identity(cls, dim: int, std: float) -> ObservationModel:
        return cls(np.eye(dim), std**2 * np.eye(dim))

    def observe(self, x, rng: np.random.Generator) -> np.ndarray:
        """Noisy observation of the true state(s) ``x``."""
        x = np.asarray(x, dtype=float)
        clean = x @ self.h_matrix.T
        return clean + self._noise(rng, clean.shape[:-1])

    def _noise(self, rng, batch_shape) -> np.ndarray:
        L = np.linalg.cholesky(self.noise_cov)
        return rng.standard_normal(batch_shape + (L.shape[0],)) @ L.T


@dataclass
class Ensemble:
    members: np.ndarray  # (..., M, d)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim < 2:
            raise ValueError("members need shape (..., M, d)")

    @property
    def size(self) -> int:
        return self.members.shape[-2]

    @property
    def dim(self) -> int:
        return self.members.shape[-1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=-2)

    @property
    def spread(self) -> np.ndarray:
        """Per-coordinate sample standard deviation (``1/(M-1)``)."""
        return self.members.std(axis=-2, ddof=1)

    def covariance(self) -> np.ndarray:
        anomalies = self.members - self.mean[..., None, :]
        return np.swapaxes(anomalies, -1, -2) @ anomalies / (self.size - 1)


class ForecastModel(Protocol):
    def __call__(self, members: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray: ...


def forecast(ensemble: Ensemble, model: ForecastModel, step: int, rng: np.random.Generator) -> Ensemble:
    """Advance every member one model step.

    Members that leave the finite range are replaced by draws from a
    Gaussian fitted to the surviving members of the same filter run.
    """
    out = np.array(model(ensemble.members, step, rng), dtype=float)
    bad = ~np.all(np.isfinite(out) & (np.abs(out) <= BLOWUP_LIMIT), axis=-1)
    if bad.any():
        out = _redraw(out, bad, rng)
        if hasattr(model, "reset_members"):
            model.reset_members(out, bad)
    return Ensemble(out)


def _redraw(x: np.ndarray, bad: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flat_x = x.reshape((-1,) + x.shape[-2:])
    flat_bad = bad.reshape((-1, bad.shape[-1]))
    for b, (xb, mask) in enumerate(zip(flat_x, flat_bad)):
        if not mask.any():
            continue
        good = xb[~mask]
        if len(good) < 2:
            raise FloatingPointError("too few finite ensemble members left to redraw from")
        log.warning("run %d: redrawing %d diverged member(s)", b, int(mask.sum()))
        mu = good.mean(axis=0)
        cov = np.cov(good, rowvar=False)
        xb[mask] = rng.multivariate_normal(mu, np.atleast_2d(cov), size=int(mask.sum()), method="eigh")
    return flat_x.reshape(x.shape)


def _factor(S: np.ndarray) -> np.ndarray:
    """Cholesky factors of the innovation covariances, with jitter if needed."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(S, axis1=-2, axis2=-1)[..., None, None] * np.eye(S.shape[-1])
        log.warning("innovation covariance not positive definite; adding jitter")
        return np.linalg.cholesky(S + jitter + np.finfo(float).tiny * np.eye(S.shape[-1]))


def kalman_gain(cov: np.ndarray, om: ObservationModel) -> np.ndarray:
    """``K = C H^T (H C H^T + R)^{-1}`` for (batched) forecast covariances ``C``."""
    H = om.h_matrix
    CHt = cov @ H.T
    S = H @ CHt + om.noise_cov
    L = _factor(S)
    # K^T = S^{-1} (C H^T)^T, via the Cholesky factor
    y = np.linalg.solve(L, np.swapaxes(CHt, -1, -2))
    Kt = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    return np.swapaxes(Kt, -1, -2)


def analysis(
    ensemble: Ensemble,
    obs,
    om: ObservationModel,
    rng: np.random.Generator,
    inflation: float = 1.0,
    localization: np.ndarray | None = None,
) -> Ensemble:
    """Perturbed-observation update of every member.

    ``inflation`` scales the anomalies before the update and ``localization``
    is a Schur-product taper on the sample covariance; both default to off.
    """
    if ensemble.size < 2:
        raise ValueError("the analysis needs at least two members")
    x = ensemble.members
    if inflation != 1.0:
        mean = x.mean(axis=-2, keepdims=True)
        x = mean + inflation * (x - mean)
    cov = Ensemble(x).covariance()
    if localization is not None:
        cov = cov * localization
    gain = kalman_gain(cov, om)
    obs = np.asarray(obs, dtype=float)
    perturbed = obs[..., None, :] + om._noise(rng, x.shape[:-1])
    innovation = perturbed - x @ om.h_matrix.T
    return Ensemble(x + innovation @ np.swapaxes(gain, -1, -2))


@dataclass
class FilterResult:
    """Ensemble statistics at every step ``0..nsteps`` (analysis values where updated)."""

    means: np.ndarray  # (nt, ..., d)
    spreads: np.ndarray  # (nt, ..., d)
    analysed: np.ndarray  # (nt,) bool
    ensembles: dict = field(default_factory=dict)  # step -> members


def run_filter(
    model: ForecastModel,
    om: ObservationModel,
    observations,
    initial: Ensemble,
    nsteps: int,
    seed: int,
    every: int = 1,
    record_every: int | None = None,
    inflation: float = 1.0,
    localization: np.ndarray | None = None,
) -> FilterResult:
    """Forecast/analysis cycles for ``nsteps`` model steps.

    ``observations[n]`` is the observation at step ``n`` (shape ``(..., dz)``)
    and is assimilated when ``n % every == 0``; steps past the end of
    ``observations`` are free forecasts.  ``observations=None`` gives a pure
    ensemble forecast.  ``record_every`` keeps full ensembles at that stride.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    nobs = 0 if observations is None else len(observations)
    ens = initial
    means, spreads, analysed, kept = [], [], [], {}
    for n in range(nsteps + 1):
        if n > 0:
            ens = forecast(ens, model, n - 1, rng)
        did = n < nobs and n % every == 0
        if did:
            ens = analysis(ens, observations[n], om, rng, inflation, localization)
            if hasattr(model, "reset_members"):
                model.reset_members(ens.members, None)
        means.append(ens.mean)
        spreads.append(ens.spread)
        analysed.append(did)
        if record_every and n % record_every == 0:
            kept[n] = ens.members.copy()
    return FilterResult(np.array(means), np.array(spreads), np.array(analysed), kept)


class ReducedForecast:
    """Forecast adapter for the truncated or NAR model on real coordinates.

    ``path`` holds one coarse forcing path per filter run (batch shape
    ``(...)``); all members of a run see the same force.  NAR members get
    independent residual noise from the filter's generator.
    """

    def __init__(
        self,
        model: str,
        config: ReducedConfig,
        path: ForcingPath,
        params: NARParameters | None = None,
        noise: bool = True,
    ):
        if model not in ("truncated", "nar"):
            raise ValueError(f"unknown reduced model {model!r}")
        if model == "nar" and params is None:
            raise ValueError("the NAR model needs parameters")
        self.model = model
        self.config = config
        self.path = path
        self.params = params
        self.noise = noise
        self.coeffs = config.etd()
        self.state: NARState | None = None

    def _force(self, step: int) -> np.ndarray:
        f = spectral_force(self.path, self.config.forcing, step)
        return f[..., None, :]  # broadcast over members

    def reset_members(self, members: np.ndarray, mask) -> None:
        """Sync the lag history with externally modified members."""
        if self.state is None:
            return
        v = to_complex(members)
        if mask is None:
            self.state.replace_current(v)
            return
        with np.errstate(all="ignore"):
            R = galerkin_increment(v, self.coeffs)
        keep = ~np.asarray(mask)[..., None]
        self.state.v = [np.where(keep, h, v) for h in self.state.v]
        self.state.R = [np.where(keep, h, R) for h in self.state.R]
        self.state.replace_current(v)

    def __call__(self, members: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray:
        v = to_complex(members)
        force = self._force(step)
        with np.errstate(all="ignore"):
            if self.model == "truncated":
                return to_real(etd_step(v, force, self.coeffs))
            if self.state is None:
                self.state = NARState(v, self.params.p, self.config, self.coeffs)
            else:
                self.state.replace_current(v)
            out = nar_step(self.state, force, self.params, rng if self.noise else None, check=False)
        return to_real(out)


def linear_model(a) -> Callable:
    """``x -> a x`` (scalar or matrix ``a``), mostly for testing."""
    a = np.asarray(a, dtype=float)

    def step(members, _step, _rng):
        return members * a if a.ndim == 0 else members @ a.T

    return step
