"""Least-squares estimation of NAR closure coefficients, one mode at a time.

Each mode's complex features and response are split into real and imaginary
rows, so the normal equations use ``Re <a, b>`` and the coefficients stay
real.  The response is the part of the increment the closure must explain::

    y^n_k = (v^n_k - v^{n-1}_k) / delta - f^{n-1}_k

and the residual of the fitted model, multiplied back by ``delta``, is the
one-step noise ``g^n_k`` whose RMS gives ``sigma_g``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import reduced, spectral
from .forcing import ForcingPath, ForcingSpec, spectral_forces
from .full_model import Trajectory
from .reduced import NARParameters, ReducedConfig

log = logging.getLogger(__name__)


@dataclass
class TrainingData:
    """K-mode states ``(M, nt, K)`` sampled every ``delta`` and forces ``(M, nt-1, K0)``.

    ``forces[m, n]`` acts over ``[t_n, t_{n+1})``.
    """

    states: np.ndarray
    forces: np.ndarray
    delta: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=complex)
        self.forces = np.asarray(self.forces, dtype=complex)
        if self.states.ndim == 2:
            self.states = self.states[None]
            self.forces = self.forces[None]
        if self.states.ndim != 3 or self.forces.ndim != 3:
            raise ValueError("expected states (M, nt, K) and forces (M, nt-1, K0)")
        if self.forces.shape[:2] != (self.states.shape[0], self.states.shape[1] - 1):
            raise ValueError("forces are not aligned with the state snapshots")

    @property
    def ntraj(self) -> int:
        return self.states.shape[0]

    @property
    def kmodes(self) -> int:
        return self.states.shape[-1]

    @classmethod
    def from_run(cls, traj: Trajectory, path: ForcingPath, sigma: float, kmodes: int) -> TrainingData:
        """Pair a (batched) full trajectory with the forcing path coarsened to its snapshots."""
        if not np.isclose(path.dt, traj.sample_dt):
            raise ValueError("forcing path is not coarsened to the snapshot spacing")
        nt = traj.states.shape[-2]
        forces = spectral_forces(path.segment(0, nt - 1), ForcingSpec(sigma, path.k0, path.dt))
        states = spectral.project(traj.states, kmodes)
        meta = {k: traj.meta.get(k) for k in ("sigma", "seed", "nu")}
        return cls(states.reshape((-1,) + states.shape[-2:]), forces.reshape((-1,) + forces.shape[-2:]),
                   path.dt, meta)

    def subset(self, index) -> TrainingData:
        return TrainingData(self.states[index], self.forces[index], self.delta, dict(self.meta))

    def window(self, start: int, stop: int | None) -> TrainingData:
        """Time window of every trajectory; ``stop`` counts states."""
        stop = self.states.shape[1] if stop is None else stop
        return TrainingData(self.states[:, start:stop], self.forces[:, start : stop - 1], self.delta,
                            dict(self.meta))


@dataclass
class RegressionSystem:
    """Per-mode normal equations ``A[k] theta = b[k]`` over ``count`` real rows / 2."""

    A: np.ndarray  # (K, 4p, 4p)
    b: np.ndarray  # (K, 4p)
    yy: np.ndarray  # (K,) mean squared response
    count: int
    p: int
    delta: float

    def __add__(self, other: RegressionSystem) -> RegressionSystem:
        if (self.p, self.A.shape) != (other.p, other.A.shape):
            raise ValueError("systems differ in shape")
        n = self.count + other.count
        if n == 0:
            return self
        w1, w2 = self.count / n, other.count / n
        return RegressionSystem(w1 * self.A + w2 * other.A, w1 * self.b + w2 * other.b,
                                w1 * self.yy + w2 * other.yy, n, self.p, self.delta)


def _padded_forces(forces: np.ndarray, kmodes: int) -> np.ndarray:
    out = np.zeros(forces.shape[:-1] + (kmodes,), complex)
    k0 = min(forces.shape[-1], kmodes)
    out[..., :k0] = forces[..., :k0]
    return out


def design(data: TrainingData, config: ReducedConfig, p: int):
    """Features ``(M, n, K, 4p)`` and responses ``(M, n, K)`` for steps ``n = p..nt-1``."""
    states = data.states
    nt = states.shape[1]
    if nt <= p:
        raise ValueError(f"trajectories of {nt} states are too short for p={p}")
    coeffs = config.etd()
    R = reduced.galerkin_increment(states, coeffs)
    f = _padded_forces(data.forces, config.kmodes)
    lag = lambda a, j: a[:, p - j : nt - j]  # noqa: E731  value at n-j for n = p..nt-1
    feats = reduced.closure_features(
        [lag(states, j) for j in range(1, p + 1)],
        [lag(R, j) for j in range(1, p + 1)],
        [f[:, p - j : nt - j] for j in range(1, p + 1)],
        config.nu,
        config.delta,
    )
    X = feats.reshape(feats.shape[:-2] + (4 * p,))
    y = (states[:, p:] - states[:, p - 1 : -1]) / config.delta - f[:, p - 1 :]
    return X, y


def assemble(data: TrainingData, config: ReducedConfig, p: int = 1) -> RegressionSystem:
    """Normal equations averaged over all steps of all trajectories."""
    if not np.isclose(data.delta, config.delta):
        raise ValueError("training data spacing differs from delta")
    K = config.kmodes
    A = np.zeros((K, 4 * p, 4 * p))
    b = np.zeros((K, 4 * p))
    yy = np.zeros(K)
    count = 0
    # trajectories one at a time bound memory; the sum order is fixed
    for m in range(data.ntraj):
        X, y = design(data.subset(slice(m, m + 1)), config, p)
        X = X.reshape(-1, K, 4 * p)
        y = y.reshape(-1, K)
        A += np.einsum("nki,nkj->kij", X.conj(), X).real
        b += np.einsum("nki,nk->ki", X.conj(), y).real
        yy += np.sum(np.abs(y) ** 2, axis=0)
        count += X.shape[0]
    if count:
        A, b, yy = A / count, b / count, yy / count
    return RegressionSystem(A, b, yy, count, p, config.delta)


def solve(system: RegressionSystem, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares coefficients ``(K, 4p)``.

    Columns are equilibrated by the diagonal of ``A`` before the
    pseudo-inverse so that feature scale does not decide what is cut off;
    features that are identically zero get a zero coefficient.
    """
    if not np.any(system.A):
        raise ValueError("normal matrix is identically zero")
    theta = np.zeros(system.b.shape)
    for k in range(system.A.shape[0]):
        d = np.sqrt(np.diag(system.A[k]))
        keep = d > 0
        if not keep.any():
            continue
        dk = d[keep]
        Ak = system.A[k][np.ix_(keep, keep)] / np.outer(dk, dk)
        bk = system.b[k][keep] / dk
        theta[k, keep] = np.linalg.pinv(Ak, rcond=rcond, hermitian=True) @ bk / dk
    return theta


def residual_variance(system: RegressionSystem, theta: np.ndarray) -> np.ndarray:
    """Mean ``|y - X theta|^2`` per mode, from the normal equations."""
    quad = np.einsum("ki,kij,kj->k", theta, system.A, theta)
    lin = np.einsum("ki,ki->k", theta, system.b)
    return np.maximum(system.yy - 2 * lin + quad, 0.0)


def fit(system: RegressionSystem, rcond: float = 1e-10, meta: dict | None = None) -> NARParameters:
    theta = solve(system, rcond)
    # g = delta * (y - X theta)
    sigma_g = system.delta * np.sqrt(residual_variance(system, theta))
    info = {"rcond": rcond, "samples": system.count, "condition": condition_numbers(system).tolist()}
    info.update(meta or {})
    return NARParameters.from_theta(theta, sigma_g, info)


def condition_numbers(system: RegressionSystem) -> np.ndarray:
    out = []
    for Ak in system.A:
        d = np.sqrt(np.diag(Ak))
        keep = d > 0
        Ak = Ak[np.ix_(keep, keep)] / np.outer(d[keep], d[keep])
        out.append(np.linalg.cond(Ak) if keep.any() else np.inf)
    return np.array(out)


def one_step_error(data: TrainingData, config: ReducedConfig, params: NARParameters) -> float:
    """Mean squared one-step prediction error of the noise-free model."""
    X, y = design(data, config, params.p)
    resid = config.delta * (y - np.einsum("...ki,ki->...k", X, params.theta()))
    return float(np.mean(np.abs(resid) ** 2))


@dataclass
class ConvergenceReport:
    fractions: list
    estimates: np.ndarray  # (nfrac, K, 4p)
    max_relative_change: float
    retained: np.ndarray  # (K, 4p) bool


def convergence_diagnostic(
    data: TrainingData,
    config: ReducedConfig,
    p: int = 1,
    fractions=(0.25, 0.5, 1.0),
    rcond: float = 1e-10,
    retain_tol: float = 1e-8,
) -> ConvergenceReport:
    """Refit on nested leading subsets of the trajectories.

    The convergence measure is the largest relative change of a retained
    coefficient between the two largest subsets.  A coefficient is retained
    when its feature is not identically zero and its magnitude exceeds
    ``retain_tol`` in the full fit.
    """
    fractions = sorted(fractions)
    if len(fractions) < 2:
        raise ValueError("need at least two fractions")
    estimates = []
    for frac in fractions:
        m = max(1, int(round(frac * data.ntraj)))
        estimates.append(solve(assemble(data.subset(slice(0, m)), config, p), rcond))
    estimates = np.array(estimates)
    last, prev = estimates[-1], estimates[-2]
    retained = np.abs(last) > retain_tol
    rel = np.abs(last - prev)[retained] / np.abs(last)[retained]
    change = float(rel.max()) if rel.size else 0.0
    return ConvergenceReport(list(fractions), estimates, change, retained)


@dataclass
class SelectionReport:
    p: int
    heldout_error: dict
    family_energy: dict  # p -> (4,) fraction of fitted closure energy per family
    params: NARParameters


def family_energy(data: TrainingData, config: ReducedConfig, params: NARParameters) -> np.ndarray:
    """Share of ``sum |c x|^2`` carried by each family (cv, cR, cf, cw)."""
    X, _ = design(data, config, params.p)
    contrib = X * params.theta()
    p = params.p
    e = np.array([np.sum(np.abs(contrib[..., i * p : (i + 1) * p].sum(-1)) ** 2) for i in range(4)])
    return e / e.sum() if e.sum() > 0 else e


def select_model(
    data: TrainingData,
    config: ReducedConfig,
    pmax: int = 3,
    heldout: float = 0.2,
    tolerance: float = 0.01,
    rcond: float = 1e-10,
) -> SelectionReport:
    """Smallest lag order whose held-out one-step error is within ``tolerance`` of the best.

    The last ``heldout`` fraction of each trajectory is held out.
    """
    if pmax < 1:
        raise ValueError("pmax must be >= 1")
    nt = data.states.shape[1]
    cut = int(round((1 - heldout) * nt))
    train, test = data.window(0, cut), data.window(cut - pmax, None)
    errors, energy, fits = {}, {}, {}
    for p in range(1, pmax + 1):
        params = fit(assemble(train, config, p), rcond)
        fits[p] = params
        errors[p] = one_step_error(test.window(pmax - p, None), config, params)
        energy[p] = family_energy(train, config, params).tolist()
    best = min(errors.values())
    chosen = min(p for p, e in errors.items() if e <= best * (1 + tolerance))
    log.info("model selection: held-out errors %s, chose p=%d", errors, chosen)
    return SelectionReport(chosen, errors, energy, fits[chosen])


def write_fit_report(path, params: NARParameters) -> None:
    """CSV with one row per (mode, family, lag) plus per-mode sigma_g and condition number."""
    cond = params.meta.get("condition", [float("nan")] * params.kmodes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "family", "lag", "value", "sigma_g", "condition"])
        for k in range(params.kmodes):
            for name in reduced.FAMILIES:
                for j in range(params.p):
                    w.writerow([k + 1, name, j + 1, repr(float(getattr(params, name)[k, j])),
                                repr(float(params.sigma_g[k])), repr(float(cond[k]))])
