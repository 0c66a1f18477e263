"""Shock traces: where the spatial derivative drops below a resolution-adaptive threshold.

For a field resolved with k modes, the threshold is built from the most
negative derivative ``D`` of every snapshot of a reference ensemble::

    tau_k = mean(D) + lam * std(D)      (population std)

and the shock trace of any k-mode field is the space-time mask
``du/dx < tau_k`` sampled on a common evaluation grid.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import spectral
from .full_model import Trajectory

log = logging.getLogger(__name__)


class UndefinedRatesError(ZeroDivisionError):
    """The truth mask is empty, so the false rates have no denominator."""


@dataclass(frozen=True)
class ThresholdSpec:
    """How derivatives are sampled and thresholded.

    ``domain_length`` is the length the periodic interval is measured in when
    differentiating: ``2*pi`` gives ``d/dx``; ``1.0`` differentiates in the
    unit-interval coordinate ``x/(2*pi)``, which scales every derivative,
    threshold and ``D`` statistic by ``2*pi`` and leaves masks unchanged.
    """

    lam: float = 1.0
    eval_ngrid: int = 256
    sample_dt: float | None = None
    domain_length: float = 2 * np.pi

    @property
    def derivative_scale(self) -> float:
        return 2 * np.pi / self.domain_length


@dataclass(frozen=True)
class ShockThreshold:
    tau: float
    dbar: float
    eta: float
    kmodes: int
    lam: float = 1.0
    ensemble_size: int = 0
    nsamples: int = 0
    domain_length: float = 2 * np.pi
    provenance: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=_jsonable) + "\n")

    @classmethod
    def load(cls, path) -> ShockThreshold:
        return cls(**json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


@dataclass
class ShockTraceField:
    """Boolean ``mask[..., t, j]``: shock at time ``times[t]`` and ``x_j``."""

    mask: np.ndarray
    times: np.ndarray
    threshold: float

    @property
    def area(self) -> np.ndarray:
        return self.mask.sum(axis=(-2, -1))


@dataclass(frozen=True)
class FalseRates:
    fp: float | np.ndarray
    fn: float | np.ndarray
    truth_area: int | np.ndarray


def derivative_field(coeffs, spec: ThresholdSpec = ThresholdSpec()) -> np.ndarray:
    du = spectral.to_physical(spectral.spectral_derivative(coeffs), spec.eval_ngrid)
    return du * spec.derivative_scale


def most_negative_derivative(coeffs, spec: ThresholdSpec = ThresholdSpec()) -> np.ndarray:
    return derivative_field(coeffs, spec).min(axis=-1)


def threshold_from_minima(minima, kmodes: int, lam: float = 1.0, **info) -> ShockThreshold:
    """Mean and population std of the snapshot minima, combined into ``tau``.

    ``math.fsum`` keeps the statistics exactly invariant to sample order.
    """
    d = np.asarray(minima, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("no samples to estimate a threshold from")
    dbar = math.fsum(d) / d.size
    eta = math.sqrt(math.fsum((d - dbar) ** 2) / d.size)
    tau = dbar + lam * eta
    if tau >= 0:
        log.warning("non-negative shock threshold %.4g for k=%d", tau, kmodes)
    return ShockThreshold(tau=tau, dbar=dbar, eta=eta, kmodes=kmodes, lam=lam, nsamples=d.size, **info)


def estimate_threshold(trajectories, kmodes: int, spec: ThresholdSpec = ThresholdSpec()) -> ShockThreshold:
    """Threshold for the ``kmodes`` projection of every snapshot of every trajectory.

    ``trajectories`` is a Trajectory (possibly batched) or a sequence of them.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty ensemble")
    minima = []
    members = 0
    for traj in trajectories:
        states = spectral.project(traj.states, kmodes)
        minima.append(most_negative_derivative(states, spec).ravel())
        members += int(np.prod(traj.states.shape[:-2], dtype=int))
    seeds = [t.meta.get("seed") for t in trajectories]
    prov = {"seeds": seeds, "T": float(trajectories[0].times[-1])}
    return threshold_from_minima(
        np.concatenate(minima),
        kmodes,
        spec.lam,
        ensemble_size=members,
        domain_length=spec.domain_length,
        provenance=prov,
    )


def shock_trace(
    traj: Trajectory, kmodes: int, thr: ShockThreshold | float, spec: ThresholdSpec = ThresholdSpec()
) -> ShockTraceField:
    tau = thr.tau if isinstance(thr, ShockThreshold) else float(thr)
    if isinstance(thr, ShockThreshold):
        if thr.kmodes != kmodes:
            raise ValueError(f"threshold is for {thr.kmodes} modes, not {kmodes}")
        if not np.isclose(thr.domain_length, spec.domain_length):
            raise ValueError("threshold and spec measure derivatives in different units")
    states = spectral.project(traj.states, kmodes)
    return ShockTraceField(derivative_field(states, spec) < tau, traj.times, tau)


def false_rates(pred: ShockTraceField, truth: ShockTraceField) -> FalseRates:
    """Cell-count false positive / negative rates relative to the truth area."""
    if pred.mask.shape != truth.mask.shape or not np.allclose(pred.times, truth.times):
        raise ValueError("prediction and truth live on different space-time grids")
    p, t = pred.mask, truth.mask
    area = t.sum(axis=(-2, -1))
    if np.any(area == 0):
        raise UndefinedRatesError("truth shock trace is empty")
    fp = (p & ~t).sum(axis=(-2, -1)) / area
    fn = (t & ~p).sum(axis=(-2, -1)) / area
    if np.ndim(area) == 0:
        return FalseRates(float(fp), float(fn), int(area))
    return FalseRates(fp, fn, area)
