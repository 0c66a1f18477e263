"""Experiment configuration and the generate / threshold / train / predict / assimilate pipelines.

Seeds: stage ``s`` realisation (or member) ``i`` of a run with master seed
``S`` uses ``member_seed(S, s, i)``, with the stage keys below.  Realisations
are therefore independent of how they are batched or split across workers.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import enkf, inference, io, report
from . import shock_trace as st
from .forcing import ForcingPath, ForcingSpec, member_seed
from .full_model import FullModelConfig, Trajectory, run_ensemble
from .reduced import NARParameters, ReducedConfig, simulate_reduced

log = logging.getLogger(__name__)

STAGE_KEYS = {"threshold": 1, "training": 2, "predict": 3, "assimilate": 4}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class FullBlock:
    nu: float = 0.02
    nmodes: int = 128
    dt: float = 1e-3
    k0: int = 4
    spinup: float = 50.0


@dataclass(frozen=True)
class ReducedBlock:
    kmodes: int = 8
    stride: int = 10  # delta = stride * dt


@dataclass(frozen=True)
class ThresholdBlock:
    members: int = 20
    length: float = 50.0
    lam: float = 1.0
    eval_ngrid: int = 256
    batch: int = 32


@dataclass(frozen=True)
class TrainingBlock:
    members: int = 64
    length: float = 40.0
    p: int = 1
    pmax: int = 1
    rcond: float = 1e-10
    batch: int = 32


@dataclass(frozen=True)
class PredictionBlock:
    realizations: int = 50
    horizon: float = 10.0
    noise: bool = False
    dump_masks: int = 1


@dataclass(frozen=True)
class AssimilationBlock:
    realizations: int = 20
    obs_std: float = 0.01
    init_spread: float = 0.0254
    particles: int = 100
    window: float = 5.0
    horizon: float = 10.0
    every: int = 1
    inflation: float = 1.0
    error_window: float = 1.0  # top-mode RMS error is taken over each stage's last stretch


@dataclass(frozen=True)
class ExperimentConfig:
    sigma: float = 0.2
    seed: int = 20210101
    full: FullBlock = field(default_factory=FullBlock)
    reduced: ReducedBlock = field(default_factory=ReducedBlock)
    threshold: ThresholdBlock = field(default_factory=ThresholdBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    prediction: PredictionBlock = field(default_factory=PredictionBlock)
    assimilation: AssimilationBlock = field(default_factory=AssimilationBlock)

    def __post_init__(self):
        f, r = self.full, self.reduced
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if r.kmodes < 1 or 2 * r.kmodes > f.nmodes:
            raise ConfigError("need 1 <= 2K <= N")
        if f.k0 > r.kmodes:
            raise ConfigError("forced modes must be resolved by the reduced model")
        if r.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.threshold.eval_ngrid < 2 * f.nmodes:
            raise ConfigError("evaluation grid too coarse for the full model")
        a = self.assimilation
        if not 0 < a.window <= a.horizon or a.particles < 2:
            raise ConfigError("need 0 < window <= horizon and at least two particles")
        for name, length in (("threshold", self.threshold.length), ("training", self.training.length),
                             ("prediction", self.prediction.horizon), ("assimilation", a.horizon)):
            if abs(length / self.delta - round(length / self.delta)) > 1e-9:
                raise ConfigError(f"{name} length is not a whole number of reduced steps")

    @property
    def delta(self) -> float:
        return self.reduced.stride * self.full.dt

    def full_model(self) -> FullModelConfig:
        f = self.full
        return FullModelConfig(nu=f.nu, nmodes=f.nmodes, dt=f.dt, forcing=ForcingSpec(self.sigma, f.k0, f.dt),
                               spinup=f.spinup)

    def reduced_model(self) -> ReducedConfig:
        return ReducedConfig(self.reduced.kmodes, self.delta, self.full.nu, self.sigma, self.full.k0)

    def threshold_spec(self) -> st.ThresholdSpec:
        return st.ThresholdSpec(self.threshold.lam, self.threshold.eval_ngrid, self.delta)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def seeds(self, stage: str, n: int) -> np.ndarray:
        key = STAGE_KEYS[stage]
        return np.array([member_seed(self.seed, key, i) for i in range(n)], dtype=np.uint64)


_BLOCKS = {"full": FullBlock, "reduced": ReducedBlock, "threshold": ThresholdBlock, "training": TrainingBlock,
           "prediction": PredictionBlock, "assimilation": AssimilationBlock}

# full protocol sizes for the "paper" preset; desk scale is the dataclass defaults
_PAPER = {
    "threshold": {"members": 200, "length": 100.0},
    "training": {"members": 512, "length": 160.0},
    "prediction": {"realizations": 200},
    "assimilation": {"realizations": 200},
}


def preset(scale: str = "desk", sigma: float = 0.2) -> dict:
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}")
    d = asdict(ExperimentConfig(sigma=sigma))
    if scale == "paper":
        for block, values in _PAPER.items():
            d[block].update(values)
    return d


def build_config(overrides: dict | None = None, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    """Preset for ``scale`` with ``overrides`` (a nested dict, e.g. from JSON) merged on top."""
    overrides = copy.deepcopy(overrides or {})
    d = preset(scale, float(overrides.get("sigma", 0.2)))
    unknown = set(overrides) - set(d)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key, value in overrides.items():
        if key in _BLOCKS:
            if not isinstance(value, dict):
                raise ConfigError(f"block {key!r} must be a mapping")
            bad = set(value) - {f.name for f in fields(_BLOCKS[key])}
            if bad:
                raise ConfigError(f"unknown keys {sorted(bad)} in block {key!r}")
            d[key].update(value)
        else:
            d[key] = value
    if seed is not None:
        d["seed"] = seed
    try:
        blocks = {k: _BLOCKS[k](**d[k]) for k in _BLOCKS}
        return ExperimentConfig(sigma=float(d["sigma"]), seed=int(d["seed"]), **blocks)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    try:
        overrides = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(overrides, scale, seed)


# --- pipelines --------------------------------------------------------------


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def generate_ensemble(cfg: ExperimentConfig, stage: str, out_path=None, keep_modes=None) -> io.TrajectoryFile:
    """Full-model ensemble for ``stage`` in {'threshold', 'training'}, recorded every delta."""
    block = getattr(cfg, stage)
    seeds = cfg.seeds(stage, block.members)
    trajs, paths = [], []
    for a, b in _batches(block.members, block.batch):
        traj, path = run_ensemble(cfg.full_model(), seeds[a:b], block.length, cfg.reduced.stride,
                                  keep_modes=keep_modes)
        trajs.append(traj.states)
        paths.append(path.increments)
    meta = dict(traj.meta, seed=seeds)
    full = Trajectory(np.concatenate(trajs), traj.times, meta)
    path = ForcingPath(np.concatenate(paths), cfg.delta, seeds)
    tag = {"stage": stage, "config_hash": cfg.hash()}
    if out_path is not None:
        io.write_trajectory(out_path, full, path, tag)
    return io.TrajectoryFile(full, path, tag)


def compute_thresholds(cfg: ExperimentConfig, traj: Trajectory, kmodes=None) -> dict:
    """Thresholds for the K-, 2K- and N-mode fields of ``traj``."""
    K, N = cfg.reduced.kmodes, traj.nmodes
    ks = kmodes or sorted({K, 2 * K, N})
    spec = cfg.threshold_spec()
    out = {}
    for k in ks:
        thr = st.estimate_threshold(traj, k, spec)
        prov = dict(thr.provenance, config_hash=cfg.hash(), seed=cfg.seed, sigma=cfg.sigma)
        out[k] = replace(thr, provenance=prov)
    return out


def train(cfg: ExperimentConfig, traj: Trajectory, path: ForcingPath) -> NARParameters:
    data = inference.TrainingData.from_run(traj, path, cfg.sigma, cfg.reduced.kmodes)
    rc = cfg.reduced_model()
    tb = cfg.training
    if tb.pmax > 1:
        params = inference.select_model(data, rc, tb.pmax, rcond=tb.rcond).params
    else:
        params = inference.fit(inference.assemble(data, rc, tb.p), tb.rcond)
    params.meta.update({"nu": rc.nu, "delta": rc.delta, "sigma": cfg.sigma, "kmodes": rc.kmodes,
                        "members": data.ntraj, "length": float(traj.times[-1]),
                        "config_hash": cfg.hash(), "seed": cfg.seed})
    return params


def _truth_run(cfg: ExperimentConfig, seeds, horizon: float):
    """Spun-up full-model runs over ``[0, horizon]``, K-mode snapshots every delta."""
    return run_ensemble(cfg.full_model(), seeds, horizon, cfg.reduced.stride, keep_modes=cfg.reduced.kmodes)


def _row(cfg, i, seed, model, stage, rates, mode_error=""):
    return {"realization": i, "seed": int(seed), "model": model, "stage": stage, "fp": float(rates.fp),
            "fn": float(rates.fn), "truth_area": int(rates.truth_area), "mode_error": mode_error,
            "config_hash": cfg.hash(), "format_version": report.STATS_VERSION}


def predict_batch(cfg: ExperimentConfig, params: NARParameters, tau_k: st.ShockThreshold, indices):
    """Noise-free-initial-condition prediction for the given realisation indices.

    Returns stats rows and the masks of every realisation (for dumping).
    """
    K = cfg.reduced.kmodes
    spec = cfg.threshold_spec()
    rc = cfg.reduced_model()
    seeds = cfg.seeds("predict", max(indices) + 1)[list(indices)]
    truth, path = _truth_run(cfg, seeds, cfg.prediction.horizon)
    nsteps = truth.states.shape[-2] - 1
    rows, masks = [], {}
    for b, i in enumerate(indices):
        member = truth.member(b)
        mpath = ForcingPath(path.increments[b], path.dt, int(seeds[b]))
        true_mask = st.shock_trace(member, K, tau_k, spec)
        runs = {
            "truncated": simulate_reduced("truncated", rc, mpath, member.states[0], nsteps),
            "nar": simulate_reduced("nar", rc, mpath, member.states[0], nsteps, params,
                                    noise_seed=member_seed(int(seeds[b]), 1) if cfg.prediction.noise else None),
        }
        masks[i] = {"truth": true_mask}
        for name, run in runs.items():
            m = st.shock_trace(run, K, tau_k, spec)
            masks[i][name] = m
            rows.append(_row(cfg, i, seeds[b], name, "prediction", st.false_rates(m, true_mask)))
    return rows, masks


def assimilate_batch(cfg: ExperimentConfig, params: NARParameters, tau_k: st.ShockThreshold, indices):
    """Filter on ``[0, window]`` then predict to ``horizon`` with both reduced models."""
    a = cfg.assimilation
    K = cfg.reduced.kmodes
    spec = cfg.threshold_spec()
    rc = cfg.reduced_model()
    seeds = cfg.seeds("assimilate", max(indices) + 1)[list(indices)]
    truth, path = _truth_run(cfg, seeds, a.horizon)
    nsteps = truth.states.shape[-2] - 1
    nwin = int(round(a.window / cfg.delta))
    nerr = max(1, int(round(a.error_window / cfg.delta)))
    rows = []
    for b, i in enumerate(indices):
        seed = int(seeds[b])
        rng = np.random.Generator(np.random.PCG64(member_seed(seed, 2)))
        x_true = enkf.to_real(truth.states[b])
        om = enkf.ObservationModel.identity(2 * K, a.obs_std)
        obs = om.observe(x_true[: nwin + 1], rng)
        init = obs[0] + a.init_spread * rng.standard_normal((a.particles, 2 * K))
        mpath = ForcingPath(path.increments[b], path.dt, seed)
        truth_b = truth.member(b)
        true_mask = st.shock_trace(truth_b, K, tau_k, spec)
        for name in ("truncated", "nar"):
            model = enkf.ReducedForecast(name, rc, mpath, params if name == "nar" else None)
            res = enkf.run_filter(model, om, obs, enkf.Ensemble(init), nsteps, member_seed(seed, 3), a.every,
                                  inflation=a.inflation)
            mean = Trajectory(enkf.to_complex(res.means), truth_b.times)
            pred_mask = st.shock_trace(mean, K, tau_k, spec)
            # squared error of the top mode, halved so that its root is a per-component RMS
            err = np.abs(mean.states[:, K - 1] - truth_b.states[:, K - 1]) ** 2 / 2
            for stage, sl, e in (("assimilation", slice(0, nwin + 1), err[max(0, nwin + 1 - nerr) : nwin + 1]),
                                 ("prediction", slice(nwin + 1, None), err[-min(nerr, nsteps - nwin) :])):
                p = st.ShockTraceField(pred_mask.mask[sl], truth_b.times[sl], tau_k.tau)
                t = st.ShockTraceField(true_mask.mask[sl], truth_b.times[sl], tau_k.tau)
                try:
                    rates = st.false_rates(p, t)
                except st.UndefinedRatesError:
                    rates = st.FalseRates(float("nan"), float("nan"), 0)
                rows.append(_row(cfg, i, seed, name, stage, rates, float(np.sqrt(e.mean()))))
    return rows


def run_realizations(fn, cfg, params, tau_k, n: int, jobs: int = 1, batch: int = 25):
    """Evaluate ``fn`` over realisations ``0..n-1`` in order-stable batches."""
    chunks = [list(range(a, b)) for a, b in _batches(n, batch)]
    if jobs <= 1:
        results = [fn(cfg, params, tau_k, c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(fn, [cfg] * len(chunks), [params] * len(chunks), [tau_k] * len(chunks), chunks))
    return results


def write_mask_csv(path, mask: st.ShockTraceField) -> None:
    """One row per time: ``t`` followed by the 0/1 cells of the evaluation grid."""
    with open(path, "w") as fh:
        for t, row in zip(mask.times, mask.mask):
            fh.write(f"{float(t)!r}," + ",".join("1" if c else "0" for c in row) + "\n")


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
