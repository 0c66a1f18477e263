"""Acceptance criteria 1-8 at their stated tolerances.

Each test records one line in ``RESULTS``; ``conftest.py`` prints them at the
end of the session.  Criteria 3-6 run desk-scale experiments (minutes) and
are marked ``slow``; the ensembles and fits are shared through module
fixtures so each is computed once.
"""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

import oracles
from shocktrace import enkf, inference, spectral
from shocktrace import experiments as ex
from shocktrace import full_model as fm
from shocktrace import reduced as rd
from shocktrace import report
from shocktrace import shock_trace as st
from shocktrace.forcing import ForcingSpec, coarsen, sample_path, spectral_force
from test_cli import TINY, pipeline
from test_inference import synthetic

RESULTS: dict[int, tuple[bool, str]] = {}

SIGMAS = (0.2, 1.0)
CFL_TARGET = {0.2: 0.045, 1.0: 0.139}
ENERGY_TARGET = {0.2: 3.26, 1.0: 6.09}  # percent
TAU_TARGET = {0.2: -15.77, 1.0: -52.22}  # unit-interval derivative units
CV8_TARGET = -9.20


def record(number: int, checks: dict[str, bool], detail: str) -> None:
    ok = all(checks.values())
    failed = [name for name, passed in checks.items() if not passed]
    RESULTS[number] = (ok, detail + (f"  [failed: {', '.join(failed)}]" if failed else ""))
    assert ok, f"criterion {number}: {detail}; failed checks: {failed}"


# --- shared desk-scale experiments -------------------------------------------


@pytest.fixture(scope="module")
def configs():
    return {s: ex.build_config({"sigma": s}) for s in SIGMAS}


@pytest.fixture(scope="module")
def physics(configs):
    """Criterion 3 statistics and the K-mode thresholds, per sigma."""
    out = {}
    for s, cfg in configs.items():
        traj = ex.generate_ensemble(cfg, "threshold").trajectory
        diag = report.energy_diagnostics(traj.states, cfg.reduced.kmodes, cfg.full.dt, 2 * cfg.full.nmodes)
        thr = ex.compute_thresholds(cfg, traj)
        unit = replace(cfg.threshold_spec(), domain_length=1.0)
        tau_unit = st.estimate_threshold(traj, cfg.reduced.kmodes, unit).tau
        out[s] = {"diag": diag, "thresholds": thr, "tau_unit": tau_unit}
        del traj
    return out


@pytest.fixture(scope="module")
def fits(configs):
    out = {}
    for s, cfg in configs.items():
        tf = ex.generate_ensemble(cfg, "training", keep_modes=cfg.reduced.kmodes)
        out[s] = ex.train(cfg, tf.trajectory, tf.forcing)
    return out


def medians(rows, stage, metric):
    out = {}
    for model in ("truncated", "nar"):
        vals = [float(r[metric]) for r in rows if r["model"] == model and r["stage"] == stage]
        vals = [v for v in vals if np.isfinite(v)]
        out[model] = float(np.median(vals)) if vals else float("nan")
    return out


# --- criterion 1 --------------------------------------------------------------


def test_criterion_1_spectral_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (8, 16, 32):
        for _ in range(100):
            u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            err = np.max(np.abs(spectral.burgers_nonlinearity(u) - oracles.convolution_nonlinearity(u)))
            worst = max(worst, err)
    record(1, {"max error <= 1e-12": worst <= 1e-12}, f"max |dealiased - direct convolution| = {worst:.2e}")


# --- criterion 2 --------------------------------------------------------------


def _deterministic_order():
    n, nu = 32, 0.02
    k = np.arange(1, n + 1)
    rng = np.random.default_rng(0)
    u0 = 0.5 * (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.exp(-0.3 * k)
    finals = []
    for h in (0.02, 0.01, 0.005):
        c = fm.precompute_etd(nu, n, h)
        u = u0.copy()
        for _ in range(int(round(1.0 / h))):
            u = fm.etd_step(u, None, c)
        finals.append(u)
    a, b, c = finals
    return float(np.log2(np.linalg.norm(a - b) / np.linalg.norm(b - c)))


def _stochastic_order():
    n, nu, dt, paths = 32, 0.02, 0.01, 32
    k = np.arange(1, n + 1)
    rng = np.random.default_rng(0)
    u0 = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.exp(-0.3 * k)
    fine = sample_path(ForcingSpec(1.0, 4, dt / 16), int(round(16 / dt)), np.arange(paths) + 7)

    def run(path):
        c = fm.precompute_etd(nu, n, path.dt)
        spec = ForcingSpec(1.0, 4, path.dt)
        u = np.tile(u0, (paths, 1))
        for step in range(path.nsteps):
            u = fm.etd_step(u, spectral_force(path, spec, step), c)
        return u

    ref = run(fine)
    steps = np.array([dt, dt / 2, dt / 4])
    errors = [np.mean(np.linalg.norm(run(coarsen(fine, f)) - ref, axis=-1)) for f in (16, 8, 4)]
    return float(np.polyfit(np.log(steps), np.log(errors), 1)[0])


def test_criterion_2_integrator_orders():
    det, sto = _deterministic_order(), _stochastic_order()
    record(2, {"deterministic >= 3.8": det >= 3.8, "stochastic >= 0.9": sto >= 0.9},
           f"ETDRK4 self-convergence order {det:.3f}, stochastic strong order {sto:.3f}")


# --- criterion 3 --------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_physics_statistics(physics, configs):
    checks, parts = {}, []
    for s in SIGMAS:
        p = physics[s]
        K = configs[s].reduced.kmodes
        cfl_mean = p["diag"]["cfl_mean"]
        energy = 100 * p["diag"]["unresolved_energy_mean"]
        thr = p["thresholds"]
        checks[f"sigma={s} CFL"] = abs(cfl_mean / CFL_TARGET[s] - 1) <= 0.30
        checks[f"sigma={s} energy"] = abs(energy - ENERGY_TARGET[s]) <= 1.5
        checks[f"sigma={s} |tau_K|<|tau_2K|"] = abs(thr[K].tau) < abs(thr[2 * K].tau)
        checks[f"sigma={s} tau_K"] = abs(p["tau_unit"] / TAU_TARGET[s] - 1) <= 0.25
        parts.append(f"sigma={s}: CFL {cfl_mean:.4f}, unresolved {energy:.2f}%, tau_K {p['tau_unit']:.2f}, "
                     f"tau_2K/tau_K {thr[2 * K].tau / thr[K].tau:.2f}")
    record(3, checks, "; ".join(parts))


# --- criterion 4 --------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_nar_refit(fits):
    checks, parts = {}, []
    for s in SIGMAS:
        cv, cR = fits[s].cv[:, 0], fits[s].cR[:, 0]
        checks[f"sigma={s} cv<0"] = bool(np.all(cv < 0))
        checks[f"sigma={s} cv decreasing"] = bool(np.all(np.diff(cv) < 0))
        checks[f"sigma={s} cR in [0.2,1.3]"] = bool(np.all((cR >= 0.2) & (cR <= 1.3)))
        parts.append(f"sigma={s}: cv {cv[0]:.3g}..{cv[-1]:.3g}, cR {cR.min():.3g}..{cR.max():.3g}")
    cv8 = fits[1.0].cv[7, 0]
    checks["cv8 within factor 2"] = 0.5 <= cv8 / CV8_TARGET <= 2.0
    truth = rd.reference_parameters(0.2)
    theta = inference.solve(inference.assemble(synthetic(truth), rd.ReducedConfig(kmodes=8, sigma=0.2), 1))
    recovery = float(np.max(np.abs(theta - truth.theta())))
    checks["synthetic recovery <= 1e-8"] = recovery <= 1e-8
    record(4, checks, "; ".join(parts) + f"; cv_8(sigma=1) {cv8:.3f}; synthetic recovery error {recovery:.1e}")


# --- criterion 5 --------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_noiseless_prediction(configs, physics, fits):
    checks, parts = {}, []
    for s in SIGMAS:
        cfg = configs[s]
        tau = physics[s]["thresholds"][cfg.reduced.kmodes]
        results = ex.run_realizations(ex.predict_batch, cfg, fits[s], tau, cfg.prediction.realizations)
        rows = [r for rs, _ in results for r in rs]
        fp, fn = medians(rows, "prediction", "fp"), medians(rows, "prediction", "fn")
        checks[f"sigma={s} fp NAR<truncated"] = fp["nar"] < fp["truncated"]
        checks[f"sigma={s} fn NAR<truncated"] = fn["nar"] < fn["truncated"]
        if s == 1.0:
            checks["sigma=1 NAR fp<=0.3"] = fp["nar"] <= 0.3
            checks["sigma=1 truncated fp>=1.0"] = fp["truncated"] >= 1.0
        parts.append(f"sigma={s}: median fp NAR {fp['nar']:.3f} / truncated {fp['truncated']:.3f}, "
                     f"median fn NAR {fn['nar']:.3f} / truncated {fn['truncated']:.3f}")
    record(5, checks, "; ".join(parts))


# --- criterion 6 --------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_assimilation(configs, physics, fits):
    cfg = configs[1.0]
    obs_std = cfg.assimilation.obs_std
    tau = physics[1.0]["thresholds"][cfg.reduced.kmodes]
    results = ex.run_realizations(ex.assimilate_batch, cfg, fits[1.0], tau, cfg.assimilation.realizations)
    rows = [r for rs in results for r in rs]
    fp_pred = medians(rows, "prediction", "fp")
    fp_assim = medians(rows, "assimilation", "fp")
    err = medians(rows, "assimilation", "mode_error")
    checks = {
        "NAR prediction fp <= 0.3": fp_pred["nar"] <= 0.3,
        "NAR prediction fp <= half truncated": fp_pred["nar"] <= 0.5 * fp_pred["truncated"],
        "NAR mode-8 error < obs std": err["nar"] < obs_std,
    }
    record(6, checks, f"prediction median fp NAR {fp_pred['nar']:.3f} / truncated {fp_pred['truncated']:.3f}; "
                      f"assimilation median fp NAR {fp_assim['nar']:.3f} / truncated {fp_assim['truncated']:.3f}; "
                      f"NAR mode-8 error {err['nar']:.4f} (obs std {obs_std})")


# --- criterion 7 --------------------------------------------------------------


def test_criterion_7_enkf_scalar_kalman():
    a, q, r, m0, p0, nsteps, M = 0.95, 0.1, 0.2, 1.0, 0.5, 50, 10_000
    rng = np.random.default_rng(2024)
    x, truth = rng.normal(m0, np.sqrt(p0)), []
    for n in range(nsteps + 1):
        if n:
            x = a * x + rng.normal(0, np.sqrt(q))
        truth.append(x)
    obs = np.array(truth)[:, None] + rng.normal(0, np.sqrt(r), (nsteps + 1, 1))
    exact = oracles.kalman_scalar(m0, p0, a, q, r, obs[:, 0])

    def model(members, _step, gen):
        return a * members + np.sqrt(q) * gen.standard_normal(members.shape)

    init = enkf.Ensemble(m0 + np.sqrt(p0) * np.random.default_rng(5).standard_normal((M, 1)))
    res = enkf.run_filter(model, enkf.ObservationModel.identity(1, np.sqrt(r)), obs, init, nsteps, seed=6)
    z = np.abs(res.means[:, 0] - exact[:, 0]) / np.sqrt(exact[:, 1] / M)
    record(7, {"every step within 3 s.e.": bool(np.all(z < 3))},
           f"max deviation {z.max():.2f} Monte Carlo standard errors over {nsteps + 1} steps")


# --- criterion 8 --------------------------------------------------------------


def test_criterion_8_properties(tmp_path):
    rng = np.random.default_rng(8)
    checks = {}

    # reality: synthesis of the one-sided state equals the direct two-sided sum
    u = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    x = spectral.grid(64)
    checks["reality"] = np.allclose(spectral.to_physical(u, 64), oracles.direct_synthesis(u, x), atol=1e-12)
    cfg = ForcingSpec(1.0, 4, 0.01)
    v0 = 0.3 * u[:8] * np.exp(-0.3 * np.arange(8))
    v = rd.simulate_reduced("nar", rd.ReducedConfig(sigma=1.0), sample_path(cfg, 50, 1), v0, 50,
                            rd.reference_parameters(1.0)).states
    filtered = enkf.to_complex(enkf.to_real(v))
    checks["conjugate symmetry through the filter map"] = np.array_equal(filtered, v)

    # zero mode: the nonlinearity carries no mean and the full model keeps the mean at zero
    ngrid = spectral.dealias_size(16)
    phys = spectral.to_physical(u, ngrid)
    flux = spectral.to_physical(spectral.spectral_derivative(u), ngrid) * phys
    full = fm.FullModelConfig(nmodes=16, dt=0.01, forcing=ForcingSpec(1.0, 4, 0.01))
    traj = fm.simulate(full, sample_path(full.forcing, 100, 3), 0.2 * u, 100, stride=10)
    checks["zero mode conserved"] = (abs(flux.mean()) < 1e-12
                                     and np.abs(spectral.to_physical(traj.states, 64).mean(axis=-1)).max() < 1e-13)

    # closure linearity in the parameters
    state = rd.NARState(0.3 * u[:8], 1, rd.ReducedConfig(sigma=1.0))
    state.push_force(u[:4])
    pa, pb = rd.reference_parameters(0.2), rd.reference_parameters(1.0)
    lhs = rd.nar_closure(state, pa.combine(2.0, pb, -0.5))
    rhs = 2.0 * rd.nar_closure(state, pa) - 0.5 * rd.nar_closure(state, pb)
    checks["closure linearity"] = np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    # rate identities
    tr = fm.Trajectory(traj.states, traj.times)
    m = st.shock_trace(tr, 16, -0.5)
    same = st.false_rates(m, m)
    all_on, all_off = st.shock_trace(tr, 16, np.inf), st.shock_trace(tr, 16, -np.inf)
    try:
        st.false_rates(m, all_off)
        undefined = False
    except st.UndefinedRatesError:
        undefined = True
    checks["rate identities"] = (same.fp == 0 and same.fn == 0 and all_on.mask.all() and not all_off.mask.any()
                                 and st.false_rates(all_off, all_on).fn == 1 and undefined)

    # coarsening: block sums nest, and snapshots at stride 10 equal a stride-1 run subsampled
    fine = sample_path(ForcingSpec(1.0, 4, 0.001), 1000, 4)
    nested = coarsen(coarsen(fine, 2), 5).increments
    checks["coarsening nests"] = np.allclose(nested, coarsen(fine, 10).increments, rtol=0, atol=1e-14)
    one = fm.simulate(full, sample_path(full.forcing, 100, 3), 0.2 * u, 100, stride=1)
    checks["stride consistency"] = np.array_equal(one.states[::10], traj.states)

    # end-to-end seeded determinism of the CLI pipeline
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = pipeline(tmp_path / "a", config), pipeline(tmp_path / "b", config)
    names = sorted(p.name for p in a.iterdir() if "timing" not in p.name)
    checks["end-to-end determinism"] = all((a / n).read_bytes() == (b / n).read_bytes() for n in names)

    record(8, checks, f"{sum(checks.values())}/{len(checks)} property groups hold")

