"""Command-line entry point: ``shocktrace <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical blow-up, 4 I/O error.
The default output directory is ``$SHOCKTRACE_OUT`` or ``./shocktrace-out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io, report
from .full_model import BlowUpError, Trajectory
from .inference import write_fit_report
from .reduced import NARParameters
from .shock_trace import ShockThreshold, _jsonable

log = logging.getLogger("shocktrace")

OUT_ENV = "SHOCKTRACE_OUT"
EXIT_CONFIG, EXIT_BLOWUP, EXIT_IO = 2, 3, 4


def _config(args) -> ex.ExperimentConfig:
    if args.config:
        cfg = ex.load_config(args.config, args.scale, args.seed)
    else:
        cfg = ex.build_config({}, args.scale, args.seed)
    if args.sigma is not None:
        cfg = ex.build_config(dict(cfg.to_dict(), sigma=args.sigma), "desk")
    return cfg


def _out(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV, "shocktrace-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(cfg: ex.ExperimentConfig, out: Path) -> None:
    report.write_json(out / "config.json", {"config": cfg.to_dict(), "config_hash": cfg.hash(),
                                            "format_version": io.VERSION})


def cmd_generate(args) -> None:
    cfg, out = _config(args), _out(args)
    _stamp(cfg, out)
    stages = ["threshold", "training"] if args.stage == "all" else [args.stage]
    for stage in stages:
        keep = cfg.reduced.kmodes if stage == "training" else None
        path = out / f"ensemble_{stage}.strj"
        ex.generate_ensemble(cfg, stage, path, keep_modes=keep)
        print(path)


def _load_thresholds(path) -> dict:
    d = json.loads(Path(path).read_text())
    return {int(k): ShockThreshold(**v) for k, v in d["thresholds"].items()}


def cmd_threshold(args) -> None:
    cfg, out = _config(args), _out(args)
    files = args.files or [out / "ensemble_threshold.strj"]
    trajs = [io.read_trajectory(f).trajectory for f in files]
    if len({t.nmodes for t in trajs}) > 1:
        raise ValueError("threshold inputs differ in resolution")
    merged = Trajectory(np.concatenate([t.states for t in trajs]), trajs[0].times, trajs[0].meta)
    thr = ex.compute_thresholds(cfg, merged)
    doc = {"config_hash": cfg.hash(), "seed": cfg.seed, "format_version": io.VERSION,
           "thresholds": {str(k): _asdict(v) for k, v in thr.items()}}
    report.write_json(out / "thresholds.json", doc)
    for k, v in thr.items():
        print(f"k={k}: tau={v.tau:.6g} dbar={v.dbar:.6g} eta={v.eta:.6g}")


def _asdict(thr: ShockThreshold) -> dict:
    return json.loads(json.dumps(asdict(thr), default=_jsonable))


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    files = args.files or [out / "ensemble_training.strj"]
    params = None
    for f in files:
        tf = io.read_trajectory(f)
        if tf.forcing is None:
            raise ValueError(f"{f} has no forcing section")
        if params is not None:
            raise ValueError("train takes a single training file")
        params = ex.train(cfg, tf.trajectory, tf.forcing)
    params.save(out / "nar_params.json")
    write_fit_report(out / "fit_report.csv", params)
    print(out / "nar_params.json")


def _prediction_inputs(args, cfg, out):
    params = NARParameters.load(args.params or out / "nar_params.json")
    thr = _load_thresholds(args.thresholds or out / "thresholds.json")
    K = cfg.reduced.kmodes
    if K not in thr:
        raise ValueError(f"threshold file has no entry for k={K}")
    return params, thr[K]


def cmd_predict(args) -> None:
    cfg, out = _config(args), _out(args)
    params, tau = _prediction_inputs(args, cfg, out)
    n = args.realizations or cfg.prediction.realizations
    with ex.Timer() as t:
        results = ex.run_realizations(ex.predict_batch, cfg, params, tau, n, args.jobs)
    rows = [r for rs, _ in results for r in rs]
    masks = {i: m for _, ms in results for i, m in ms.items()}
    report.write_stats(out / "predict_stats.csv", rows)
    for i in sorted(masks)[: cfg.prediction.dump_masks]:
        for name, m in masks[i].items():
            ex.write_mask_csv(out / f"mask_r{i}_{name}.csv", m)
    _timing(out / "predict_timing.csv", t.seconds, n)
    _print_summary(report.summarise(rows))


def cmd_assimilate(args) -> None:
    cfg, out = _config(args), _out(args)
    params, tau = _prediction_inputs(args, cfg, out)
    n = args.realizations or cfg.assimilation.realizations
    with ex.Timer() as t:
        results = ex.run_realizations(ex.assimilate_batch, cfg, params, tau, n, args.jobs)
    rows = [r for rs in results for r in rs]
    report.write_stats(out / "assimilate_stats.csv", rows)
    _timing(out / "assimilate_timing.csv", t.seconds, n)
    _print_summary(report.summarise(rows))


def _timing(path, seconds: float, n: int) -> None:
    # wall-clock times live apart from the stats so those stay byte-reproducible
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["realizations", "seconds"])
        w.writerow([n, f"{seconds:.3f}"])


def _print_summary(summary: dict) -> None:
    for group, metrics in summary.items():
        line = ", ".join(f"{m} median={b['median']:.4g}" for m, b in metrics.items())
        print(f"{group}: {line}")


def cmd_report(args) -> None:
    out = _out(args)
    stats = [Path(f) for f in args.files if str(f).endswith(".csv")]
    trajs = [Path(f) for f in args.files if str(f).endswith(".strj")]
    if not stats and not trajs:
        raise ValueError("report needs stats CSV and/or trajectory files")
    doc = {"format_version": report.STATS_VERSION}
    if stats:
        rows = report.read_stats(stats)
        summary = report.summarise(rows)
        doc["summary"] = summary
        doc["config_hashes"] = sorted({r["config_hash"] for r in rows})
        report.write_box_csv(out / "box_stats.csv", summary)
    if trajs:
        cfg = _config(args)
        diag = {}
        for f in trajs:
            tf = io.read_trajectory(f)
            traj = tf.trajectory
            if traj.nmodes <= cfg.reduced.kmodes:
                continue
            diag[f.name] = report.energy_diagnostics(traj.states, cfg.reduced.kmodes, tf.header["dt"],
                                                     2 * traj.nmodes)
        doc["diagnostics"] = diag
    report.write_json(out / "summary.json", doc)
    print(out / "summary.json")


COMMANDS = {
    "generate": cmd_generate,
    "threshold": cmd_threshold,
    "train": cmd_train,
    "predict": cmd_predict,
    "assimilate": cmd_assimilate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding the preset")
    common.add_argument("--scale", choices=["desk", "paper"], default="desk")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--sigma", type=float, help="forcing amplitude (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for realisation batches")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./shocktrace-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shocktrace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="full-model ensembles for thresholds and training")
    g.add_argument("--stage", choices=["all", "threshold", "training"], default="all")
    for name, help_ in (("threshold", "shock thresholds for K, 2K and N modes"),
                        ("train", "fit NAR parameters"),
                        ("report", "summaries of stats CSV and trajectory files")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("files", nargs="*" if name != "report" else "+")
    for name, help_ in (("predict", "noise-free prediction experiment"),
                        ("assimilate", "EnKF assimilation then prediction")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--params", help="NAR parameter file")
        p.add_argument("--thresholds", help="threshold file")
        p.add_argument("--realizations", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except BlowUpError as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
