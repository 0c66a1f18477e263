"""Summary statistics for experiment outputs.

Box plots follow the usual convention: quartiles by linear interpolation
between order statistics, outliers beyond 1.5 interquartile ranges from the
box, whiskers at the most extreme values that are not outliers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import spectral
from .full_model import cfl

STATS_VERSION = 1
STATS_FIELDS = ("realization", "seed", "model", "stage", "fp", "fn", "truth_area", "mode_error",
                "config_hash", "format_version")


@dataclass(frozen=True)
class BoxStats:
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float | None
    whisker_high: float | None
    outliers: list


def box_stats(values) -> BoxStats:
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("no values to summarise")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    if x.size == 1:
        return BoxStats(1, float(med), float(q1), float(q3), None, None, [])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    outliers = x[(x < lo) | (x > hi)]
    return BoxStats(int(x.size), float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                    [float(v) for v in outliers])


def write_stats(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in STATS_FIELDS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_stats(paths) -> list[dict]:
    """Rows of one or more stats files; mixed format versions are refused."""
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    versions = {r.get("format_version") for r in rows}
    if len(versions) > 1:
        raise ValueError(f"stats files mix format versions {sorted(map(str, versions))}")
    if versions and versions != {str(STATS_VERSION)}:
        raise ValueError(f"unsupported stats format version {versions.pop()}")
    return rows


def summarise(rows) -> dict:
    """Box statistics of ``fp``, ``fn`` and ``mode_error`` per (model, stage)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["model"], r["stage"]), []).append(r)
    out = {}
    for (model, stage), rs in sorted(groups.items()):
        entry = {}
        for metric in ("fp", "fn", "mode_error"):
            vals = [float(r[metric]) for r in rs if r.get(metric) not in ("", None)]
            vals = [v for v in vals if np.isfinite(v)]
            if vals:
                entry[metric] = asdict(box_stats(vals))
        out[f"{model}/{stage}"] = entry
    return out


def write_box_csv(path, summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "metric", "n", "whisker_low", "q1", "median", "q3", "whisker_high", "outliers"])
        for group, metrics in summary.items():
            for metric, b in metrics.items():
                w.writerow([group, metric, b["n"], _opt(b["whisker_low"]), repr(b["q1"]), repr(b["median"]),
                            repr(b["q3"]), _opt(b["whisker_high"]), " ".join(repr(v) for v in b["outliers"])])


def _opt(v):
    return "" if v is None else repr(v)


def energy_diagnostics(states, kmodes: int, dt: float, ngrid: int) -> dict:
    """Unresolved energy share (modes above ``kmodes``) and CFL statistics over snapshots."""
    states = np.asarray(states)
    total = spectral.energy(states)
    resolved = spectral.energy(states[..., :kmodes])
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, 1.0 - resolved / total, 0.0)
    c = cfl(states, dt, ngrid)
    return {
        "unresolved_energy_mean": float(frac.mean()),
        "unresolved_energy_std": float(frac.std()),
        "unresolved_energy_above_20pct": float(np.mean(frac > 0.2)),
        "cfl_mean": float(c.mean()),
        "cfl_max": float(c.max()),
    }


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
