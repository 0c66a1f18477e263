"""Self-describing binary trajectory files.

Layout (all little-endian)::

    magic      8 bytes   b"SBTRAJ\\r\\n"
    version    u16
    bom        u16       0xFEFF; reads back as 0xFFFE from a byte-swapped file
    flags      u32       bit 0: forcing section present
    nmodes, nmembers, nsnap, stride, k0       u32 each
    dt, sample_dt, nu, sigma, t0              f64 each
    seeds      nmembers x u64
    meta_len   u32, then meta_len bytes of UTF-8 JSON (free-form tags)
    states     nmembers x nsnap x nmodes complex128
    forcing    [flags & 1] nmembers x (nsnap - 1) x k0 x 2 float64 increments
               at spacing sample_dt

Readers refuse other versions; every float is stored as raw IEEE bits, so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forcing import ForcingPath
from .full_model import Trajectory

MAGIC = b"SBTRAJ\r\n"
VERSION = 1
_BOM = 0xFEFF
_HEAD = struct.Struct("<8sHHI5I5d")


class FormatError(OSError):
    """File is not a trajectory file of a supported version."""


@dataclass
class TrajectoryFile:
    trajectory: Trajectory
    forcing: ForcingPath | None = None
    header: dict = field(default_factory=dict)


def _seeds(seed, nmembers: int) -> np.ndarray:
    if seed is None:
        return np.zeros(nmembers, dtype="<u8")
    out = np.atleast_1d(np.asarray(seed, dtype=np.uint64)).ravel()
    if out.size == 1 and nmembers > 1:
        out = np.repeat(out, nmembers)
    if out.size != nmembers:
        raise ValueError("one seed per member expected")
    return out.astype("<u8")


def write_trajectory(path, traj: Trajectory, forcing: ForcingPath | None = None, meta: dict | None = None) -> None:
    """Write a (possibly batched) trajectory, flattening batch axes to members."""
    states = np.asarray(traj.states, dtype=complex)
    nsnap, nmodes = states.shape[-2:]
    states = states.reshape(-1, nsnap, nmodes)
    nmembers = states.shape[0]
    info = dict(traj.meta)
    stride = int(info.get("stride") or 1)
    k0 = int(info.get("k0") or (forcing.k0 if forcing is not None else 0))
    flags = 0
    if forcing is not None:
        incs = np.asarray(forcing.increments, dtype=float).reshape(nmembers, -1, forcing.k0, 2)
        if incs.shape[1] != nsnap - 1 or not np.isclose(forcing.dt, traj.sample_dt):
            raise ValueError("forcing must hold one coarse increment per snapshot interval")
        flags |= 1
        k0 = forcing.k0
    seed = info.get("seed")
    if seed is None and forcing is not None:
        seed = forcing.seed
    head = _HEAD.pack(
        MAGIC, VERSION, _BOM, flags, nmodes, nmembers, nsnap, stride, k0,
        float(info.get("dt") or traj.sample_dt), traj.sample_dt, float(info.get("nu") or 0.0),
        float(info.get("sigma") or 0.0), float(traj.times[0]),
    )
    extra = {k: v for k, v in info.items() if k not in ("dt", "nu", "sigma", "stride", "k0", "seed", "nmodes")}
    extra.update(meta or {})
    blob = json.dumps(extra, sort_keys=True, default=_plain).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(_seeds(seed, nmembers).tobytes())
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(states.astype("<c16").tobytes())
            if flags & 1:
                fh.write(incs.astype("<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    raw = fh.read(_HEAD.size)
    if len(raw) < _HEAD.size or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a trajectory file")
    (_, version, bom, flags, nmodes, nmembers, nsnap, stride, k0,
     dt, sample_dt, nu, sigma, t0) = _HEAD.unpack(raw)
    if bom != _BOM:
        raise FormatError(f"{path}: unexpected byte order marker {bom:#x}")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, this reader handles {VERSION}")
    seeds = np.frombuffer(_exact(fh, 8 * nmembers, path), dtype="<u8")
    (mlen,) = struct.unpack("<I", _exact(fh, 4, path))
    try:
        meta = json.loads(_exact(fh, mlen, path).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    return {
        "version": version, "flags": flags, "nmodes": nmodes, "nmembers": nmembers, "nsnap": nsnap,
        "stride": stride, "k0": k0, "dt": dt, "sample_dt": sample_dt, "nu": nu, "sigma": sigma,
        "t0": t0, "seeds": seeds, "meta": meta,
    }


def _exact(fh, size: int, path) -> bytes:
    raw = fh.read(size)
    if len(raw) != size:
        raise FormatError(f"{path}: truncated header")
    return raw


def read_trajectory(path) -> TrajectoryFile:
    path = Path(path)
    with open(path, "rb") as fh:
        h = _read_header(fh, path)
        m, nt, n, k0 = h["nmembers"], h["nsnap"], h["nmodes"], h["k0"]
        body = fh.read(16 * m * nt * n)
        if len(body) != 16 * m * nt * n:
            raise FormatError(f"{path}: truncated state payload")
        states = np.frombuffer(body, dtype="<c16").reshape(m, nt, n).astype(complex)
        forcing = None
        if h["flags"] & 1:
            size = 8 * m * (nt - 1) * k0 * 2
            raw = fh.read(size)
            if len(raw) != size:
                raise FormatError(f"{path}: truncated forcing section")
            incs = np.frombuffer(raw, dtype="<f8").reshape(m, nt - 1, k0, 2).astype(float)
            forcing = ForcingPath(incs, h["sample_dt"], h["seeds"].astype(np.uint64))
    meta = {"dt": h["dt"], "nu": h["nu"], "sigma": h["sigma"], "stride": h["stride"], "k0": k0,
            "nmodes": n, "seed": h["seeds"].astype(np.uint64)}
    meta.update(h["meta"])
    times = h["t0"] + np.arange(nt) * h["sample_dt"]
    return TrajectoryFile(Trajectory(states, times, meta), forcing, h)
