"""On-disk formats: BIMT tensors, dataset manifests, traces, bases and reports.

Numeric payloads go into BIMT files, a small raw little-endian container::

    b"BIMT" | u32 version=1 | u8 dtype=0 (f64) | u8 ndim | ndim x u64 dims | payload

Metadata is JSON written with sorted keys so identical inputs give identical
bytes. Human-facing tables are CSV.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .kernel_basis import KernelSpec, RegionBasis, VoxelGrid
from .mediation import MediationReport
from .sampler import ChainTrace
from .sem_model import MediationDataset

__all__ = [
    "write_tensor",
    "read_tensor",
    "write_json",
    "read_json",
    "save_dataset",
    "load_dataset",
    "save_trace",
    "load_trace",
    "save_bases",
    "load_bases",
    "save_report",
    "write_csv",
]

MAGIC = b"BIMT"
VERSION = 1
_DTYPE_F64 = 0
_HEADER = struct.Struct("<4sIBB")


def write_tensor(path, arr) -> None:
    """Write ``arr`` as a float64 BIMT tensor."""
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise InvalidArgumentError("too many dimensions for BIMT")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, _DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise InvalidArgumentError(f"{path}: truncated header")
        magic, version, dtype, ndim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise InvalidArgumentError(f"{path}: not a BIMT file")
        if version != VERSION or dtype != _DTYPE_F64:
            raise InvalidArgumentError(f"{path}: unsupported version {version} / dtype {dtype}")
        raw = fh.read(8 * ndim)
        if len(raw) != 8 * ndim:
            raise InvalidArgumentError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{ndim}Q", raw)
        payload = fh.read()
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(payload) != 8 * count:
        raise InvalidArgumentError(
            f"{path}: payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        items = sorted(obj) if isinstance(obj, set) else obj
        return [_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if hasattr(obj, "__dataclass_fields__"):
        from dataclasses import asdict
        return _jsonable(asdict(obj))
    return obj


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot create {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise InvalidArgumentError(f"{path} is not writable")
    return path


# ---------------------------------------------------------------------------
# datasets

_TRUTH_FIELDS = ("alpha0", "beta0", "svme0")


def save_dataset(out_dir, data: MediationDataset, truth=None, provenance: dict | None = None) -> Path:
    """Write tensors, grid and optional truth maps plus ``manifest.json``."""
    out = _ensure_dir(out_dir)
    files = {"Y": "Y.bimt", "X": "X.bimt", "C": "C.bimt", "M": "M.bimt",
             "coords": "coords.bimt", "region_map": "regions.bimt"}
    for key, arr in (("Y", data.Y), ("X", data.X), ("C", data.C), ("M", data.M),
                     ("coords", data.grid.coords), ("region_map", data.grid.region_of)):
        write_tensor(out / files[key], arr)
    manifest = {
        "n": data.n,
        "p": data.p,
        "q": data.q,
        "grid": {"shape": list(data.grid.shape) if data.grid.shape else None,
                 "dim": data.grid.dim, "n_regions": data.grid.n_regions},
        "files": files,
        "provenance": provenance or {},
    }
    if truth is not None:
        tfiles = {}
        for name in _TRUTH_FIELDS:
            tfiles[name] = f"truth_{name}.bimt"
            write_tensor(out / tfiles[name], getattr(truth, name))
        manifest["truth"] = {"files": tfiles, "gamma0": truth.gamma0, "xi0": truth.xi0}
    write_json(out / "manifest.json", manifest)
    return out


def load_dataset(data_dir):
    """Return ``(dataset, truth)`` where ``truth`` is a dict or ``None``."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise InvalidArgumentError(f"no manifest.json in {root}")
    man = read_json(mpath)
    files = man["files"]
    for f in files.values():
        if not (root / f).is_file():
            raise InvalidArgumentError(f"manifest references missing file {f}")
    arrs = {k: read_tensor(root / f) for k, f in files.items()}
    shape = man["grid"].get("shape")
    grid = VoxelGrid(arrs["coords"], arrs["region_map"].astype(np.int64),
                     tuple(shape) if shape else None)
    n, p, q = man["n"], man["p"], man["q"]
    C = arrs["C"].reshape(n, q) if q else np.zeros((n, 0))
    if arrs["M"].shape != (n, p) or arrs["Y"].shape != (n,) or grid.p != p:
        raise InvalidArgumentError("tensor dimensions disagree with the manifest")
    data = MediationDataset(arrs["Y"], arrs["X"], C, arrs["M"], grid)
    truth = None
    if "truth" in man:
        truth = {k: read_tensor(root / f) for k, f in man["truth"]["files"].items()}
        truth["gamma0"] = man["truth"].get("gamma0")
        truth["xi0"] = man["truth"].get("xi0")
    return data, truth


# ---------------------------------------------------------------------------
# traces


def save_trace(out_dir, trace: ChainTrace) -> Path:
    """Write draws as BIMT tensors plus ``trace.json``.

    Wall time is left out so that reruns produce identical bytes.
    """
    out = _ensure_dir(out_dir)
    names = sorted(trace.draws)
    for k in names:
        write_tensor(out / f"draw_{k}.bimt", trace.draws[k])
    meta = {
        "model": trace.model,
        "n_draws": trace.n_draws,
        "parameters": names,
        "accept_rates": trace.accept_rates,
        "step_final": trace.step_final,
        "targets": trace.targets,
        "seed": trace.seed,
        "region_L": trace.region_L,
        "config": trace.config,
    }
    write_json(out / "trace.json", meta)
    return out


def load_trace(trace_dir) -> ChainTrace:
    root = Path(trace_dir)
    if not (root / "trace.json").is_file():
        raise InvalidArgumentError(f"no trace.json in {root}")
    meta = read_json(root / "trace.json")
    draws = {k: read_tensor(root / f"draw_{k}.bimt") for k in meta["parameters"]}
    return ChainTrace(meta["model"], draws, np.asarray(meta["accept_rates"]),
                      np.asarray(meta["step_final"]), meta["seed"], np.asarray(meta["targets"]),
                      meta["config"], meta["region_L"])


# ---------------------------------------------------------------------------
# bases


def save_bases(out_dir, bases) -> Path:
    out = _ensure_dir(out_dir)
    entries = []
    for b in bases:
        write_tensor(out / f"Q_{b.region}.bimt", b.Q)
        write_tensor(out / f"eig_{b.region}.bimt", b.eigvals)
        entries.append({"region": b.region, "L": b.L, "size": b.size,
                        "cutoff_frac": b.cutoff_frac, "trace": b.trace,
                        "kernel": b.kernel.to_dict() if b.kernel else None})
    write_json(out / "bases.json", {"regions": entries})
    return out


def load_bases(bases_dir) -> list:
    root = Path(bases_dir)
    if not (root / "bases.json").is_file():
        raise InvalidArgumentError(f"no bases.json in {root}")
    out = []
    for e in read_json(root / "bases.json")["regions"]:
        r = e["region"]
        Q = read_tensor(root / f"Q_{r}.bimt")
        lam = read_tensor(root / f"eig_{r}.bimt")
        kernel = KernelSpec.from_dict(e["kernel"]) if e.get("kernel") else None
        tr = e.get("trace")
        out.append(RegionBasis(r, Q, lam, e["cutoff_frac"], kernel,
                               float("nan") if tr is None else tr))
    return out


# ---------------------------------------------------------------------------
# reports


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def save_report(out_dir, report: MediationReport, grid: VoxelGrid) -> Path:
    """``report.json``, per-voxel ``svme.csv``, ``regions.csv`` and, on 2-D lattices,
    a plot-ready ``svme_grid.csv``."""
    out = _ensure_dir(out_dir)
    write_json(out / "report.json", report.to_dict())
    sel = np.zeros(grid.p, dtype=bool)
    sel[list(report.selected)] = True
    coord_names = [f"s{k}" for k in range(grid.dim)]
    rows = []
    for j in range(grid.p):
        rows.append([j, int(grid.region_of[j]), *(_fmt(c) for c in grid.coords[j]),
                     _fmt(report.svme_mean[j]), _fmt(report.svme_ci[j, 0]),
                     _fmt(report.svme_ci[j, 1]), _fmt(report.pip[j]), int(sel[j]),
                     _fmt(report.svme_selected[j])])
    write_csv(out / "svme.csv",
               ["voxel", "region", *coord_names, "svme_mean", "ci_low", "ci_high", "pip",
                "selected", "svme_selected"], rows)
    cols = ["region", "nie", "nie_pos", "nie_neg", "avg_pip", "n_active"]
    write_csv(out / "regions.csv", cols,
               [[row[c] if c in ("region", "n_active") else _fmt(row[c]) for c in cols]
                for row in report.region_table])
    if grid.shape is not None and len(grid.shape) == 2:
        img = report.svme_selected.reshape(grid.shape)
        write_csv(out / "svme_grid.csv", [f"c{k}" for k in range(grid.shape[1])],
                   [[_fmt(v) for v in row] for row in img])
    return out
