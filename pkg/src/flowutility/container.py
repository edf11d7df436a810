"""Binary persistence for flow bundles and sampled fields, plus CSV export.

Container layout: 8-byte magic, uint64 little-endian header length, UTF-8
JSON header, then the named planes as little-endian float64 in path-major
(path, time, grid) order.  A JSON sidecar (same path + ".json") carries the
policy identifier, a market hash and any user extras.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError
from .flows import InverseFlowField
from .lattice import FlowBundle

MAGIC = b"FLOWUTL1"


def save_container(path, header: dict, planes: dict):
    """Write named float64 planes with a JSON header describing their shape."""
    header = dict(header)
    header["planes"] = sorted(planes)
    first = planes[header["planes"][0]]
    header.setdefault("shape", list(first.shape))
    for name in header["planes"]:
        if planes[name].shape != first.shape:
            raise InvalidConfigError("all planes in one container must share a shape")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["planes"]:
            fh.write(np.ascontiguousarray(planes[name], dtype="<f8").tobytes())
    return header


def load_container(path):
    """Read back (header, planes) written by :func:`save_container`."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InvalidConfigError(f"{path}: not a flow container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        planes = {}
        for name in header["planes"]:
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            planes[name] = np.ascontiguousarray(data)
    return header, planes


def market_hash(market) -> str:
    return hashlib.sha256(market.to_json().encode("utf-8")).hexdigest()[:16]


def _write_sidecar(path, bundle_like, market=None, extra=None):
    doc = {
        "policy_ref": getattr(bundle_like, "policy_ref", getattr(bundle_like, "source_ref", "")),
        "market_hash": market_hash(market) if market is not None else None,
        "extra": extra or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def save_bundle(bundle, path, market=None, extra=None):
    """Persist a FlowBundle or InverseFlowField."""
    if isinstance(bundle, InverseFlowField):
        role = "inverse"
        seed = bundle.lattice_ref[0]
        planes = {"values": bundle.values, "extrapolated": bundle.extrapolated.astype(np.float64)}
        grid = bundle.z_grid
    else:
        role = bundle.role
        seed = bundle.lattice_ref[0]
        planes = {"values": bundle.values}
        grid = bundle.grid
    n_paths, n_times, n_grid = planes["values"].shape
    header = {"role": role, "n_paths": n_paths, "n_times": n_times, "n_grid": n_grid,
              "dt": bundle.dt, "seed": seed, "grid": grid.tolist(),
              "lattice_ref": list(bundle.lattice_ref)}
    save_container(path, header, planes)
    _write_sidecar(path, bundle, market, extra)


def load_bundle(path):
    header, planes = load_container(path)
    grid = np.asarray(header["grid"])
    ref = tuple(header["lattice_ref"])
    if header["role"] == "inverse":
        return InverseFlowField(z_grid=grid, values=planes["values"],
                                extrapolated=planes["extrapolated"].astype(bool),
                                dt=header["dt"], lattice_ref=ref)
    return FlowBundle(role=header["role"], grid=grid, values=planes["values"],
                      dt=header["dt"], lattice_ref=ref)


def save_field(field, path, role, market=None, extra=None):
    """Persist a utility/dual field with its derivative planes."""
    first = "ux" if role == "utility" else "uy"
    second = "uxx" if role == "utility" else "uyy"
    planes = {"values": field.values, first: getattr(field, first),
              second: getattr(field, second)}
    grid = field.grid
    header = {"role": role, "n_paths": field.values.shape[0],
              "n_times": field.values.shape[1], "n_grid": grid.shape[0],
              "dt": field.dt, "seed": field.lattice_ref[0] if field.lattice_ref else None,
              "grid": grid.tolist(), "lattice_ref": list(field.lattice_ref)}
    save_container(path, header, planes)
    _write_sidecar(path, field, market, extra)


def export_summary_csv(path, times, grid, values):
    """Per-(t, x) summary statistics over paths: mean, stderr, min, max.

    RFC-4180, UTF-8, dot decimal separator.
    """
    values = np.asarray(values, dtype=np.float64)
    n_paths = values.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["t", "x", "mean", "stderr", "min", "max"])
        for i, t in enumerate(np.asarray(times)):
            mean = values[:, i, :].mean(axis=0)
            if n_paths > 1:
                se = values[:, i, :].std(axis=0, ddof=1) / np.sqrt(n_paths)
            else:
                se = np.zeros_like(mean)
            vmin = values[:, i, :].min(axis=0)
            vmax = values[:, i, :].max(axis=0)
            for j, x in enumerate(np.asarray(grid)):
                writer.writerow([repr(float(t)), repr(float(x)), repr(float(mean[j])),
                                 repr(float(se[j])), repr(float(vmin[j])), repr(float(vmax[j]))])
