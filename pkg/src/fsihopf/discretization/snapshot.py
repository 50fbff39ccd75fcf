"""Field snapshots: flat little-endian binary block plus a JSON sidecar.

Binary layout::

    8 bytes   magic b"FSIHSNAP"
    uint32    format version (1)
    uint32    flags (bit 0: complex, stored as interleaved re/im)
    int64     nx, ny
    float64   h
    int64     n (number of stored scalars)
    float64   n values, little-endian
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FSIHSNAP"
_HEADER = struct.Struct("<8sIIqqdq")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_snapshot(path, mesh, values, meta: dict | None = None) -> Path:
    values = np.asarray(values)
    is_complex = np.iscomplexobj(values)
    flat = np.ascontiguousarray(values.astype(np.complex128 if is_complex else np.float64)).view(np.float64).ravel()
    header = _HEADER.pack(MAGIC, 1, 1 if is_complex else 0, mesh.nx, mesh.ny, mesh.h, flat.size)
    path = Path(path)
    atomic_write_bytes(path, header + flat.astype("<f8").tobytes())
    side = {"mesh": mesh.spec.to_dict(), "summary": mesh.summary(), "length": int(values.size),
            "complex": bool(is_complex), "meta": meta or {}}
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(side, indent=2, sort_keys=True))
    return path


def read_snapshot(path):
    """Return (values, header dict, sidecar dict or None)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated snapshot")
    magic, version, flags, nx, ny, h, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic header")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)
    if flags & 1:
        data = data.view(np.complex128)
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text(encoding="utf-8")) if side_path.exists() else None
    return data.copy(), {"version": version, "nx": nx, "ny": ny, "h": h, "complex": bool(flags & 1)}, side


def export_cell_csv(path, mesh, cell_values) -> Path:
    """CSV with columns cell, x, y, value for every cell (solid cells included)."""
    cell_values = np.asarray(cell_values, dtype=float)
    if cell_values.shape[0] == mesh.npres:
        full = np.full(mesh.ncells, np.nan)
        full[mesh.pmap >= 0] = cell_values
        cell_values = full
    x, y = mesh.cell_xy()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["cell", "x", "y", "value"])
    for c in range(mesh.ncells):
        w.writerow([c, repr(float(x[c])), repr(float(y[c])), repr(float(cell_values[c]))])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def cell_velocity(mesh, ops, z):
    """Face velocities averaged to cell centres, shape (ncells, 2)."""
    u = ops.ext(z)
    j, i = np.divmod(np.arange(mesh.ncells), mesh.nx)
    ux = 0.5 * (u[mesh.uid(i, j)] + u[mesh.uid(i + 1, j)])
    uy = 0.5 * (u[mesh.vid(i, j)] + u[mesh.vid(i, j + 1)])
    return np.stack([ux, uy], axis=1)
