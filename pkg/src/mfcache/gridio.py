"""Artifact I/O: compact binary grid dumps with JSON headers, plot-ready CSVs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import MfcacheError
from .mfg import Lattice


def dump_grid(path, values: np.ndarray, lattice: Lattice, name: str) -> None:
    """Write values as raw little-endian float64 plus a .json sidecar header."""
    path = Path(path)
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    header = {
        "name": name,
        "shape": list(values.shape),
        "dtype": "<f8",
        "lattice": {
            "nx": lattice.nx,
            "nq": lattice.nq,
            "nt": lattice.nt,
            "horizon": lattice.horizon,
            "q_max": lattice.q_max,
        },
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_grid(path):
    """Read a grid dump back; verifies the checksum. Returns (values, Lattice)."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    if not header_path.exists() or not bin_path.exists():
        raise MfcacheError(f"grid dump {path} is missing its .json or .bin part")
    header = json.loads(header_path.read_text())
    payload = bin_path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise MfcacheError(f"grid dump {path} failed its checksum")
    values = np.frombuffer(payload, dtype=header["dtype"]).reshape(header["shape"]).copy()
    lat = header["lattice"]
    lattice = Lattice(
        nx=lat["nx"], nq=lat["nq"], nt=lat["nt"], horizon=lat["horizon"], q_max=lat["q_max"]
    )
    return values, lattice


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, header: list, rows) -> None:
    """Deterministic CSV: fixed float formatting, newline-terminated rows."""
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell if isinstance(cell, str) else _fmt(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n")


def surface_to_csv(path, values: np.ndarray, lattice: Lattice, column: str) -> None:
    """Long-format export of a (t, x, Q) surface."""
    rows = []
    t = lattice.t_knots
    xs = lattice.x_centers
    qs = lattice.q_centers
    for n in range(values.shape[0]):
        for i in range(values.shape[1]):
            for j in range(values.shape[2]):
                rows.append((t[n], xs[i], qs[j], values[n, i, j]))
    write_csv(path, ["t", "x", "q", column], rows)
