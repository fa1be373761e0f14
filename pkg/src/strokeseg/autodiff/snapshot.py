"""Golden-file tensor snapshots: a ``shape: d0,d1,...`` header line followed
by little-endian float64 values in row-major order."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import Tensor


def save_snapshot(t: Tensor | np.ndarray, path) -> None:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = "shape: " + ",".join(str(n) for n in arr.shape) + "\n"
    Path(path).write_bytes(header.encode("ascii") + arr.tobytes())


def load_snapshot(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    line, _, payload = raw.partition(b"\n")
    text = line.decode("ascii")
    if not text.startswith("shape:"):
        raise ValueError(f"{path}: missing shape header")
    dims = text[len("shape:"):].strip()
    shape = tuple(int(d) for d in dims.split(",")) if dims else ()
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
