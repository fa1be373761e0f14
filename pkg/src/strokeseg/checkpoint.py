"""Zip checkpoints: a JSON manifest plus little-endian float32 blobs.

Entries carry a fixed timestamp and are written in sorted order so equal
states produce identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model, ModelSpec, build_model

FORMAT_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: Model
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    scheduler: dict | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _blob(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _unblob(raw: bytes, shape) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.parameters().items():
        arrays[f"param/{name}"] = t.data
    for name, b in model.buffers().items():
        arrays[f"buffer/{name}"] = b
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = {k: v for k, v in ckpt.optimizer.items() if k not in ("m", "v")}
        for slot in ("m", "v"):
            for name, a in ckpt.optimizer[slot].items():
                arrays[f"adam_{slot}/{name}"] = a
    manifest = {
        "format": FORMAT_VERSION,
        "dtype": "float32-le",
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "optimizer": opt_meta,
        "scheduler": ckpt.scheduler,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "shapes": {k: list(v.shape) for k, v in sorted(arrays.items())},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_STAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(arrays):
            put(name + ".f32", _blob(arrays[name]))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        arrays = {k: _unblob(zf.read(k + ".f32"), shape) for k, shape in manifest["shapes"].items()}
    spec = ModelSpec.from_dict(manifest["spec"])
    model = build_model(spec, manifest["seed"]).astype(np.float32)
    params = model.parameters()
    for name, t in params.items():
        t.data = arrays[f"param/{name}"]
    buffers = model.buffers()
    for name, b in buffers.items():
        np.copyto(b, arrays[f"buffer/{name}"])
    optimizer = None
    if manifest["optimizer"] is not None:
        optimizer = dict(manifest["optimizer"])
        for slot in ("m", "v"):
            optimizer[slot] = {name: arrays[f"adam_{slot}/{name}"] for name in params}
    return Checkpoint(model, manifest["step"], manifest["epoch"], manifest["history"], optimizer,
                      manifest["scheduler"], manifest["rng_state"], manifest.get("extra", {}))
