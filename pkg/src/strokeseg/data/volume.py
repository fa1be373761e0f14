"""Volume container and file formats.

The native format is a short text header terminated by a line holding
``end`` followed by little-endian float32 voxels in C order. A read-only
subset of single-file NIfTI-1 is also understood.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NATIVE_MAGIC = b"VOL1\n"
NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass
class Volume:
    subject_id: str
    intensities: np.ndarray
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.intensities.ndim != 3 or self.intensities.size == 0:
            raise ValueError(f"volume must be a nonempty 3-D grid, got shape {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.intensities.shape:
                raise ValueError(f"mask {self.mask.shape} and intensities {self.intensities.shape} differ")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask is not binary")
            self.mask = self.mask.astype(np.uint8)

    @property
    def extents(self) -> tuple[int, ...]:
        return self.intensities.shape


def encode_native(subject_id: str, data: np.ndarray, spacing) -> bytes:
    header = (
        f"subject_id: {subject_id}\n"
        f"extents: {' '.join(str(n) for n in data.shape)}\n"
        f"spacing: {' '.join(repr(float(s)) for s in spacing)}\n"
        "dtype: float32-le\n"
        "end\n"
    )
    return NATIVE_MAGIC + header.encode("ascii") + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_native(raw: bytes) -> tuple[str, np.ndarray, tuple[float, ...]]:
    if not raw.startswith(NATIVE_MAGIC):
        raise BadMagicError("not a native volume file")
    pos = len(NATIVE_MAGIC)
    fields = {}
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise TruncatedPayloadError("header ends before the 'end' line")
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    if fields.get("dtype") != "float32-le":
        raise UnsupportedDatatypeError(f"unsupported dtype {fields.get('dtype')!r}")
    try:
        extents = tuple(int(t) for t in fields["extents"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
    except (KeyError, ValueError) as e:
        raise VolumeFormatError(f"malformed header: {e}") from None
    need = 4 * int(np.prod(extents))
    payload = raw[pos:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload holds {len(payload)} bytes, header promises {need}")
    data = np.frombuffer(payload[:need], dtype="<f4").reshape(extents).astype(np.float32)
    return fields.get("subject_id", ""), data, spacing


def decode_nifti(raw: bytes) -> tuple[np.ndarray, tuple[float, ...]]:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError("file shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise BadMagicError(f"bad NIfTI magic {raw[344:348]!r}")
    endian = "<" if struct.unpack("<i", raw[:4])[0] == NIFTI_HEADER_SIZE else ">"
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype code {datatype} is not supported")
    ndim = dim[0]
    if not 1 <= ndim <= 3:
        raise VolumeFormatError(f"only 1-3 dimensional NIfTI volumes are supported, got {ndim}")
    extents = tuple(dim[1:ndim + 1]) + (1,) * (3 - ndim)
    dtype = np.dtype(endian + NIFTI_DTYPES[datatype])
    need = dtype.itemsize * int(np.prod(extents))
    payload = raw[max(vox_offset, NIFTI_HEADER_SIZE):]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload holds {len(payload)} bytes, header promises {need}")
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(extents, order="F").astype(np.float64)
    if slope != 0:
        data = data * slope + inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return data, spacing


def read_volume(path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(NATIVE_MAGIC):
        sid, data, spacing = decode_native(raw)
        return Volume(sid or path.parent.name, data, spacing)
    data, spacing = decode_nifti(raw)
    return Volume(path.parent.name, data, spacing)


def write_volume(v: Volume, path, field: str = "intensities") -> None:
    """Write ``v.intensities`` (or ``v.mask`` with ``field="mask"``) natively."""
    data = v.intensities if field == "intensities" else v.mask
    if data is None:
        raise ValueError(f"volume {v.subject_id} has no {field}")
    Path(path).write_bytes(encode_native(v.subject_id, data, v.spacing))
