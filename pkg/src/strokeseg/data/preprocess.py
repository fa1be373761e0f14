"""Intensity normalisation, slicing and resampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..autodiff import linear_interp_matrix, nearest_index
from .volume import Volume

CROP_BOX = (10, 40, 190, 220)  # row0, col0, row1, col1
SLICE_SIZE = 192
LESION_THRESHOLD = 0.001


@dataclass
class SliceSample:
    subject_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray

    @property
    def lesion_fraction(self) -> float:
        return np.count_nonzero(self.mask) / self.mask.size


def zscore_normalize(v: Volume) -> Volume:
    """Standardise intensities with the mean and population std over all voxels."""
    x = v.intensities.astype(np.float64)
    mu = x.mean()
    sigma = x.std()
    if sigma == 0:
        warnings.warn(f"volume {v.subject_id} has constant intensity; normalised to zeros", RuntimeWarning)
        out = np.zeros_like(x)
    else:
        out = (x - mu) / sigma
    return Volume(v.subject_id, out, v.spacing, v.mask)


def _resize_linear(a: np.ndarray, shape) -> np.ndarray:
    out = a.astype(np.float64)
    for axis, n in enumerate(shape):
        if out.shape[axis] != n:
            m = linear_interp_matrix(out.shape[axis], n)
            out = np.moveaxis(np.moveaxis(out, axis, -1) @ m.T, -1, axis)
    return out


def _resize_nearest(a: np.ndarray, shape) -> np.ndarray:
    index = np.ix_(*(nearest_index(a.shape[k], n) for k, n in enumerate(shape)))
    return a[index]


def crop_resize_2d(image: np.ndarray, kind: str = "image", box=CROP_BOX, size: int = SLICE_SIZE) -> np.ndarray:
    """Crop ``box`` (rows r0:r1, cols c0:c1) then resize to ``size`` x ``size``.

    Images use bilinear interpolation, masks nearest neighbour. Inputs smaller
    than the box are zero-padded at the far edges first. ``box=None`` skips
    the crop.
    """
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    a = np.asarray(image)
    if box is not None:
        r0, c0, r1, c1 = box
        short = [(0, max(0, r1 - a.shape[0])), (0, max(0, c1 - a.shape[1]))]
        if any(w for _, w in short):
            a = np.pad(a, short)
        a = a[r0:r1, c0:c1]
    if kind == "mask":
        return _resize_nearest(a, (size, size))
    return _resize_linear(a, (size, size))


def slice_axial(v: Volume, purpose: str, threshold: float = LESION_THRESHOLD) -> list[SliceSample]:
    """Axial (last-axis) slices that carry enough lesion for ``purpose``.

    Train and validation keep slices whose lesion fraction is at least
    ``threshold``; test keeps every slice with any lesion.
    """
    if v.mask is None:
        raise ValueError(f"volume {v.subject_id} has no mask")
    if purpose not in ("train", "val", "test"):
        raise ValueError(f"purpose must be train, val or test, got {purpose!r}")
    out = []
    for z in range(v.extents[2]):
        s = SliceSample(v.subject_id, z, v.intensities[:, :, z], v.mask[:, :, z])
        f = s.lesion_fraction
        if (f > 0) if purpose == "test" else (f >= threshold):
            out.append(s)
    return out


def resample_3d(v: Volume, extents) -> Volume:
    extents = tuple(int(n) for n in extents)
    if len(extents) != 3 or min(extents) <= 0:
        raise ValueError(f"target extents must be three positive integers, got {extents}")
    if extents == v.extents:
        return v
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.extents, extents))
    mask = None if v.mask is None else _resize_nearest(v.mask, extents)
    return Volume(v.subject_id, _resize_linear(v.intensities, extents), spacing, mask)
