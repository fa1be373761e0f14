"""Subject splits, on-disk dataset layout and model-ready arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import CROP_BOX, LESION_THRESHOLD, SLICE_SIZE, crop_resize_2d, resample_3d, slice_axial, zscore_normalize
from .volume import Volume, read_volume, write_volume

SPLITS = ("train", "validation", "test")
RATIOS = (0.6, 0.2, 0.2)
MANIFEST = "manifest.json"
PURPOSE = {"train": "train", "validation": "val", "test": "test"}


class SplitError(ValueError):
    pass


@dataclass
class SplitManifest:
    seed: int
    train: list[str]
    validation: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = RATIOS

    def __post_init__(self):
        groups = [set(self.train), set(self.validation), set(self.test)]
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise SplitError("split lists overlap")

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise SplitError(f"unknown split {split!r}; choose from {', '.join(SPLITS)}")
        return list(getattr(self, split))

    def all_ids(self) -> list[str]:
        return self.train + self.validation + self.test

    def to_json(self) -> str:
        d = {"seed": self.seed, "ratios": list(self.ratios),
             "train": self.train, "validation": self.validation, "test": self.test}
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(int(d["seed"]), list(d["train"]), list(d["validation"]), list(d["test"]),
                   tuple(d.get("ratios", RATIOS)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text())


def split_sizes(n: int, ratios=RATIOS) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to earlier splits."""
    quotas = [n * r / sum(ratios) for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_subjects(ids, seed: int, ratios=RATIOS) -> SplitManifest:
    ids = sorted(str(i) for i in ids)
    if len(set(ids)) != len(ids):
        raise SplitError("subject ids must be unique")
    if len(ids) < 5:
        raise SplitError(f"need at least 5 subjects to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b, _ = split_sizes(len(ids), ratios)
    return SplitManifest(seed, shuffled[:a], shuffled[a:a + b], shuffled[a + b:], tuple(ratios))


def write_subject(root, v: Volume) -> None:
    d = Path(root) / v.subject_id
    d.mkdir(parents=True, exist_ok=True)
    write_volume(v, d / "t1.vol")
    write_volume(v, d / "mask.vol", field="mask")


def read_subject(root, subject_id: str) -> Volume:
    d = Path(root) / subject_id
    t1 = read_volume(d / "t1.vol")
    mask = read_volume(d / "mask.vol")
    return Volume(subject_id, t1.intensities, t1.spacing, mask.intensities)


def load_manifest(root) -> SplitManifest:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    return SplitManifest.load(path)


@dataclass
class Protocol2D:
    """How axial slices are turned into network inputs.

    The default crops ``box`` and resizes to ``size``; ``box=None`` with a
    ``size`` matching the slice extents feeds slices through unchanged.
    """

    box: tuple[int, int, int, int] | None = CROP_BOX
    size: int = SLICE_SIZE
    threshold: float = LESION_THRESHOLD


@dataclass
class ArrayDataset:
    """Images ``N x 1 x *S`` with binary masks of the same shape."""

    ids: list[str]
    images: np.ndarray
    masks: np.ndarray
    spacing: list[tuple[float, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "ArrayDataset":
        index = list(index)
        sp = [self.spacing[i] for i in index] if self.spacing else []
        return ArrayDataset([self.ids[i] for i in index], self.images[index], self.masks[index], sp)


def slices_dataset(volumes: list[Volume], purpose: str, protocol: Protocol2D = Protocol2D()) -> ArrayDataset:
    ids, images, masks, spacing = [], [], [], []
    for v in volumes:
        v = zscore_normalize(v)
        for s in slice_axial(v, purpose, protocol.threshold):
            ids.append(f"{s.subject_id}:z{s.slice_index:03d}")
            images.append(crop_resize_2d(s.image, "image", protocol.box, protocol.size))
            masks.append(crop_resize_2d(s.mask, "mask", protocol.box, protocol.size))
            spacing.append(v.spacing[:2])
    if not ids:
        shape = (0, 1, protocol.size, protocol.size)
        return ArrayDataset([], np.zeros(shape), np.zeros(shape, np.uint8), [])
    return ArrayDataset(ids, np.stack(images)[:, None], np.stack(masks)[:, None].astype(np.uint8), spacing)


def volumes_dataset(volumes: list[Volume], extents) -> ArrayDataset:
    vs = [resample_3d(zscore_normalize(v), extents) for v in volumes]
    return ArrayDataset([v.subject_id for v in vs],
                        np.stack([v.intensities for v in vs])[:, None],
                        np.stack([v.mask for v in vs])[:, None].astype(np.uint8),
                        [v.spacing for v in vs])


def load_split(root, split: str, ndim: int, protocol: Protocol2D | None = None,
               extents=None, manifest: SplitManifest | None = None) -> ArrayDataset:
    manifest = manifest or load_manifest(root)
    vols = [read_subject(root, sid) for sid in manifest.ids(split)]
    if ndim == 2:
        return slices_dataset(vols, PURPOSE[split], protocol or Protocol2D())
    if extents is None:
        extents = vols[0].extents
    return volumes_dataset(vols, extents)
