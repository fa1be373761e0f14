"""Seeded synthetic T1-like head volumes with hypo-intense lesions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


class PhantomPlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    extents: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (1.5, 9.0)
    noise: float = 0.05
    contrast: float = 0.6
    brain_fraction: float = 0.42
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.lesion_count
        if not 1 <= lo <= hi:
            raise ValueError("lesion count range must satisfy 1 <= low <= high")
        rlo, rhi = self.lesion_radius_mm
        if not 0 < rlo <= rhi:
            raise ValueError("lesion radius range must satisfy 0 < low <= high")
        semi = [self.brain_fraction * n * s for n, s in zip(self.extents, self.spacing)]
        if rhi >= min(semi):
            raise ValueError(f"largest lesion radius {rhi} mm does not fit inside the brain (semi-axes {semi})")
        if not 0 <= self.contrast <= 1:
            raise ValueError("contrast must lie in [0, 1]")


def _grid(cfg: PhantomConfig):
    return np.meshgrid(*(np.arange(n) * s for n, s in zip(cfg.extents, cfg.spacing)), indexing="ij")


def generate_phantom(cfg: PhantomConfig, subject_id: str | None = None) -> Volume:
    rng = np.random.default_rng(cfg.seed)
    coords = _grid(cfg)
    centre = [(n - 1) * s / 2 for n, s in zip(cfg.extents, cfg.spacing)]
    semi = [cfg.brain_fraction * n * s for n, s in zip(cfg.extents, cfg.spacing)]
    r2 = sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, semi))
    brain = r2 <= 1.0

    # smooth tissue field: a few low-frequency cosines with seeded phases
    field = np.full(cfg.extents, 0.75)
    for _ in range(3):
        k = rng.uniform(0.5, 2.0, 3) * np.pi / np.array(semi)
        phase = rng.uniform(0, 2 * np.pi, 3)
        field += 0.05 * np.cos(sum(kk * c + ph for kk, c, ph in zip(k, coords, phase)))
    # darker rim toward the skull
    field -= 0.15 * r2
    image = np.where(brain, field, 0.0)

    mask = np.zeros(cfg.extents, dtype=bool)
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    placed = 0
    for _ in range(cfg.max_retries):
        if placed == count:
            break
        radii = rng.uniform(*cfg.lesion_radius_mm, 3)
        # centre drawn uniformly in the brain ellipsoid shrunk by the largest radius
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        reach = rng.uniform() ** (1 / 3)
        loc = [m + reach * d * max(a - radii.max(), 0.0) for m, d, a in zip(centre, direction, semi)]
        lesion = sum(((c - l) / r) ** 2 for c, l, r in zip(coords, loc, radii)) <= 1.0
        if lesion.any() and not (lesion & ~brain).any():
            mask |= lesion
            placed += 1
    if placed < count:
        raise PhantomPlacementError(f"placed {placed} of {count} lesions after {cfg.max_retries} attempts")

    image = np.where(mask, image * (1 - cfg.contrast), image)
    image = image + cfg.noise * rng.standard_normal(cfg.extents) * brain
    sid = subject_id if subject_id is not None else f"phantom-{cfg.seed:04d}"
    return Volume(sid, image.astype(np.float32), cfg.spacing, mask.astype(np.uint8))
