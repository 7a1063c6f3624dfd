"""Synthetic rigid-part scene pairs for training and clustering tests.

Each part is a uniformly sampled box; parts are spaced along x with the
configured separation. Every part gets its own rigid motion (rotation about
the part centroid, then translation); the target adds Gaussian noise on top,
while gt_flow records the pre-noise displacement.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .rng import SplitMix64


@dataclass
class SyntheticConfig:
    parts: int = 2
    points_per_part: int = 256
    part_extent: float = 1.0  # box edge length (m)
    translation_range: float = 0.5  # per-axis uniform (m)
    rotation_range: float = 0.2618  # max |angle| (rad), ~15 deg
    separation: float = 0.8  # gap between part boxes (m)
    noise_sigma: float = 0.002  # target jitter (m)
    seed: int = 0

    def validate(self):
        if self.parts < 1 or self.points_per_part < 1:
            raise DataError("parts and points_per_part must be >= 1")
        for field in ("part_extent", "translation_range", "rotation_range",
                      "separation", "noise_sigma"):
            if getattr(self, field) < 0:
                raise DataError(f"{field} must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class ScenePair:
    source: np.ndarray  # (n, 3)
    target: np.ndarray  # (n, 3)
    gt_flow: np.ndarray | None  # (n, 3), moved - source, pre-noise
    part_labels: np.ndarray | None  # (n,) int64


def _rotation_matrix(axis, angle):
    """Rodrigues rotation about a unit axis."""
    kx, ky, kz = axis
    k_cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * k_cross + (1.0 - np.cos(angle)) * (k_cross @ k_cross)


def generate_scene(cfg: SyntheticConfig) -> ScenePair:
    cfg.validate()
    rng = SplitMix64(cfg.seed)
    spacing = cfg.part_extent + cfg.separation
    sources, moved_all, labels = [], [], []
    for part in range(cfg.parts):
        center = np.array([part * spacing, 0.0, 0.0])
        pts = rng.uniform(
            -cfg.part_extent / 2.0, cfg.part_extent / 2.0, size=(cfg.points_per_part, 3)
        ) + center
        axis = rng.unit_vector()
        angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        translation = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)
        if angle == 0.0:
            # skip the centroid round trip so zero motion stays exactly zero
            moved = pts + translation
        else:
            centroid = pts.mean(axis=0)
            moved = (pts - centroid) @ _rotation_matrix(axis, angle).T + centroid + translation
        sources.append(pts)
        moved_all.append(moved)
        labels.append(np.full(cfg.points_per_part, part, dtype=np.int64))
    source = np.concatenate(sources)
    moved = np.concatenate(moved_all)
    noise = rng.normal(cfg.noise_sigma, size=source.shape) if cfg.noise_sigma > 0 else 0.0
    return ScenePair(
        source=source,
        target=moved + noise,
        gt_flow=moved - source,
        part_labels=np.concatenate(labels),
    )
