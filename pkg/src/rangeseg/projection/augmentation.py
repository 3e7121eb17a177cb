"""
Point-cloud augmentation applied consistently across a residual window.

A rigid motion G (yaw rotation and translation) is applied to the current
scan and left-composed onto every relative pose, so the residual channels
only see the same relative geometry. A mirror flip across the x-z plane is
applied to every scan in its own frame with rel' = F · rel · F. Point drop is
sampled independently per scan.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from rangeseg.util.kitti_io import PointCloud, Pose

log = logging.getLogger(__name__)

_FLIP = np.diag([1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_deg: float = 180.0
    translation_std: Tuple[float, float, float] = (0.2, 0.2, 0.05)
    flip_prob: float = 0.5
    drop_max: float = 0.1

    @classmethod
    def from_config(cls, conf) -> 'AugmentationConfig':
        a = conf.augmentation
        return cls(
            rotation_deg=float(a.rotation_deg),
            translation_std=tuple(float(s) for s in a.translation_std),
            flip_prob=float(a.flip_prob),
            drop_max=float(a.drop_max),
        )


@dataclass(frozen=True)
class Augmentation:
    rotation: float  # radians about z
    translation: Tuple[float, float, float]
    flip: bool
    drop_fraction: float

    @classmethod
    def identity(cls) -> 'Augmentation':
        return cls(0.0, (0.0, 0.0, 0.0), False, 0.0)

    def rigid(self) -> Pose:
        return Pose.from_yaw(self.rotation, self.translation)


def sample_augmentation(rng: np.random.Generator, cfg: AugmentationConfig) -> Augmentation:
    max_rot = math.radians(cfg.rotation_deg)
    return Augmentation(
        rotation=float(rng.uniform(-max_rot, max_rot)),
        translation=tuple(float(t) for t in rng.normal(0.0, cfg.translation_std)),
        flip=bool(rng.random() < cfg.flip_prob),
        drop_fraction=float(rng.uniform(0.0, cfg.drop_max)),
    )


def _flip_cloud(cloud: PointCloud) -> PointCloud:
    points = cloud.points.copy()
    points[:, 1] = -points[:, 1]
    return PointCloud(points, source_index=cloud.source_index, source_count=cloud.source_count)


def _drop_points(cloud: PointCloud, fraction: float, rng: np.random.Generator) -> PointCloud:
    if fraction <= 0.0:
        return cloud
    return cloud.select(rng.random(cloud.count) >= fraction)


def augment_window(
    current: PointCloud,
    prev: Sequence[Tuple[PointCloud, Pose]],
    aug: Augmentation,
    rng: np.random.Generator,
) -> Tuple[PointCloud, List[Tuple[PointCloud, Pose]]]:
    '''
    Apply one augmentation to a scan and its predecessors.

    Returns:
        The augmented current scan and the list of (scan, relative pose)
        pairs, in the same order as ``prev``
    '''
    g = aug.rigid()
    prev = list(prev)

    if aug.flip:
        current = _flip_cloud(current)
        prev = [(_flip_cloud(c), Pose(_FLIP @ rel.matrix @ _FLIP)) for c, rel in prev]

    points = current.points.copy()
    points[:, :3] = g.apply(current.xyz)
    current = PointCloud(points, source_index=current.source_index, source_count=current.source_count)
    prev = [(c, g.compose(rel)) for c, rel in prev]

    current = _drop_points(current, aug.drop_fraction, rng)
    prev = [(_drop_points(c, aug.drop_fraction, rng), rel) for c, rel in prev]
    return current, prev
