"""
Deterministic synthetic mini-sequence in the SemanticKITTI layout.

The scene has a ground plane (road and sidewalk), two building walls, a
parked car and a car driving along +x. The sensor moves along x with a slow
yaw drift. Files written:

    <out>/velodyne/000000.bin ...
    <out>/labels/000000.label ...
    <out>/poses.txt    camera-frame poses
    <out>/calib.txt    with a rigid Tr (velodyne to camera)
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from rangeseg.config import PathConfig
from rangeseg.util.kitti_io import (
    LabelArray,
    PointCloud,
    Pose,
    write_calibration,
    write_labels,
    write_point_cloud,
    write_poses,
)

log = logging.getLogger(__name__)

SENSOR_HEIGHT = 1.73
SENSOR_STEP = 0.5  # meters per scan
SENSOR_YAW_STEP = 0.02  # radians per scan
MOVING_CAR_STEP = 1.5  # meters per scan, world frame

ROAD, SIDEWALK, BUILDING, CAR, MOVING_CAR = 40, 48, 50, 10, 252
PARKED_INSTANCE, MOVING_INSTANCE = 1, 2

# Velodyne to camera: x_cam = -y, y_cam = -z, z_cam = x
VELO_TO_CAM = Pose.from_rotation_translation(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
    (0.0, -0.08, -0.27),
)


@dataclass(frozen=True)
class SyntheticSequence:
    path: Path
    poses: List[Pose]  # LiDAR frame
    scan_ids: List[str]


def _box_surface(rng: np.random.Generator, n: int, center, size) -> np.ndarray:
    """Points on the faces of an axis-aligned box."""
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    pts[np.arange(n), axis] = np.sign(pts[np.arange(n), axis] + 1e-12)
    return center + pts * half


def sensor_poses(n_scans: int) -> List[Pose]:
    return [Pose.from_yaw(SENSOR_YAW_STEP * i, (SENSOR_STEP * i, 0.0, 0.0)) for i in range(n_scans)]


def synthetic_scan(rng: np.random.Generator, index: int, pose: Pose, n_points: int = 200) -> Tuple[PointCloud, LabelArray]:
    '''
    Sample one scan in world coordinates and express it in the sensor frame.
    '''
    n_ground = int(0.45 * n_points)
    n_wall = int(0.25 * n_points)
    n_parked = int(0.15 * n_points)
    n_moving = n_points - n_ground - n_wall - n_parked
    sx = pose.translation[0]

    ground = np.column_stack([
        rng.uniform(sx - 15.0, sx + 25.0, n_ground),
        rng.uniform(-8.0, 8.0, n_ground),
        np.full(n_ground, -SENSOR_HEIGHT),
    ])
    ground_sem = np.where(np.abs(ground[:, 1]) < 4.0, ROAD, SIDEWALK)

    wall_side = rng.choice([-9.0, 9.0], n_wall)
    walls = np.column_stack([
        rng.uniform(sx - 15.0, sx + 25.0, n_wall),
        wall_side,
        rng.uniform(-SENSOR_HEIGHT, 2.0, n_wall),
    ])

    parked = _box_surface(rng, n_parked, (8.0, 3.0, -1.0), (4.0, 1.8, 1.4))
    moving = _box_surface(rng, n_moving, (4.0 + MOVING_CAR_STEP * index, -2.0, -1.0), (4.2, 1.8, 1.5))

    world = np.concatenate([ground, walls, parked, moving])
    semantic = np.concatenate([
        ground_sem,
        np.full(n_wall, BUILDING),
        np.full(n_parked, CAR),
        np.full(n_moving, MOVING_CAR),
    ])
    instance = np.concatenate([
        np.zeros(n_ground + n_wall, dtype=np.int64),
        np.full(n_parked, PARKED_INSTANCE),
        np.full(n_moving, MOVING_INSTANCE),
    ])
    remission = np.clip(rng.normal(0.35, 0.15, len(world)), 0.0, 1.0)

    local = pose.inverse().apply(world)
    points = np.column_stack([local, remission]).astype(np.float32)
    return PointCloud(points), LabelArray(semantic, instance)


def write_synthetic_sequence(
    out_dir: Union[str, Path],
    n_scans: int = 4,
    n_points: int = 200,
    seed: int = 0,
) -> SyntheticSequence:
    out_dir = Path(out_dir)
    PathConfig.ensure_output_dir(out_dir / 'velodyne')
    PathConfig.ensure_output_dir(out_dir / 'labels')

    rng = np.random.default_rng(seed)
    poses = sensor_poses(n_scans)
    scan_ids = []
    for i, pose in enumerate(poses):
        scan_id = f'{i:06d}'
        cloud, labels = synthetic_scan(rng, i, pose, n_points)
        write_point_cloud(cloud, out_dir / 'velodyne' / f'{scan_id}.bin')
        write_labels(labels, out_dir / 'labels' / f'{scan_id}.label')
        scan_ids.append(scan_id)

    write_poses(poses, out_dir / 'poses.txt', VELO_TO_CAM)
    write_calibration(VELO_TO_CAM, out_dir / 'calib.txt')
    log.info(f'wrote {n_scans} synthetic scans to {out_dir}')
    return SyntheticSequence(out_dir, poses, scan_ids)
