"""
Sequence dataset: one range residual image per scan of a SemanticKITTI
sequence directory (velodyne/, labels/, poses.txt, calib.txt).

Scans are processed by a torch DataLoader worker pool; every sample carries
its scan index so consumers can write results in scan order.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from rangeseg.config import PipelineConfig, residual_count
from rangeseg.errors import PairingError
from rangeseg.projection.augmentation import AugmentationConfig, augment_window, sample_augmentation
from rangeseg.projection.range_view import (
    PixelIndexMap,
    ProjectionConfig,
    RangeResidualImage,
    assemble_residual_image,
)
from rangeseg.util.kitti_io import (
    LabelArray,
    PointCloud,
    Pose,
    label_path,
    list_scans,
    read_labels,
    read_point_cloud,
    read_poses,
    relative_transform,
    scan_path,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScanSample:
    position: int  # index of the scan in the sequence
    scan_id: str
    cloud: PointCloud
    labels: Optional[LabelArray]  # aligned with cloud.points
    rri: RangeResidualImage
    pixel_map: PixelIndexMap


def load_scan_labels(path: Path, cloud: PointCloud) -> LabelArray:
    """Read a label file and align it with the ingested points of ``cloud``."""
    labels = read_labels(path)
    if labels.count != cloud.source_count:
        raise PairingError(f'{path}: {labels.count} labels for {cloud.source_count} points')
    return labels.select(cloud.source_index)


class SequenceDataset(Dataset):
    '''
    Range residual images of one sequence.

    Args:
        sequence_dir: directory holding velodyne/, poses.txt and calib.txt
        conf: pipeline configuration
        with_labels: attach labels/<scan>.label when present
        augment: apply a random augmentation per sample, seeded by
            (runtime.seed, scan index)
    '''

    def __init__(
        self,
        sequence_dir: Path,
        conf: PipelineConfig,
        with_labels: bool = True,
        augment: Optional[bool] = None,
    ):
        self.sequence_dir = Path(sequence_dir)
        self.scan_ids = list_scans(self.sequence_dir)
        self.projection = ProjectionConfig.from_config(conf)
        self.residual_count = residual_count(conf)
        self.cap = conf.residual.cap
        self.with_labels = with_labels
        self.augment = conf.augmentation.enabled if augment is None else augment
        self.augmentation = AugmentationConfig.from_config(conf)
        self.seed = int(conf.runtime.seed)
        self.positions = list(range(0, len(self.scan_ids), int(conf.data.scan_stride)))

        if self.residual_count > 0:
            self.poses = read_poses(self.sequence_dir / 'poses.txt', self.sequence_dir / 'calib.txt')
            if len(self.poses) != len(self.scan_ids):
                raise PairingError(
                    f'{self.sequence_dir}: {len(self.poses)} poses for {len(self.scan_ids)} scans'
                )
        else:
            self.poses = None

    def __len__(self) -> int:
        return len(self.positions)

    def window(self, position: int) -> Tuple[PointCloud, List[Tuple[PointCloud, Pose]]]:
        """Current scan and its predecessors with relative poses, most recent first."""
        current = read_point_cloud(scan_path(self.sequence_dir, self.scan_ids[position]))
        prev = []
        for lag in range(1, self.residual_count + 1):
            k = position - lag
            if k < 0:
                break
            cloud = read_point_cloud(scan_path(self.sequence_dir, self.scan_ids[k]))
            prev.append((cloud, relative_transform(self.poses[k], self.poses[position])))
        return current, prev

    def __getitem__(self, index: int) -> ScanSample:
        position = self.positions[index]
        scan_id = self.scan_ids[position]
        current, prev = self.window(position)

        if self.augment:
            rng = np.random.default_rng([self.seed, position])
            current, prev = augment_window(current, prev, sample_augmentation(rng, self.augmentation), rng)

        labels = None
        path = label_path(self.sequence_dir, scan_id)
        if self.with_labels and path.exists():
            labels = load_scan_labels(path, current)

        rri, pixel_map = assemble_residual_image(
            current, prev, self.projection, residual_count=self.residual_count, cap=self.cap,
        )
        return ScanSample(position, scan_id, current, labels, rri, pixel_map)


def _passthrough(sample: ScanSample) -> ScanSample:
    return sample


def iterate_samples(dataset: SequenceDataset, workers: int = 0) -> Iterator[ScanSample]:
    """Yield samples in scan order, loaded by ``workers`` processes (0 = in-process)."""
    loader = DataLoader(
        dataset,
        batch_size=None,
        shuffle=False,
        num_workers=workers,
        collate_fn=_passthrough,
        generator=torch.Generator().manual_seed(dataset.seed),
    )
    yield from loader
