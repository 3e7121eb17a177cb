"""
Spherical projection and range residual images.

A scan is projected onto an H x W grid; every pixel keeps the nearest point.
Previous scans are moved into the current frame, re-projected, and compared
with the current range image to build the normalized range residual channels.
The assembled image stacks (r, x, y, z, e, d_1 .. d_n, m) per pixel.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from rangeseg.errors import ConfigurationError, MalformedFileError, PairingError, ShapeError
from rangeseg.util.kitti_io import LabelArray, PointCloud, Pose

log = logging.getLogger(__name__)

IGNORE_ID = -1
EMPTY_RANGE = -1.0

RRI_MAGIC = b'RRI1'
RRI_HEADER_BYTES = 16
DEFAULT_CHANNELS = 9

# Channel layout: geometry and remission first, mask last
RANGE, X, Y, Z, REMISSION = range(5)
BASE_CHANNELS = 5


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 2048
    fov_up: float = math.radians(3.0)  # radians
    fov_down: float = math.radians(25.0)  # radians, stored positive
    elevation_offset: str = 'up'

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f'Projection size must be positive, got {self.height}x{self.width}')
        if not self.fov > 0:
            raise ConfigurationError(f'Vertical field of view must be positive, got {self.fov}')
        if self.elevation_offset not in ('up', 'down'):
            raise ConfigurationError(f'Unknown elevation offset {self.elevation_offset!r}')

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @classmethod
    def from_config(cls, conf) -> 'ProjectionConfig':
        p = conf.projection
        return cls(
            height=int(p.height),
            width=int(p.width),
            fov_up=math.radians(p.fov_up_deg),
            fov_down=math.radians(p.fov_down_deg),
            elevation_offset=p.elevation_offset,
        )


@dataclass(frozen=True)
class RangeImage:
    range: np.ndarray  # [H, W] float32, -1 on empty pixels
    xyz: np.ndarray  # [3, H, W] float32
    remission: np.ndarray  # [H, W] float32
    mask: np.ndarray  # [H, W] bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.range.shape

    @classmethod
    def empty(cls, height: int, width: int) -> 'RangeImage':
        return cls(
            range=np.full((height, width), EMPTY_RANGE, dtype=np.float32),
            xyz=np.zeros((3, height, width), dtype=np.float32),
            remission=np.zeros((height, width), dtype=np.float32),
            mask=np.zeros((height, width), dtype=bool),
        )


@dataclass(frozen=True)
class PixelIndexMap:
    point_to_pixel: np.ndarray  # [N, 2] int64 (u, v), -1 for points that were not projected
    pixel_to_point: np.ndarray  # [H, W] int64 index of the winning point, -1 on empty pixels

    @property
    def projected(self) -> np.ndarray:
        return self.point_to_pixel[:, 0] >= 0


@dataclass(frozen=True)
class RangeResidualImage:
    '''
    channels:
        [C, H, W] float32 ordered (r, x, y, z, e, d_1 .. d_n, m) with n = C - 6;
        the default n = 3 gives the 9-channel image
    '''

    channels: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float32)
        if channels.ndim != 3 or channels.shape[0] < BASE_CHANNELS + 1:
            raise ShapeError(f'Range residual image expects [C >= 6, H, W], got {channels.shape}')
        object.__setattr__(self, 'channels', channels)

    @property
    def residual_count(self) -> int:
        return self.channels.shape[0] - BASE_CHANNELS - 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels.shape[1:]

    @property
    def mask(self) -> np.ndarray:
        return self.channels[-1] > 0.5

    @property
    def residuals(self) -> np.ndarray:
        return self.channels[BASE_CHANNELS:-1]

    def range_image(self) -> RangeImage:
        return RangeImage(
            range=self.channels[RANGE],
            xyz=self.channels[X:Z + 1],
            remission=self.channels[REMISSION],
            mask=self.mask,
        )

    def check(self) -> None:
        """Raise ValueError if a documented invariant does not hold."""
        m = self.channels[-1]
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError('mask channel must be 0/1')
        if not np.isfinite(self.channels).all():
            raise ValueError('range residual image has non-finite entries')
        if np.any(self.residuals[:, m == 0] != 0):
            raise ValueError('residual channels must be zero where the mask is 0')


def point_ranges(xyz: np.ndarray) -> np.ndarray:
    """Euclidean range of [N, 3] points, in float64."""
    return np.linalg.norm(np.asarray(xyz, dtype=np.float64), axis=1)


def project_coordinates(
    xyz: np.ndarray,
    cfg: ProjectionConfig,
    ranges: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Pixel coordinates (u, v) of points with non-zero range.

        u = 1/2 (1 - atan2(y, x) / pi) W
        v = (1 - (asin(z / r) + f_offset) / f) H

    followed by floor and clamp to the image. ``ranges`` may pass in the
    already computed point ranges.
    '''
    xyz = np.asarray(xyz, dtype=np.float64)
    r = point_ranges(xyz) if ranges is None else ranges
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    pitch = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))

    offset = cfg.fov_up if cfg.elevation_offset == 'up' else cfg.fov_down
    u = 0.5 * (1.0 - yaw / np.pi) * cfg.width
    v = (1.0 - (pitch + offset) / cfg.fov) * cfg.height

    u = np.clip(np.floor(u), 0, cfg.width - 1).astype(np.int64)
    v = np.clip(np.floor(v), 0, cfg.height - 1).astype(np.int64)
    return u, v


def spherical_project(cloud: PointCloud, cfg: ProjectionConfig) -> Tuple[RangeImage, PixelIndexMap]:
    '''
    Project a scan onto the range image.

    When several points share a pixel the nearest one wins; equal ranges are
    resolved by the lower point index. Points with zero range are skipped.
    '''
    n = cloud.count
    image = RangeImage.empty(cfg.height, cfg.width)
    point_to_pixel = np.full((n, 2), -1, dtype=np.int64)
    pixel_to_point = np.full(cfg.shape, -1, dtype=np.int64)

    r = point_ranges(cloud.xyz)
    idx = np.flatnonzero(r > 0)
    if len(idx) < n:
        log.debug(f'skipped {n - len(idx)} zero-range points')
    if len(idx) == 0:
        return image, PixelIndexMap(point_to_pixel, pixel_to_point)

    u, v = project_coordinates(cloud.xyz[idx], cfg, ranges=r[idx])
    point_to_pixel[idx, 0] = u
    point_to_pixel[idx, 1] = v

    # Per-pixel minimum range, then the lowest point index among the points
    # at that range
    flat = v * cfg.width + u
    ranges = r[idx]
    best = np.full(cfg.height * cfg.width, np.inf)
    np.minimum.at(best, flat, ranges)
    nearest = ranges == best[flat]
    owner = np.full(cfg.height * cfg.width, n, dtype=np.int64)
    np.minimum.at(owner, flat[nearest], idx[nearest])

    occupied = np.flatnonzero(owner < n)
    winners = owner[occupied]
    wv, wu = np.divmod(occupied, cfg.width)

    pixel_to_point[wv, wu] = winners
    image.range[wv, wu] = r[winners]
    image.xyz[:, wv, wu] = cloud.xyz[winners].T
    image.remission[wv, wu] = cloud.remission[winners]
    image.mask[wv, wu] = True

    return image, PixelIndexMap(point_to_pixel, pixel_to_point)


def compensate_scan(cloud: PointCloud, rel: Pose) -> PointCloud:
    """Express a previous scan in the current frame; remission is unchanged."""
    points = cloud.points.copy()
    points[:, :3] = rel.apply(cloud.xyz)
    return PointCloud(points, source_index=cloud.source_index, source_count=cloud.source_count)


def residual_channel(
    current: RangeImage,
    prev_reprojected: RangeImage,
    cap: Optional[float] = None,
) -> np.ndarray:
    '''
    Normalized absolute range difference |r - r'| / r on pixels valid in both
    images, zero elsewhere. ``cap`` optionally clips the result from above.
    '''
    if current.shape != prev_reprojected.shape:
        raise ShapeError(f'Range images differ in size: {current.shape} vs {prev_reprojected.shape}')

    both = current.mask & prev_reprojected.mask
    r = current.range.astype(np.float64)
    r_prev = prev_reprojected.range.astype(np.float64)
    d = np.zeros(current.shape, dtype=np.float64)
    d[both] = np.abs(r[both] - r_prev[both]) / r[both]
    if cap is not None:
        np.minimum(d, cap, out=d)
    return d.astype(np.float32)


def assemble_residual_image(
    current: PointCloud,
    prev: Sequence[Tuple[PointCloud, Pose]],
    cfg: ProjectionConfig,
    residual_count: int = 3,
    cap: Optional[float] = None,
) -> Tuple[RangeResidualImage, PixelIndexMap]:
    '''
    Build the range residual image of ``current``.

    Args:
        current: the scan being labeled
        prev: up to ``residual_count`` (scan, relative pose) pairs, most recent
            first; the relative pose takes the previous scan into the current frame
        cfg: projection geometry
        residual_count: number of residual channels; missing predecessors give
            zero channels
        cap: optional upper bound on residual values

    Returns:
        The (5 + residual_count + 1) x H x W image and the pixel index map of
        the current scan
    '''
    if len(prev) > residual_count:
        raise ShapeError(f'Got {len(prev)} previous scans for {residual_count} residual channels')

    image, pixel_map = spherical_project(current, cfg)

    channels = np.zeros((BASE_CHANNELS + residual_count + 1, cfg.height, cfg.width), dtype=np.float32)
    channels[RANGE] = image.range
    channels[X:Z + 1] = image.xyz
    channels[REMISSION] = image.remission
    for i, (cloud, rel) in enumerate(prev):
        reprojected, _ = spherical_project(compensate_scan(cloud, rel), cfg)
        channels[BASE_CHANNELS + i] = residual_channel(image, reprojected, cap=cap)
    channels[-1] = image.mask

    return RangeResidualImage(channels), pixel_map


def project_labels(
    labels: Union[LabelArray, np.ndarray],
    pixel_map: PixelIndexMap,
    cfg: ProjectionConfig,
    ignore_id: int = IGNORE_ID,
) -> np.ndarray:
    """H x W map of the winning point's label; empty pixels carry ``ignore_id``."""
    ids = labels.semantic if isinstance(labels, LabelArray) else np.asarray(labels)
    if len(ids) != len(pixel_map.point_to_pixel):
        raise PairingError(f'{len(ids)} labels for {len(pixel_map.point_to_pixel)} points')
    if pixel_map.pixel_to_point.shape != cfg.shape:
        raise ShapeError(f'Pixel map is {pixel_map.pixel_to_point.shape}, projection is {cfg.shape}')

    out = np.full(cfg.shape, ignore_id, dtype=np.int64)
    occupied = pixel_map.pixel_to_point >= 0
    out[occupied] = ids[pixel_map.pixel_to_point[occupied]]
    return out


def normalize_channels(rri: RangeResidualImage, means: Sequence[float], stds: Sequence[float]) -> np.ndarray:
    '''
    (value - mean) / std on channels r, x, y, z, e, zeroed on empty pixels.
    Residual and mask channels pass through unchanged.
    '''
    out = rri.channels.copy()
    means = np.asarray(means, dtype=np.float64)[:, None, None]
    stds = np.asarray(stds, dtype=np.float64)[:, None, None]
    m = rri.channels[-1]
    base = (rri.channels[:BASE_CHANNELS].astype(np.float64) - means) / stds
    out[:BASE_CHANNELS] = (base * m).astype(np.float32)
    return out


########################################################
# Debug dump
########################################################

def write_rri(rri: RangeResidualImage, path: Union[str, Path]) -> None:
    '''
    Flat little-endian float32 dump preceded by a 16-byte header:
    magic "RRI1", u32 H, u32 W, u32 channel count. The count is written as 0
    for the standard 9-channel image and only set for other residual counts.
    '''
    c, h, w = rri.channels.shape
    stored = 0 if c == DEFAULT_CHANNELS else c
    header = RRI_MAGIC + np.array([h, w, stored], dtype='<u4').tobytes()
    Path(path).write_bytes(header + rri.channels.astype('<f4').tobytes())


def read_rri(path: Union[str, Path]) -> RangeResidualImage:
    raw = Path(path).read_bytes()
    if len(raw) < RRI_HEADER_BYTES or raw[:4] != RRI_MAGIC:
        raise MalformedFileError(f'{path}: not a range residual image dump')
    h, w, c = (int(x) for x in np.frombuffer(raw[4:RRI_HEADER_BYTES], dtype='<u4'))
    c = c or DEFAULT_CHANNELS
    payload = raw[RRI_HEADER_BYTES:]
    if len(payload) != 4 * c * h * w:
        raise MalformedFileError(f'{path}: expected {4 * c * h * w} payload bytes, got {len(payload)}')
    channels = np.frombuffer(payload, dtype='<f4').reshape(c, h, w).astype(np.float32)
    return RangeResidualImage(channels)
