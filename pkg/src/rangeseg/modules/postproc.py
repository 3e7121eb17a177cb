"""
Back-projection of 2D range-view labels onto the 3D points.

Every point votes among the valid pixels of a window around its own pixel,
ranked by |range(pixel) - range(point)|; the k closest candidates (within an
optional cutoff) vote with their 2D labels.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rangeseg.errors import ConfigurationError, ConsistencyError, ShapeError
from rangeseg.projection.range_view import PixelIndexMap, RangeImage, point_ranges
from rangeseg.util.kitti_io import PointCloud

log = logging.getLogger(__name__)

POINT_CHUNK = 65536


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    window: int = 7
    cutoff: Optional[float] = None  # meters
    gaussian_sigma: Optional[float] = None  # meters; None gives an unweighted vote

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f'k-NN window must be odd and positive, got {self.window}')
        if not 1 <= self.k <= self.window ** 2:
            raise ConfigurationError(f'k must lie in [1, {self.window ** 2}], got {self.k}')
        if self.cutoff is not None and self.cutoff <= 0:
            raise ConfigurationError('k-NN cutoff must be positive')
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ConfigurationError('k-NN gaussian sigma must be positive')

    @classmethod
    def from_config(cls, conf) -> 'KnnConfig':
        k = conf.knn
        return cls(
            k=int(k.k),
            window=int(k.window),
            cutoff=None if k.cutoff is None else float(k.cutoff),
            gaussian_sigma=None if k.gaussian_sigma is None else float(k.gaussian_sigma),
        )


def majority_label(labels2d: np.ndarray, mask: np.ndarray, default: int = 0) -> int:
    """Most frequent label over valid pixels; ties go to the lowest id."""
    values = labels2d[mask]
    values = values[values >= 0]
    if values.size == 0:
        return default
    return int(np.argmax(np.bincount(values)))


def _vote(
    cand_labels: np.ndarray,
    cand_diff: np.ndarray,
    usable: np.ndarray,
    n_labels: int,
    sigma: Optional[float],
) -> np.ndarray:
    '''
    Per-row winner among candidate labels: highest score, then smallest
    range difference, then lowest label.
    '''
    n = len(cand_labels)
    rows = np.repeat(np.arange(n), cand_labels.shape[1])
    cols = cand_labels.reshape(-1)
    ok = usable.reshape(-1)
    rows, cols = rows[ok], cols[ok]
    diffs = cand_diff.reshape(-1)[ok]

    if sigma is None:
        weights = np.ones_like(diffs)
    else:
        weights = np.exp(-0.5 * (diffs / sigma) ** 2)

    score = np.zeros((n, n_labels), dtype=np.float64)
    np.add.at(score, (rows, cols), weights)
    min_diff = np.full((n, n_labels), np.inf)
    np.minimum.at(min_diff, (rows, cols), diffs)

    best = score.max(axis=1, keepdims=True)
    key = np.where((score == best) & np.isfinite(min_diff), min_diff, np.inf)
    return np.argmin(key, axis=1)


def knn_refine(
    cloud: PointCloud,
    pixel_map: PixelIndexMap,
    range_img: RangeImage,
    labels2d: np.ndarray,
    cfg: KnnConfig = KnnConfig(),
) -> np.ndarray:
    '''
    Per-point labels from a 2D label map.

    Args:
        cloud: the projected scan
        pixel_map: its pixel index map
        range_img: its range image
        labels2d: [H, W] non-negative label ids (network argmax)
        cfg: k, window, cutoff and vote weighting

    Returns:
        [N] int64 labels. Points without a pixel (zero range) get the majority
        label over valid pixels.
    '''
    labels2d = np.asarray(labels2d)
    height, width = range_img.shape
    if labels2d.shape != (height, width):
        raise ShapeError(f'label map {labels2d.shape} does not match range image {(height, width)}')
    if len(pixel_map.point_to_pixel) != cloud.count:
        raise ShapeError(f'pixel map covers {len(pixel_map.point_to_pixel)} points, cloud has {cloud.count}')
    if np.any(labels2d[range_img.mask] < 0):
        raise ShapeError('label map holds negative ids on valid pixels')

    out = np.empty(cloud.count, dtype=np.int64)
    projected = pixel_map.projected
    n_unprojected = int((~projected).sum())
    if n_unprojected:
        fallback = majority_label(labels2d, range_img.mask)
        out[~projected] = fallback
        log.warning(f'{n_unprojected} points without a pixel assigned the majority label {fallback}')

    idx = np.flatnonzero(projected)
    if idx.size == 0:
        return out

    n_labels = int(labels2d[range_img.mask].max()) + 1 if range_img.mask.any() else 1
    half = cfg.window // 2
    dv, du = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing='ij')
    dv, du = dv.reshape(-1), du.reshape(-1)  # row-major window order
    image_range = range_img.range.astype(np.float64)
    ranges = point_ranges(cloud.xyz)

    for start in range(0, idx.size, POINT_CHUNK):
        chunk = idx[start:start + POINT_CHUNK]
        u = pixel_map.point_to_pixel[chunk, 0]
        v = pixel_map.point_to_pixel[chunk, 1]
        if not range_img.mask[v, u].all():
            raise ConsistencyError('a projected point maps to an empty pixel')

        cv = v[:, None] + dv[None]
        cu = u[:, None] + du[None]
        inside = (cv >= 0) & (cv < height) & (cu >= 0) & (cu < width)
        cv_c, cu_c = np.clip(cv, 0, height - 1), np.clip(cu, 0, width - 1)
        valid = inside & range_img.mask[cv_c, cu_c]

        diff = np.where(valid, np.abs(image_range[cv_c, cu_c] - ranges[chunk, None]), np.inf)
        order = np.argsort(diff, axis=1, kind='stable')[:, :cfg.k]
        top_diff = np.take_along_axis(diff, order, axis=1)
        top_labels = np.take_along_axis(labels2d[cv_c, cu_c], order, axis=1)

        usable = np.isfinite(top_diff)
        if cfg.cutoff is not None:
            usable &= top_diff <= cfg.cutoff

        labels = _vote(np.where(usable, top_labels, 0), top_diff, usable, n_labels, cfg.gaussian_sigma)
        none = ~usable.any(axis=1)
        labels[none] = labels2d[v[none], u[none]]
        out[chunk] = labels
    return out


def expand_to_source(labels: np.ndarray, cloud: PointCloud, fill: int) -> np.ndarray:
    """Place per-point labels at their source record index; dropped records get ``fill``."""
    out = np.full(cloud.source_count, fill, dtype=np.int64)
    out[cloud.source_index] = labels
    return out
