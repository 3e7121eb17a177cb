"""
SemanticKITTI on-disk formats and rigid pose algebra.

Point clouds are packed little-endian float32 quadruples (x, y, z, remission),
labels are packed little-endian uint32 words (semantic id in the low 16 bits,
instance id in the high 16 bits). Poses are read in the camera frame and
converted to the LiDAR frame with the ``Tr`` calibration at load time.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from rangeseg.errors import CalibrationError, MalformedFileError, ParseError, ShapeError

log = logging.getLogger(__name__)

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4

# Tolerances for rigid transforms
ORTHONORMAL_TOL = 1e-6
REORTHONORMALIZE_TOL = 1e-9

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PointCloud:
    '''
    One LiDAR scan after ingestion.

    points:
        [N, 4] float32 array of (x, y, z, remission)
    source_index:
        [N] record index of each point in the source file; differs from
        arange(N) only when non-finite records were dropped
    source_count:
        number of records in the source file
    '''

    points: np.ndarray
    source_index: Optional[np.ndarray] = None
    source_count: Optional[int] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float32)
        if points.ndim != 2 or points.shape[1] != 4:
            raise ShapeError(f'PointCloud expects an [N, 4] array, got shape {points.shape}')
        object.__setattr__(self, 'points', points)

        if self.source_index is None:
            object.__setattr__(self, 'source_index', np.arange(len(points), dtype=np.int64))
        elif len(self.source_index) != len(points):
            raise ShapeError('source_index length must equal the point count')
        if self.source_count is None:
            object.__setattr__(self, 'source_count', len(points))

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def remission(self) -> np.ndarray:
        return self.points[:, 3]

    def select(self, keep: np.ndarray) -> 'PointCloud':
        """Subset of points by boolean mask or index array, provenance preserved."""
        return replace(self, points=self.points[keep], source_index=self.source_index[keep])

    @classmethod
    def empty(cls) -> 'PointCloud':
        return cls(np.zeros((0, 4), dtype=np.float32))


@dataclass(frozen=True)
class LabelArray:
    semantic: np.ndarray  # [N] uint16 class ids
    instance: np.ndarray = field(default=None)  # [N] uint16 instance ids

    def __post_init__(self):
        semantic = np.asarray(self.semantic)
        if semantic.ndim != 1:
            raise ShapeError(f'LabelArray expects 1D ids, got shape {semantic.shape}')
        if semantic.size and (semantic.min() < 0 or semantic.max() > 0xFFFF):
            raise ValueError('semantic ids must fit in 16 bits')
        object.__setattr__(self, 'semantic', semantic.astype(np.uint16))

        if self.instance is None:
            instance = np.zeros(len(semantic), dtype=np.uint16)
        else:
            instance = np.asarray(self.instance).astype(np.uint16)
        if instance.shape != semantic.shape:
            raise ShapeError('semantic and instance arrays must have the same length')
        object.__setattr__(self, 'instance', instance)

    @property
    def count(self) -> int:
        return len(self.semantic)

    def select(self, keep: np.ndarray) -> 'LabelArray':
        return LabelArray(self.semantic[keep], self.instance[keep])


def _rotation_deviation(matrix: np.ndarray) -> float:
    rot = matrix[:3, :3]
    return float(np.abs(rot.T @ rot - np.eye(3)).max())


@dataclass(frozen=True)
class Pose:
    '''
    Homogeneous rigid transform.

    matrix:
        [4, 4] float64, rotation block orthonormal with positive determinant,
        bottom row [0, 0, 0, 1]
    '''

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError(f'Pose expects a 4x4 matrix, got shape {m.shape}')
        if not np.isfinite(m).all():
            raise ValueError('Pose matrix contains non-finite values')
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f'Pose bottom row must be [0, 0, 0, 1], got {m[3]}')
        deviation = _rotation_deviation(m)
        if deviation >= ORTHONORMAL_TOL:
            raise ValueError(f'Pose rotation block is not orthonormal (max |R^T R - I| = {deviation:.3g})')
        if np.linalg.det(m[:3, :3]) <= 0:
            raise ValueError('Pose rotation block must have positive determinant')
        m.setflags(write=False)
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.eye(4))

    @classmethod
    def from_rotation_translation(cls, rotation: np.ndarray, translation: Sequence[float]) -> 'Pose':
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> 'Pose':
        return cls.from_rotation_translation(np.eye(3), translation)

    @classmethod
    def from_yaw(cls, angle: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> 'Pose':
        """Rotation by ``angle`` radians about the z axis followed by a translation."""
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls.from_rotation_translation(rot, translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> 'Pose':
        rot_t = self.rotation.T
        return Pose.from_rotation_translation(rot_t, -rot_t @ self.translation)

    def compose(self, other: 'Pose') -> 'Pose':
        """Return ``self · other`` (apply ``other`` first)."""
        return Pose(_reorthonormalize(self.matrix @ other.matrix))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Transform [N, 3] points; computed in float64."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def is_close(self, other: 'Pose', atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))


def _reorthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Project the rotation block onto the closest rotation (SVD)."""
    u, _, vt = np.linalg.svd(matrix[:3, :3])
    out = np.array(matrix, dtype=np.float64)
    out[:3, :3] = u @ vt
    out[3] = [0.0, 0.0, 0.0, 1.0]
    return out


def relative_transform(pose_k: Pose, pose_l: Pose) -> Pose:
    """Transform taking points of scan k into the frame of scan l: pose_l⁻¹ · pose_k."""
    return pose_l.inverse().compose(pose_k)


########################################################
# Point clouds and labels
########################################################

def read_point_cloud(path: PathLike) -> PointCloud:
    '''
    Read a velodyne ``.bin`` scan.

    Records with a non-finite field are dropped and remission is clamped to
    [0, 1]; both are reported as counted warnings.
    '''
    raw = Path(path).read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise MalformedFileError(
            f'{path}: length {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes'
        )

    records = np.frombuffer(raw, dtype='<f4').reshape(-1, 4).astype(np.float32)
    source_count = len(records)

    finite = np.isfinite(records).all(axis=1)
    n_dropped = int(source_count - finite.sum())
    if n_dropped:
        log.warning(f'{path}: dropped {n_dropped} points with non-finite fields')
    source_index = np.flatnonzero(finite)
    points = records[finite]

    out_of_range = (points[:, 3] < 0.0) | (points[:, 3] > 1.0)
    n_clamped = int(out_of_range.sum())
    if n_clamped:
        log.warning(f'{path}: clamped {n_clamped} remission values to [0, 1]')
        points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)

    return PointCloud(points, source_index=source_index, source_count=source_count)


def write_point_cloud(cloud: PointCloud, path: PathLike) -> None:
    Path(path).write_bytes(cloud.points.astype('<f4').tobytes())


def read_labels(path: PathLike) -> LabelArray:
    raw = Path(path).read_bytes()
    if len(raw) % LABEL_RECORD_BYTES != 0:
        raise MalformedFileError(
            f'{path}: length {len(raw)} is not a multiple of {LABEL_RECORD_BYTES} bytes'
        )
    words = np.frombuffer(raw, dtype='<u4')
    return LabelArray(semantic=words & 0xFFFF, instance=words >> 16)


def write_labels(labels: LabelArray, path: PathLike) -> None:
    """Write semantic and instance ids in the ``.label`` encoding."""
    words = labels.semantic.astype(np.uint32) | (labels.instance.astype(np.uint32) << 16)
    Path(path).write_bytes(words.astype('<u4').tobytes())


def write_predictions(labels: Union[LabelArray, np.ndarray], path: PathLike) -> None:
    '''
    Write a prediction ``.label`` file: raw semantic ids, instance bits zero.
    '''
    if not isinstance(labels, LabelArray):
        labels = LabelArray(labels)
    Path(path).write_bytes(labels.semantic.astype('<u4').tobytes())


########################################################
# Poses and calibration
########################################################

def _parse_reals(tokens: Sequence[str], where: str) -> np.ndarray:
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise ParseError(f'{where}: {e}') from e
    if len(values) != 12:
        raise ParseError(f'{where}: expected 12 reals, got {len(values)}')
    if not np.isfinite(values).all():
        raise ParseError(f'{where}: non-finite value')
    return values


def _homogeneous(values: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :4] = values.reshape(3, 4)
    return m


def _to_pose(matrix: np.ndarray, where: str) -> Pose:
    try:
        return Pose(matrix)
    except ValueError as e:
        raise CalibrationError(f'{where}: {e}') from e


def read_calibration(calib_path: PathLike) -> Pose:
    """Read the ``Tr`` (velodyne to camera) transform from a calib.txt file."""
    calib_path = Path(calib_path)
    for lineno, line in enumerate(calib_path.read_text().splitlines(), start=1):
        key, sep, rest = line.partition(':')
        if sep and key.strip() == 'Tr':
            values = _parse_reals(rest.split(), f'{calib_path}:{lineno}')
            matrix = _homogeneous(values)
            if _rotation_deviation(matrix) > REORTHONORMALIZE_TOL:
                matrix = _reorthonormalize(matrix)
            return _to_pose(matrix, f'{calib_path}:{lineno}')
    raise CalibrationError(f'{calib_path}: no "Tr:" line')


def read_poses(poses_path: PathLike, calib_path: PathLike) -> List[Pose]:
    '''
    Read camera-frame poses and express them in the LiDAR frame.

    Each line of poses.txt is a row-major 3x4 matrix P_cam; the returned pose
    is Tr⁻¹ · P_cam · Tr. Rotation blocks that drift from orthonormal by more
    than 1e-9 are re-orthonormalized with a counted warning.
    '''
    poses_path = Path(poses_path)
    tr = read_calibration(calib_path)
    tr_inv = tr.inverse()

    poses = []
    n_fixed = 0
    for lineno, line in enumerate(poses_path.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        where = f'{poses_path}:{lineno}'
        matrix = tr_inv.matrix @ _homogeneous(_parse_reals(tokens, where)) @ tr.matrix
        if _rotation_deviation(matrix) > REORTHONORMALIZE_TOL:
            matrix = _reorthonormalize(matrix)
            n_fixed += 1
        poses.append(_to_pose(matrix, where))

    if n_fixed:
        log.warning(f'{poses_path}: re-orthonormalized {n_fixed} of {len(poses)} poses')
    return poses


def write_poses(poses: Sequence[Pose], poses_path: PathLike, tr: Optional[Pose] = None) -> None:
    """Write LiDAR-frame poses back to camera frame: P_cam = Tr · P · Tr⁻¹."""
    tr = tr or Pose.identity()
    lines = []
    for pose in poses:
        cam = tr.matrix @ pose.matrix @ tr.inverse().matrix
        lines.append(' '.join(f'{v:.12e}' for v in cam[:3].reshape(-1)))
    Path(poses_path).write_text('\n'.join(lines) + '\n')


def write_calibration(tr: Pose, calib_path: PathLike) -> None:
    ident = ' '.join(f'{v:.12e}' for v in np.eye(4)[:3].reshape(-1))
    tr_line = ' '.join(f'{v:.12e}' for v in tr.matrix[:3].reshape(-1))
    Path(calib_path).write_text(
        ''.join(f'P{i}: {ident}\n' for i in range(4)) + f'Tr: {tr_line}\n'
    )


########################################################
# Sequence layout
########################################################

def list_scans(sequence_dir: PathLike) -> List[str]:
    """Sorted scan ids (file stems) in ``<sequence_dir>/velodyne``."""
    velodyne = Path(sequence_dir) / 'velodyne'
    if not velodyne.is_dir():
        raise FileNotFoundError(f'{velodyne} does not exist')
    return sorted(p.stem for p in velodyne.glob('*.bin'))


def scan_path(sequence_dir: PathLike, scan_id: str) -> Path:
    return Path(sequence_dir) / 'velodyne' / f'{scan_id}.bin'


def label_path(sequence_dir: PathLike, scan_id: str) -> Path:
    return Path(sequence_dir) / 'labels' / f'{scan_id}.label'
