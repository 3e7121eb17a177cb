"""
Label remapping, confusion accumulation and mIoU.

Class mappings ship as YAML files in the packaged config directory
(``semantic-kitti.yaml`` for the 19-class single-scan protocol,
``semantic-kitti-all.yaml`` for the 25-class multi-scan protocol).
Train ids are 0..n-1; the ignore id is -1.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from omegaconf import OmegaConf

from rangeseg.errors import ConfigurationError, MappingError, ProtocolError, ShapeError, UndefinedMetricError
from rangeseg.util.kitti_io import LabelArray

log = logging.getLogger(__name__)

IGNORE_ID = -1
UNMAPPED = -2
RAW_ID_COUNT = 1 << 16


@dataclass(frozen=True)
class ClassMapping:
    name: str
    raw_to_train: np.ndarray  # [65536] int64; IGNORE_ID or UNMAPPED where not a class
    train_to_raw: np.ndarray  # [n] raw id written back for each train id
    class_names: Tuple[str, ...]
    moving_classes: Tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.train_to_raw)
        if len(self.class_names) != n:
            raise ConfigurationError(f'{self.name}: {len(self.class_names)} names for {n} classes')
        roundtrip = self.raw_to_train[self.train_to_raw]
        if not np.array_equal(roundtrip, np.arange(n)):
            bad = np.flatnonzero(roundtrip != np.arange(n)).tolist()
            raise ConfigurationError(f'{self.name}: inverse mapping is inconsistent for train ids {bad}')
        if any(not 0 <= c < n for c in self.moving_classes):
            raise ConfigurationError(f'{self.name}: moving classes must be train ids')

    @property
    def num_classes(self) -> int:
        return len(self.train_to_raw)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> 'ClassMapping':
        '''
        Keys: name, num_classes, labels (raw id -> name), learning_map
        (raw id -> train id, -1 for ignore), learning_map_inv (train id -> raw
        id), optional moving_classes.
        '''
        data = OmegaConf.to_container(OmegaConf.load(path))
        try:
            n = int(data['num_classes'])
            learning_map = {int(k): int(v) for k, v in data['learning_map'].items()}
            inverse = {int(k): int(v) for k, v in data['learning_map_inv'].items()}
            labels = {int(k): str(v) for k, v in data.get('labels', {}).items()}
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f'{path}: malformed class mapping ({e})') from e

        if sorted(inverse) != list(range(n)):
            raise ConfigurationError(f'{path}: learning_map_inv must cover train ids 0..{n - 1}')

        raw_to_train = np.full(RAW_ID_COUNT, UNMAPPED, dtype=np.int64)
        for raw, train in learning_map.items():
            if not (train == IGNORE_ID or 0 <= train < n):
                raise ConfigurationError(f'{path}: raw id {raw} maps to invalid train id {train}')
            raw_to_train[raw] = train

        train_to_raw = np.array([inverse[t] for t in range(n)], dtype=np.int64)
        names = tuple(labels.get(int(r), str(r)) for r in train_to_raw)
        return cls(
            name=str(data.get('name', Path(path).stem)),
            raw_to_train=raw_to_train,
            train_to_raw=train_to_raw,
            class_names=names,
            moving_classes=tuple(int(c) for c in data.get('moving_classes', []) or []),
        )


def remap_labels(raw: Union[LabelArray, np.ndarray], mapping: ClassMapping) -> np.ndarray:
    """Raw SemanticKITTI ids to train ids; raises MappingError on unknown ids."""
    ids = raw.semantic if isinstance(raw, LabelArray) else np.asarray(raw)
    ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= RAW_ID_COUNT):
        bad = ids[(ids < 0) | (ids >= RAW_ID_COUNT)]
        raise MappingError(np.unique(bad))
    train = mapping.raw_to_train[ids]
    unmapped = train == UNMAPPED
    if unmapped.any():
        raise MappingError(np.unique(ids[unmapped]))
    return train


def remap_to_raw(train: np.ndarray, mapping: ClassMapping) -> np.ndarray:
    """Train ids back to raw ids for submission; ignore becomes raw 0 (unlabeled)."""
    train = np.asarray(train, dtype=np.int64)
    bad = (train != IGNORE_ID) & ((train < 0) | (train >= mapping.num_classes))
    if bad.any():
        raise ProtocolError(f'train ids out of range: {sorted(set(train[bad].tolist()))}')
    out = np.zeros(train.shape, dtype=np.uint16)
    keep = train != IGNORE_ID
    out[keep] = mapping.train_to_raw[train[keep]]
    return out


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [n, n] int64, counts[gt][pred]
    missed: Optional[np.ndarray] = None  # [n] int64, labeled points predicted as ignore

    def __post_init__(self):
        if self.missed is None:
            object.__setattr__(self, 'missed', np.zeros(self.counts.shape[0], dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    @classmethod
    def empty(cls, n: int) -> 'ConfusionMatrix':
        return cls(np.zeros((n, n), dtype=np.int64))

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if other.counts.shape != self.counts.shape:
            raise ShapeError('cannot merge confusion matrices of different sizes')
        return ConfusionMatrix(self.counts + other.counts, self.missed + other.missed)


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, m: ConfusionMatrix) -> ConfusionMatrix:
    '''
    Add one scan to the matrix. Points whose ground truth is the ignore id
    are skipped; a prediction of the ignore id counts as a false negative of
    the ground-truth class.
    '''
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError(f'{len(pred)} predictions for {len(gt)} ground-truth labels')

    n = m.num_classes
    keep = gt != IGNORE_ID
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ProtocolError(f'ground-truth train ids must lie in [0, {n})')
    scored = pred != IGNORE_ID
    if pred[scored].size and (pred[scored].min() < 0 or pred[scored].max() >= n):
        raise ProtocolError(f'predicted train ids must lie in [0, {n}) or equal {IGNORE_ID}')

    counts = np.bincount(n * gt[scored] + pred[scored], minlength=n * n).reshape(n, n)
    missed = np.bincount(gt[~scored], minlength=n)
    return ConfusionMatrix(m.counts + counts, m.missed + missed)


@dataclass(frozen=True)
class IouResult:
    iou: np.ndarray  # [n] float64, nan for excluded classes
    included: np.ndarray  # [n] bool
    mean: float


def miou(m: ConfusionMatrix, exclude_absent: bool = True) -> IouResult:
    '''
    IoU_c = TP / (TP + FP + FN). Classes with a zero denominator are left out
    of the mean (``exclude_absent``) or scored 0.
    '''
    counts = m.counts.astype(np.float64)
    if m.total == 0:
        raise UndefinedMetricError('mIoU is undefined for an empty confusion matrix')

    tp = np.diag(counts)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - tp + m.missed
    present = denom > 0
    iou = np.full(m.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]

    if exclude_absent:
        included = present
    else:
        iou[~present] = 0.0
        included = np.ones(m.num_classes, dtype=bool)
    return IouResult(iou, included, float(iou[included].mean()))


def report_table(result: IouResult, class_names: Sequence[str]) -> pd.DataFrame:
    """Per-class IoU rows plus a final ``mean`` row; excluded classes are left blank."""
    rows = [
        {'class': name, 'iou': round(float(v), 4) if inc else np.nan}
        for name, v, inc in zip(class_names, result.iou, result.included)
    ]
    rows.append({'class': 'mean', 'iou': round(result.mean, 4)})
    return pd.DataFrame(rows, columns=['class', 'iou'])


def format_report(result: IouResult, class_names: Sequence[str]) -> str:
    width = max(len(n) for n in list(class_names) + ['mIoU'])
    lines = []
    for name, v, inc in zip(class_names, result.iou, result.included):
        value = f'{v:.4f}' if inc else 'n/a'
        lines.append(f'{name:<{width}}  {value}')
    lines.append(f'{"mIoU":<{width}}  {result.mean:.4f}')
    return '\n'.join(lines)
