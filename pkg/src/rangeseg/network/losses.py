"""
Range-view training losses as plain numerical functions.

    total = w1 * weighted cross-entropy + w2 * Lovasz-softmax + w3 * boundary

All terms are evaluated over valid (non-ignored) pixels only. Probabilities
are n x H x W torch tensors, targets are H x W integer train ids with
``ignore_id`` marking pixels to skip.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from omegaconf import OmegaConf

from rangeseg.errors import ProtocolError, ShapeError, UndefinedLossError
from rangeseg.network.tensor_ops import check_feature_map, max_pool2d

log = logging.getLogger(__name__)

IGNORE_ID = -1
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassFrequencies:
    f: tuple  # per train class, every entry > 0

    def __post_init__(self):
        f = tuple(float(v) for v in self.f)
        if not f or min(f) <= 0:
            raise ValueError('class frequencies must be strictly positive')
        if sum(f) > 1.0 + 1e-6:
            raise ValueError(f'class frequencies sum to {sum(f):.6f} > 1')
        object.__setattr__(self, 'f', f)

    def __len__(self) -> int:
        return len(self.f)

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.f, dtype=torch.float64)

    @classmethod
    def uniform(cls, n: int) -> 'ClassFrequencies':
        return cls(tuple([1.0 / n] * n))

    @classmethod
    def from_counts(cls, counts: Sequence[int], floor: float = 1e-8) -> 'ClassFrequencies':
        '''
        Normalized counts. Classes never observed get ``floor`` so that
        1 / sqrt(f) stays defined.
        '''
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise ValueError('cannot derive frequencies from an empty corpus')
        f = np.maximum(counts / total, floor)
        return cls(tuple(f / max(1.0, f.sum())))

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ClassFrequencies':
        data = OmegaConf.to_container(OmegaConf.load(path))
        return cls(tuple(data['frequencies']))

    def save(self, path: Union[str, Path], counts: Optional[Sequence[int]] = None,
             names: Optional[Sequence[str]] = None) -> None:
        data = {'frequencies': list(self.f)}
        if counts is not None:
            data['counts'] = [int(c) for c in counts]
        if names is not None:
            data['names'] = list(names)
        OmegaConf.save(OmegaConf.create(data), path)


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.5
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError('loss weights must be non-negative')


@dataclass(frozen=True)
class LossBreakdown:
    weighted_cross_entropy: float
    lovasz: float
    boundary: float
    total: float


def _valid_targets(probs: torch.Tensor, targets: torch.Tensor, ignore_id: int):
    check_feature_map(probs, 'probabilities')
    targets = torch.as_tensor(targets)
    if tuple(targets.shape) != tuple(probs.shape[1:]):
        raise ShapeError(f'targets {tuple(targets.shape)} do not match probabilities {tuple(probs.shape[1:])}')
    valid = targets != ignore_id
    t = targets[valid].long()
    n = probs.shape[0]
    if t.numel() and (t.min() < 0 or t.max() >= n):
        raise ProtocolError(f'target ids must lie in [0, {n}) or equal the ignore id {ignore_id}')
    return valid, t


def weighted_cross_entropy(
    probs: torch.Tensor,
    targets: torch.Tensor,
    freqs: ClassFrequencies,
    ignore_id: int = IGNORE_ID,
) -> float:
    '''
    Mean over valid pixels of -log(p_true) / sqrt(f_true), with p floored at
    1e-12.
    '''
    valid, t = _valid_targets(probs, targets, ignore_id)
    if t.numel() == 0:
        raise UndefinedLossError('weighted cross-entropy is undefined without valid pixels')
    if len(freqs) != probs.shape[0]:
        raise ShapeError(f'{len(freqs)} class frequencies for {probs.shape[0]} classes')

    p = probs.double()[:, valid].gather(0, t[None])[0]
    w = 1.0 / torch.sqrt(freqs.tensor()[t])
    return float((w * -torch.log(torch.clamp(p, min=PROB_FLOOR))).mean())


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    '''
    Jaccard deltas for ground truth ordered by decreasing error.

    Works on the last dimension, so a batch of [..., k] orderings is handled at
    once. The Lovasz extension value is <errors_sorted, lovasz_grad(gt_sorted)>.
    '''
    gt = gt_sorted.double()
    if gt.shape[-1] == 0:
        return gt.clone()
    gts = gt.sum(dim=-1, keepdim=True)
    intersection = gts - gt.cumsum(dim=-1)
    union = gts + (1.0 - gt).cumsum(dim=-1)
    jaccard = 1.0 - intersection / union
    jaccard[..., 1:] = jaccard[..., 1:] - jaccard[..., :-1]
    return jaccard


def lovasz_class_term(errors: torch.Tensor, foreground: torch.Tensor) -> float:
    """Lovasz extension of the Jaccard loss for one class."""
    errors_sorted, perm = torch.sort(errors.double(), descending=True, stable=True)
    return float(torch.dot(errors_sorted, lovasz_grad(foreground.double()[perm])))


def lovasz_softmax(probs: torch.Tensor, targets: torch.Tensor, ignore_id: int = IGNORE_ID) -> float:
    '''
    Mean over classes present in the valid ground truth of the Lovasz
    extension of the per-class errors |[y = c] - p_c|.
    '''
    valid, t = _valid_targets(probs, targets, ignore_id)
    if t.numel() == 0:
        raise UndefinedLossError('Lovasz-softmax is undefined without valid pixels')

    p = probs.double()[:, valid]
    terms = []
    for c in range(probs.shape[0]):
        fg = (t == c).double()
        if fg.sum() == 0:
            continue
        terms.append(lovasz_class_term((fg - p[c]).abs(), fg))
    return float(np.mean(terms))


def boundary_map(label_map: torch.Tensor, theta0: int = 3, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    '''
    pool(1 - y) - (1 - y) with a theta0 x theta0 max-pool, stride 1, padding
    theta0 // 2 filled with 0. Pixels outside ``valid`` neither belong to the
    boundary nor create one.
    '''
    y = torch.as_tensor(label_map).double()
    inv = 1.0 - y
    if valid is not None:
        inv = inv * valid.double()
    pooled = max_pool2d(inv[None], window=theta0, stride=1, padding=theta0 // 2, pad_value=0.0)[0]
    out = pooled - inv
    if valid is not None:
        out = out * valid.double()
    return out


def boundary_loss(
    pred_labels: torch.Tensor,
    gt: torch.Tensor,
    theta0: int = 3,
    ignore_id: int = IGNORE_ID,
) -> float:
    '''
    Mean over classes present in the valid ground truth of 1 - BF1, BF1 the
    F1 score between predicted and true boundary maps. A class whose boundary
    is empty on both sides scores 0; empty on exactly one side scores 1.
    '''
    pred_labels = torch.as_tensor(pred_labels)
    gt = torch.as_tensor(gt)
    if pred_labels.shape != gt.shape:
        raise ShapeError(f'prediction {tuple(pred_labels.shape)} and target {tuple(gt.shape)} differ')
    valid = gt != ignore_id

    terms = []
    for c in torch.unique(gt[valid]).tolist():
        pb = boundary_map(pred_labels == c, theta0, valid)
        gb = boundary_map(gt == c, theta0, valid)
        n_pred, n_gt = float(pb.sum()), float(gb.sum())
        if n_pred == 0 and n_gt == 0:
            terms.append(0.0)
            continue
        if n_pred == 0 or n_gt == 0:
            terms.append(1.0)
            continue
        inter = float((pb * gb).sum())
        precision, recall = inter / n_pred, inter / n_gt
        if precision + recall == 0:
            terms.append(1.0)
        else:
            terms.append(1.0 - 2.0 * precision * recall / (precision + recall))
    return float(np.mean(terms)) if terms else 0.0


def total_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    freqs: ClassFrequencies,
    weights: LossWeights = LossWeights(),
    theta0: int = 3,
    ignore_id: int = IGNORE_ID,
) -> LossBreakdown:
    """Weighted sum of the three terms; the boundary term uses argmax predictions."""
    wce = weighted_cross_entropy(probs, targets, freqs, ignore_id)
    ls = lovasz_softmax(probs, targets, ignore_id)
    bd = boundary_loss(torch.argmax(probs, dim=0), targets, theta0, ignore_id)
    total = weights.w1 * wce + weights.w2 * ls + weights.w3 * bd
    return LossBreakdown(wce, ls, bd, total)
