#!/usr/bin/env python3
"""
Verification and timing subcommands.
"""

import logging
import time
from collections import defaultdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import click
import numpy as np
import pandas as pd
import torch

from rangeseg.config import PipelineConfig, mapping_path, residual_count
from rangeseg.errors import CheckFailure
from rangeseg.modules.evaluation import (
    ClassMapping,
    ConfusionMatrix,
    accumulate_confusion,
    miou,
    remap_labels,
)
from rangeseg.modules.postproc import KnnConfig, knn_refine
from rangeseg.network.meta_kernel import meta_kernel_forward, meta_kernel_forward_reference, random_instance, run_gradcheck
from rangeseg.projection.dataset import SequenceDataset, load_scan_labels
from rangeseg.projection.range_view import ProjectionConfig, assemble_residual_image, project_labels, spherical_project
from rangeseg.util.kitti_io import label_path

log = logging.getLogger(__name__)

FORWARD_TOLERANCE = 1e-9
FORWARD_SIZE = 6


# ============================================================================
# gradcheck
# ============================================================================

@click.command()
@click.option('--perturb', type=float, default=0.0, hidden=True,
              help='Offset added to the analytic gradient (checks that the check can fail)')
@click.pass_obj
def gradcheck(conf: PipelineConfig, perturb: float):
    """Check the meta-kernel against finite differences and a loop reference.

    Exits with status 3 when any relative error reaches the tolerance.
    """
    g = conf.gradcheck
    report = run_gradcheck(
        seeds=list(g.seeds),
        height=int(g.height),
        width=int(g.width),
        values_channels=int(g.values_channels),
        out_channels=int(g.out_channels),
        hidden=int(conf.network.meta_kernel.hidden),
        eps=float(g.eps),
        tolerance=float(g.tolerance),
        eps_sweep=[float(e) for e in g.eps_sweep],
        perturb=perturb,
    )
    for result in report.results:
        click.echo(f'seed {result.seed}: max relative error {result.max_error:.3e}')
    for eps, error in report.eps_sweep.items():
        click.echo(f'eps {eps:.0e}: max relative error {error:.3e}')

    forward_error = 0.0
    for seed in range(int(g.forward_instances)):
        inp, params = random_instance(seed, FORWARD_SIZE, FORWARD_SIZE, int(g.values_channels),
                                      int(g.out_channels), int(conf.network.meta_kernel.hidden))
        fast = meta_kernel_forward(inp, params, row_chunk=int(conf.network.row_chunk))
        slow = meta_kernel_forward_reference(inp, params)
        forward_error = max(forward_error, float((fast - slow).abs().max()))
    click.echo(f'forward vs reference ({g.forward_instances} instances): max abs difference {forward_error:.3e}')

    if not report.passed:
        raise CheckFailure(f'gradient check failed: {report.max_error:.3e} >= {report.tolerance:.0e}')
    if forward_error > FORWARD_TOLERANCE:
        raise CheckFailure(f'forward check failed: {forward_error:.3e} > {FORWARD_TOLERANCE:.0e}')
    click.echo(f'PASSED (tolerance {report.tolerance:.0e})')


# ============================================================================
# bench
# ============================================================================

def _timed(samples: Dict[str, List[float]], stage: str, fn: Callable):
    start = time.perf_counter()
    out = fn()
    samples[stage].append((time.perf_counter() - start) * 1000.0)
    return out


def _score(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Optional[float]:
    matrix = accumulate_confusion(pred, gt, ConfusionMatrix.empty(num_classes))
    return miou(matrix).mean if matrix.total else None


@click.command()
@click.argument('sequence_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--iterations', '-n', type=click.IntRange(min=1), default=None,
              help='Repetitions per stage (default: bench.iterations)')
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='Write the timing table as TSV')
@click.pass_obj
def bench(conf: PipelineConfig, sequence_dir: Path, iterations: Optional[int], out: Optional[Path]):
    """Single-threaded timing of the per-scan stages on the last scan.

    \b
    Stages:
        projection   spherical projection of the current scan
        residual     compensation, reprojection and residual channels
        knn          back-projection of a 2D label map
        evaluation   confusion accumulation and mIoU

    The mean of the residual stage is compared against bench.budget_ms.
    """
    torch.set_num_threads(1)
    iterations = iterations or int(conf.bench.iterations)
    projection = ProjectionConfig.from_config(conf)
    knn = KnnConfig.from_config(conf)
    mapping = ClassMapping.from_yaml(mapping_path(conf))

    dataset = SequenceDataset(sequence_dir, conf, augment=False)
    position = len(dataset.scan_ids) - 1
    current, prev = dataset.window(position)
    path = label_path(sequence_dir, dataset.scan_ids[position])
    if path.exists():
        gt = remap_labels(load_scan_labels(path, current), mapping)
    else:
        gt = np.zeros(current.count, dtype=np.int64)

    samples: Dict[str, List[float]] = defaultdict(list)
    for _ in range(iterations):
        image, pixel_map = _timed(samples, 'projection', lambda: spherical_project(current, projection))
        _timed(samples, 'residual', lambda: assemble_residual_image(
            current, prev, projection, residual_count=residual_count(conf), cap=conf.residual.cap))
        labels2d = np.maximum(project_labels(gt, pixel_map, projection), 0)
        pred = _timed(samples, 'knn', lambda: knn_refine(current, pixel_map, image, labels2d, knn))
        _timed(samples, 'evaluation', lambda: _score(pred, gt, mapping.num_classes))

    rows = [
        {
            'stage': stage,
            'samples': len(times),
            'mean_ms': float(np.mean(times)),
            'p95_ms': float(np.percentile(times, 95)),
        }
        for stage, times in samples.items()
    ]
    table = pd.DataFrame(rows, columns=['stage', 'samples', 'mean_ms', 'p95_ms'])
    click.echo(f'{dataset.scan_ids[position]}: {current.count} points, {len(prev)} predecessors')
    click.echo(table.to_string(index=False, float_format=lambda v: f'{v:.3f}'))

    # The residual stage covers projection of the current scan as well
    assembly = float(np.mean(samples['residual']))
    budget = float(conf.bench.budget_ms)
    verdict = 'within budget' if assembly < budget else 'OVER BUDGET'
    click.echo(f'projection + residuals: {assembly:.3f} ms mean, budget {budget:.1f} ms, {verdict}')
    if assembly >= budget:
        log.warning(f'projection + residual assembly took {assembly:.3f} ms, budget is {budget:.1f} ms')
    if out is not None:
        table.to_csv(out, sep='\t', index=False)
        log.info(f'wrote {out}')
