#!/usr/bin/env python3
"""
Pipeline subcommands: projection, inference, post-processing, evaluation
and the small data utilities around them.
"""

import logging
from pathlib import Path
from typing import Dict, List

import click
import numpy as np
import pandas as pd
import torch

from rangeseg.config import PathConfig, PipelineConfig, dump_config, mapping_path, worker_count
from rangeseg.errors import ConfigurationError, DataError, NumericError, PairingError
from rangeseg.modules.evaluation import (
    ClassMapping,
    ConfusionMatrix,
    accumulate_confusion,
    format_report,
    miou,
    remap_labels,
    remap_to_raw,
    report_table,
)
from rangeseg.modules.postproc import KnnConfig, expand_to_source, knn_refine, majority_label
from rangeseg.network.losses import IGNORE_ID, ClassFrequencies, LossWeights, total_loss
from rangeseg.network.net_blocks import network_forward
from rangeseg.network.params import NetworkArchitecture, init_network_params
from rangeseg.network.tensor_ops import softmax_channels
from rangeseg.projection.dataset import SequenceDataset, iterate_samples
from rangeseg.projection.range_view import (
    ProjectionConfig,
    project_labels,
    read_rri,
    spherical_project,
    write_rri,
)
from rangeseg.util.checkpoint import read_checkpoint, write_checkpoint
from rangeseg.util.kitti_io import list_scans, read_labels, read_point_cloud, scan_path, write_predictions
from rangeseg.util.synthetic import write_synthetic_sequence

log = logging.getLogger(__name__)

SEQUENCE_DIR = click.Path(exists=True, file_okay=False, path_type=Path)
INPUT_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
CONFIG_DUMP = 'config.yaml'


def class_frequencies(conf: PipelineConfig, num_classes: int) -> ClassFrequencies:
    """Frequencies from ``data.frequencies``, uniform when unset."""
    if conf.data.frequencies is None:
        return ClassFrequencies.uniform(num_classes)
    freqs = ClassFrequencies.load(conf.data.frequencies)
    if len(freqs) != num_classes:
        raise ConfigurationError(
            f'{conf.data.frequencies}: {len(freqs)} frequencies for {num_classes} classes'
        )
    return freqs


def _label_files(gt_dir: Path) -> Dict[str, Path]:
    label_dir = gt_dir / 'labels' if (gt_dir / 'labels').is_dir() else gt_dir
    return {p.stem: p for p in sorted(label_dir.glob('*.label'))}


# ============================================================================
# project
# ============================================================================

@click.command()
@click.argument('sequence_dir', type=SEQUENCE_DIR)
@click.option('--output-dir', '-o', type=click.Path(path_type=Path), required=True,
              help='Directory for the <scan>.rri files')
@click.pass_obj
def project(conf: PipelineConfig, sequence_dir: Path, output_dir: Path):
    """Write the range residual image of every scan of a sequence.

    \b
    Example:
        rangeseg project sequences/08 -o rri/08
    """
    dataset = SequenceDataset(sequence_dir, conf, with_labels=False)
    PathConfig.ensure_output_dir(output_dir)
    for sample in iterate_samples(dataset, worker_count(conf)):
        write_rri(sample.rri, output_dir / f'{sample.scan_id}.rri')
        log.debug(f'{sample.scan_id}: {int(sample.rri.mask.sum())} valid pixels')
    click.echo(f'Wrote {len(dataset)} range residual images to {output_dir}')


# ============================================================================
# infer
# ============================================================================

@click.command()
@click.argument('sequence_dir', type=SEQUENCE_DIR)
@click.option('--checkpoint', '-c', type=INPUT_FILE, required=True, help='Network checkpoint (.mrsk)')
@click.option('--output-dir', '-o', type=click.Path(path_type=Path), required=True,
              help='Directory for the <scan>.label predictions')
@click.option('--save-2d', is_flag=True, help='Also write the 2D argmax maps as <scan>.npy')
@click.pass_obj
def infer(conf: PipelineConfig, sequence_dir: Path, checkpoint: Path, output_dir: Path, save_2d: bool):
    """Segment every scan of a sequence and write per-point labels.

    When ground-truth labels are present, the per-scan training loss is
    written to scores.tsv in the output directory. The effective
    configuration is saved next to the predictions as config.yaml.

    \b
    Example:
        rangeseg infer sequences/08 -c model.mrsk -o predictions/08
    """
    mapping = ClassMapping.from_yaml(mapping_path(conf))
    arch = NetworkArchitecture.from_config(conf, mapping.num_classes)
    params = read_checkpoint(checkpoint, arch.parameter_shapes())
    knn = KnnConfig.from_config(conf)
    freqs = class_frequencies(conf, mapping.num_classes)
    weights = LossWeights(float(conf.loss.w1), float(conf.loss.w2), float(conf.loss.w3))
    means, stds = list(conf.normalization.means), list(conf.normalization.stds)

    dataset = SequenceDataset(sequence_dir, conf, augment=False)
    PathConfig.ensure_output_dir(output_dir)
    dump_config(conf, output_dir / CONFIG_DUMP)

    scores: List[dict] = []
    for sample in iterate_samples(dataset, worker_count(conf)):
        with torch.no_grad():
            logits = network_forward(sample.rri, params, arch, means, stds, int(conf.network.row_chunk))
        if not torch.isfinite(logits).all():
            raise NumericError(f'{sample.scan_id}: non-finite logits')
        probs = softmax_channels(logits.double())
        labels2d = torch.argmax(probs, dim=0).numpy()

        point_labels = knn_refine(sample.cloud, sample.pixel_map, sample.rri.range_image(), labels2d, knn)
        fill = majority_label(labels2d, sample.rri.mask)
        full = expand_to_source(point_labels, sample.cloud, fill)
        write_predictions(remap_to_raw(full, mapping), output_dir / f'{sample.scan_id}.label')
        if save_2d:
            np.save(output_dir / f'{sample.scan_id}.npy', labels2d)

        if sample.labels is not None:
            targets = project_labels(remap_labels(sample.labels, mapping), sample.pixel_map, dataset.projection)
            if (targets != IGNORE_ID).any():
                loss = total_loss(probs, torch.from_numpy(targets), freqs, weights, int(conf.loss.theta0))
                scores.append({
                    'scan': sample.scan_id,
                    'wce': loss.weighted_cross_entropy,
                    'lovasz': loss.lovasz,
                    'boundary': loss.boundary,
                    'total': loss.total,
                })

    if scores:
        pd.DataFrame(scores).to_csv(output_dir / 'scores.tsv', sep='\t', index=False, float_format='%.6f')
    click.echo(f'Wrote {len(dataset)} predictions to {output_dir}')


# ============================================================================
# postprocess
# ============================================================================

@click.command()
@click.argument('sequence_dir', type=SEQUENCE_DIR)
@click.argument('maps_dir', type=SEQUENCE_DIR)
@click.option('--output-dir', '-o', type=click.Path(path_type=Path), required=True,
              help='Directory for the <scan>.label predictions')
@click.pass_obj
def postprocess(conf: PipelineConfig, sequence_dir: Path, maps_dir: Path, output_dir: Path):
    """Back-project 2D label maps (<scan>.npy, train ids) onto the points.

    \b
    Example:
        rangeseg postprocess sequences/08 maps/08 -o predictions/08
    """
    mapping = ClassMapping.from_yaml(mapping_path(conf))
    projection = ProjectionConfig.from_config(conf)
    knn = KnnConfig.from_config(conf)
    PathConfig.ensure_output_dir(output_dir)

    scan_ids = list_scans(sequence_dir)
    for scan_id in scan_ids:
        map_file = maps_dir / f'{scan_id}.npy'
        if not map_file.exists():
            raise PairingError(f'no label map for scan {scan_id} in {maps_dir}')
        cloud = read_point_cloud(scan_path(sequence_dir, scan_id))
        image, pixel_map = spherical_project(cloud, projection)
        labels2d = np.load(map_file).astype(np.int64)

        point_labels = knn_refine(cloud, pixel_map, image, labels2d, knn)
        full = expand_to_source(point_labels, cloud, majority_label(labels2d, image.mask))
        write_predictions(remap_to_raw(full, mapping), output_dir / f'{scan_id}.label')
    click.echo(f'Wrote {len(scan_ids)} predictions to {output_dir}')


# ============================================================================
# eval
# ============================================================================

@click.command()
@click.argument('pred_dir', type=SEQUENCE_DIR)
@click.argument('gt_dir', type=SEQUENCE_DIR)
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='Write the per-class table as TSV')
@click.pass_obj
def eval_cmd(conf: PipelineConfig, pred_dir: Path, gt_dir: Path, out: Path):
    """Per-class IoU and mIoU of predictions against ground truth.

    GT_DIR is either a directory of .label files or a sequence directory
    holding labels/.

    \b
    Example:
        rangeseg eval predictions/08 sequences/08 --out miou.tsv
    """
    mapping = ClassMapping.from_yaml(mapping_path(conf))
    gt_files = _label_files(gt_dir)
    pred_files = {p.stem: p for p in sorted(pred_dir.glob('*.label'))}
    if not gt_files:
        raise DataError(f'no ground-truth label files in {gt_dir}')
    for scan in sorted(set(gt_files) ^ set(pred_files)):
        side = 'prediction' if scan in gt_files else 'ground truth'
        raise PairingError(f'missing {side} for scan {scan}')

    matrix = ConfusionMatrix.empty(mapping.num_classes)
    for scan, gt_file in gt_files.items():
        gt = read_labels(gt_file)
        pred = read_labels(pred_files[scan])
        if pred.count != gt.count:
            raise PairingError(f'scan {scan}: {pred.count} predictions for {gt.count} labels')
        matrix = accumulate_confusion(remap_labels(pred, mapping), remap_labels(gt, mapping), matrix)

    result = miou(matrix, exclude_absent=bool(conf.evaluation.exclude_absent))
    click.echo(format_report(result, mapping.class_names))
    if out is not None:
        report_table(result, mapping.class_names).to_csv(out, sep='\t', index=False)
        log.info(f'wrote {out}')


# ============================================================================
# freqs
# ============================================================================

@click.command()
@click.argument('label_dir', type=SEQUENCE_DIR)
@click.option('--output', '-o', type=click.Path(dir_okay=False, path_type=Path),
              default=Path('frequencies.yaml'), show_default=True)
@click.pass_obj
def freqs(conf: PipelineConfig, label_dir: Path, output: Path):
    """Class frequencies of a label corpus, for the weighted cross-entropy.

    All .label files under LABEL_DIR are counted.
    """
    mapping = ClassMapping.from_yaml(mapping_path(conf))
    files = sorted(label_dir.rglob('*.label'))
    if not files:
        raise DataError(f'no label files under {label_dir}')

    counts = np.zeros(mapping.num_classes, dtype=np.int64)
    for path in files:
        train = remap_labels(read_labels(path), mapping)
        counts += np.bincount(train[train != IGNORE_ID], minlength=mapping.num_classes)
    if counts.sum() == 0:
        raise DataError(f'no labeled points under {label_dir}')

    frequencies = ClassFrequencies.from_counts(counts)
    frequencies.save(output, counts, mapping.class_names)
    table = pd.DataFrame({'class': mapping.class_names, 'count': counts, 'frequency': frequencies.f})
    click.echo(table.to_string(index=False))
    click.echo(f'Wrote {output}')


# ============================================================================
# inspect
# ============================================================================

@click.command()
@click.argument('rri_file', type=INPUT_FILE)
def inspect(rri_file: Path):
    """Per-channel statistics of a range residual image."""
    rri = read_rri(rri_file)
    names = ['range', 'x', 'y', 'z', 'remission']
    names += [f'residual{i + 1}' for i in range(rri.residual_count)] + ['mask']
    mask = rri.mask

    rows = []
    for name, channel in zip(names, rri.channels):
        valid = channel[mask] if name != 'mask' else channel.reshape(-1)
        rows.append({
            'channel': name,
            'min': float(valid.min()) if valid.size else np.nan,
            'max': float(valid.max()) if valid.size else np.nan,
            'mean': float(valid.mean()) if valid.size else np.nan,
            'std': float(valid.std()) if valid.size else np.nan,
        })
    height, width = rri.shape
    click.echo(f'{rri_file.name}: {height} x {width}, {len(names)} channels, '
               f'{int(mask.sum())} valid pixels')
    click.echo(pd.DataFrame(rows).to_string(index=False, float_format=lambda v: f'{v:.4f}'))


# ============================================================================
# synth / init-checkpoint
# ============================================================================

@click.command()
@click.argument('output_dir', type=click.Path(file_okay=False, path_type=Path))
@click.option('--scans', type=click.IntRange(min=1), default=4, show_default=True)
@click.option('--points', type=click.IntRange(min=10), default=200, show_default=True)
@click.pass_obj
def synth(conf: PipelineConfig, output_dir: Path, scans: int, points: int):
    """Write a small synthetic sequence in the SemanticKITTI layout."""
    sequence = write_synthetic_sequence(output_dir, scans, points, seed=int(conf.runtime.seed))
    click.echo(f'Wrote {len(sequence.scan_ids)} scans to {sequence.path}')


@click.command()
@click.argument('output', type=click.Path(dir_okay=False, path_type=Path))
@click.pass_obj
def init_checkpoint(conf: PipelineConfig, output: Path):
    """Write a freshly initialized checkpoint for the configured architecture."""
    mapping = ClassMapping.from_yaml(mapping_path(conf))
    arch = NetworkArchitecture.from_config(conf, mapping.num_classes)
    params = init_network_params(arch, int(conf.runtime.seed))
    shapes = arch.parameter_shapes()
    write_checkpoint(params, output, shapes)
    n_params = sum(int(np.prod(s)) for s in shapes.values())
    click.echo(f'Wrote {output}: {len(shapes)} sections, {n_params} parameters, '
               f'{arch.in_channels} input channels, {arch.num_classes} classes')
