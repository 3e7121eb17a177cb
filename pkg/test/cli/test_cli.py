#!/usr/bin/env python3

"""
Test suite for the rangeseg command line, run in-process through click's
test runner.
"""

import numpy as np
import pytest
from omegaconf import OmegaConf

from rangeseg.cli.main import EXIT_CHECK, EXIT_DATA, EXIT_USAGE, cli
from rangeseg.config import dump_config, load_config
from rangeseg.network.losses import ClassFrequencies
from rangeseg.projection.range_view import ProjectionConfig, assemble_residual_image, read_rri, write_rri
from rangeseg.util.kitti_io import read_labels, read_point_cloud, scan_path, write_predictions


def invoke(runner, small, *args):
    return runner.invoke(cli, [*small, *[str(a) for a in args]])


def miou_line(output):
    return next(line.split() for line in output.splitlines() if line.startswith('mIoU'))


def label_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.glob('*.label'))}


class TestGlobalOptions:

    def test_help(self, runner):
        result = runner.invoke(cli, ['--help'])
        assert result.exit_code == 0
        for name in ('project', 'infer', 'postprocess', 'eval', 'gradcheck', 'bench'):
            assert name in result.output

    def test_invalid_override(self, runner, work_dir):
        result = runner.invoke(cli, ['--set', 'projection.height=0', 'synth', str(work_dir / 'seq')])
        assert result.exit_code == EXIT_USAGE
        assert 'projection size' in result.output

    def test_even_knn_window(self, runner, work_dir):
        result = runner.invoke(cli, ['--set', 'knn.window=4', 'synth', str(work_dir / 'seq')])
        assert result.exit_code == EXIT_USAGE

    def test_unknown_key(self, runner, work_dir):
        result = runner.invoke(cli, ['--set', 'projection.heigth=16', 'synth', str(work_dir / 'seq')])
        assert result.exit_code == EXIT_USAGE

    def test_config_round_trip(self, work_dir):
        conf = load_config(overrides=['knn.k=3', 'residual.cap=2.5', 'evaluation.protocol=single-scan'])
        dump_config(conf, work_dir / 'conf.yaml')
        again = load_config(work_dir / 'conf.yaml')
        assert OmegaConf.to_container(again) == OmegaConf.to_container(conf)

    def test_infer_config_reloads(self, runner, small, sequence, work_dir):
        invoke(runner, small, 'init-checkpoint', work_dir / 'net.mrsk')
        invoke(runner, small, 'infer', sequence, '-c', work_dir / 'net.mrsk', '-o', work_dir / 'pred')
        conf = load_config(work_dir / 'pred' / 'config.yaml')
        assert conf.projection.width == 64
        assert list(conf.network.backbone.encoder_channels) == [4, 4, 8, 8]

    def test_missing_input_directory(self, runner, small, work_dir):
        result = invoke(runner, small, 'project', work_dir / 'absent', '-o', work_dir / 'out')
        assert result.exit_code == EXIT_USAGE

    def test_nested_output_directory_is_created(self, runner, small, sequence, work_dir):
        result = invoke(runner, small, 'project', sequence, '-o', work_dir / 'a' / 'b' / 'rri')
        assert result.exit_code == 0, result.output
        assert (work_dir / 'a' / 'b' / 'rri' / '000000.rri').exists()


class TestProject:

    def test_synth_default_scan_size(self, runner, small, work_dir):
        result = invoke(runner, small, 'synth', work_dir / 'seq')
        assert result.exit_code == 0, result.output
        assert read_point_cloud(scan_path(work_dir / 'seq', '000000')).count == 200
        assert sorted(p.name for p in (work_dir / 'seq' / 'velodyne').glob('*.bin'))[-1] == '000003.bin'

    def test_single_scan_has_zero_residuals(self, runner, small, work_dir):
        seq = work_dir / 'seq'
        assert invoke(runner, small, 'synth', seq, '--scans', '1', '--points', '300').exit_code == 0
        result = invoke(runner, small, 'project', seq, '-o', work_dir / 'rri')
        assert result.exit_code == 0, result.output

        rri = read_rri(work_dir / 'rri' / '000000.rri')
        assert rri.channels.shape == (9, 16, 64)
        assert not rri.residuals.any()
        assert rri.mask.any()

    def test_matches_library(self, runner, small, work_dir):
        seq = work_dir / 'seq'
        invoke(runner, small, 'synth', seq, '--scans', '1', '--points', '300')
        invoke(runner, small, 'project', seq, '-o', work_dir / 'rri')

        conf = load_config(overrides=['projection.height=16', 'projection.width=64'])
        cloud = read_point_cloud(scan_path(seq, '000000'))
        rri, _ = assemble_residual_image(cloud, [], ProjectionConfig.from_config(conf))
        write_rri(rri, work_dir / 'expected.rri')
        assert (work_dir / 'rri' / '000000.rri').read_bytes() == (work_dir / 'expected.rri').read_bytes()

    def test_inspect(self, runner, small, sequence, work_dir):
        invoke(runner, small, 'project', sequence, '-o', work_dir / 'rri')
        result = invoke(runner, small, 'inspect', work_dir / 'rri' / '000003.rri')
        assert result.exit_code == 0, result.output
        assert '16 x 64, 9 channels' in result.output
        assert 'residual3' in result.output


class TestInference:

    def test_deterministic_predictions(self, runner, small, sequence, work_dir):
        assert invoke(runner, small, 'init-checkpoint', work_dir / 'net.mrsk').exit_code == 0
        for name in ('a', 'b'):
            result = invoke(runner, small, 'infer', sequence, '-c', work_dir / 'net.mrsk', '-o', work_dir / name)
            assert result.exit_code == 0, result.output

        first, second = label_bytes(work_dir / 'a'), label_bytes(work_dir / 'b')
        assert sorted(first) == ['000000.label', '000001.label', '000002.label', '000003.label']
        assert first == second
        assert (work_dir / 'a' / 'scores.tsv').exists()

    def test_one_label_per_source_record(self, runner, small, sequence, work_dir):
        invoke(runner, small, 'init-checkpoint', work_dir / 'net.mrsk')
        invoke(runner, small, 'infer', sequence, '-c', work_dir / 'net.mrsk', '-o', work_dir / 'pred')
        for scan_id in ('000000', '000003'):
            pred = read_labels(work_dir / 'pred' / f'{scan_id}.label')
            assert pred.count == read_point_cloud(scan_path(sequence, scan_id)).source_count
            assert not pred.instance.any()

    def test_postprocess_matches_infer(self, runner, small, sequence, work_dir):
        invoke(runner, small, 'init-checkpoint', work_dir / 'net.mrsk')
        invoke(runner, small, 'infer', sequence, '-c', work_dir / 'net.mrsk', '-o', work_dir / 'pred', '--save-2d')
        result = invoke(runner, small, 'postprocess', sequence, work_dir / 'pred', '-o', work_dir / 'post')
        assert result.exit_code == 0, result.output
        assert label_bytes(work_dir / 'post') == label_bytes(work_dir / 'pred')

    def test_postprocess_missing_map(self, runner, small, sequence, work_dir):
        (work_dir / 'maps').mkdir()
        result = invoke(runner, small, 'postprocess', sequence, work_dir / 'maps', '-o', work_dir / 'post')
        assert result.exit_code == EXIT_DATA
        assert '000000' in result.output

    def test_checkpoint_for_other_architecture(self, runner, small, sequence, work_dir):
        invoke(runner, small, 'init-checkpoint', work_dir / 'net.mrsk')
        result = invoke(runner, small, '--single-scan', 'infer', sequence,
                        '-c', work_dir / 'net.mrsk', '-o', work_dir / 'pred')
        assert result.exit_code == EXIT_DATA


class TestEvaluation:

    def test_perfect_predictions(self, runner, small, sequence, work_dir):
        result = invoke(runner, small, 'eval', sequence / 'labels', sequence, '--out', work_dir / 'miou.tsv')
        assert result.exit_code == 0, result.output
        assert miou_line(result.output) == ['mIoU', '1.0000']
        assert (work_dir / 'miou.tsv').read_text().splitlines()[0] == 'class\tiou'

    def test_all_wrong(self, runner, small, sequence, work_dir):
        (work_dir / 'pred').mkdir()
        for gt in sorted((sequence / 'labels').glob('*.label')):
            write_predictions(np.full(read_labels(gt).count, 70, dtype=np.uint16), work_dir / 'pred' / gt.name)
        result = invoke(runner, small, 'eval', work_dir / 'pred', sequence)
        assert result.exit_code == 0, result.output
        assert miou_line(result.output) == ['mIoU', '0.0000']

    def test_missing_prediction(self, runner, small, sequence, work_dir):
        (work_dir / 'pred').mkdir()
        for gt in sorted((sequence / 'labels').glob('*.label'))[:-1]:
            (work_dir / 'pred' / gt.name).write_bytes(gt.read_bytes())
        result = invoke(runner, small, 'eval', work_dir / 'pred', sequence)
        assert result.exit_code == EXIT_DATA
        assert 'missing prediction for scan 000003' in result.output

    def test_length_mismatch(self, runner, small, sequence, work_dir):
        (work_dir / 'pred').mkdir()
        for gt in sorted((sequence / 'labels').glob('*.label')):
            (work_dir / 'pred' / gt.name).write_bytes(gt.read_bytes()[:-4])
        result = invoke(runner, small, 'eval', work_dir / 'pred', sequence)
        assert result.exit_code == EXIT_DATA

    def test_no_ground_truth(self, runner, small, sequence, work_dir):
        (work_dir / 'empty').mkdir()
        result = invoke(runner, small, 'eval', sequence / 'labels', work_dir / 'empty')
        assert result.exit_code == EXIT_DATA

    def test_frequencies(self, runner, small, sequence, work_dir):
        result = invoke(runner, small, 'freqs', sequence, '-o', work_dir / 'frequencies.yaml')
        assert result.exit_code == 0, result.output
        freqs = ClassFrequencies.load(work_dir / 'frequencies.yaml')
        assert len(freqs) == 25
        assert sum(freqs.f) <= 1.0 + 1e-6
        assert freqs.f[8] > 1e-3  # road


    def test_frequency_counting(self, runner, small, work_dir):
        (work_dir / 'labels').mkdir()
        write_predictions(np.array([40, 40, 0, 40, 10], dtype=np.uint16), work_dir / 'labels' / '000000.label')
        result = invoke(runner, small, 'freqs', work_dir / 'labels', '-o', work_dir / 'f.yaml')
        assert result.exit_code == 0, result.output
        freqs = ClassFrequencies.load(work_dir / 'f.yaml')
        assert freqs.f[8] == pytest.approx(0.75)
        assert freqs.f[0] == pytest.approx(0.25)

    def test_frequencies_of_empty_corpus(self, runner, small, work_dir):
        (work_dir / 'labels').mkdir()
        write_predictions(np.zeros(3, dtype=np.uint16), work_dir / 'labels' / '000000.label')
        result = invoke(runner, small, 'freqs', work_dir / 'labels', '-o', work_dir / 'f.yaml')
        assert result.exit_code == EXIT_DATA


class TestChecks:

    def test_gradcheck_passes(self, runner, small):
        result = invoke(runner, small, '--set', 'gradcheck.seeds=[0,1]', 'gradcheck')
        assert result.exit_code == 0, result.output
        assert 'PASSED' in result.output

    def test_gradcheck_detects_wrong_gradient(self, runner, small):
        result = invoke(runner, small, '--set', 'gradcheck.seeds=[0]', 'gradcheck', '--perturb', '0.5')
        assert result.exit_code == EXIT_CHECK

    def test_bench_reports_every_stage(self, runner, small, sequence, work_dir):
        result = invoke(runner, small, 'bench', sequence, '-n', '1', '--out', work_dir / 'bench.tsv')
        assert result.exit_code == 0, result.output
        lines = (work_dir / 'bench.tsv').read_text().splitlines()
        assert lines[0] == 'stage\tsamples\tmean_ms\tp95_ms'
        assert [line.split('\t')[0] for line in lines[1:]] == ['projection', 'residual', 'knn', 'evaluation']
        assert 'budget 50.0 ms' in result.output

    def test_bench_flags_a_missed_budget(self, runner, small, sequence):
        result = invoke(runner, small, '--set', 'bench.budget_ms=0.000001', 'bench', sequence, '-n', '1')
        assert result.exit_code == 0, result.output
        assert 'OVER BUDGET' in result.output
