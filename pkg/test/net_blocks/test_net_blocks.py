#!/usr/bin/env python3

"""
Test suite for the forward-only network blocks, the parameter collections
and the checkpoint format.
"""

from dataclasses import replace

import numpy as np
import pytest
import torch

from rangeseg.errors import CheckpointError, ShapeError
from rangeseg.network.net_blocks import (
    attention_fusion,
    context_module_forward,
    fam_forward,
    micro_backbone_forward,
    network_forward,
)
from rangeseg.network.params import (
    BlockParams,
    NetworkArchitecture,
    init_network_params,
    init_params,
    zero_params,
)
from rangeseg.network.tensor_ops import conv2d_naive, relu, sigmoid
from rangeseg.projection.range_view import ProjectionConfig, RangeResidualImage, assemble_residual_image
from rangeseg.util.checkpoint import read_checkpoint, read_sections, write_checkpoint
from rangeseg.util.kitti_io import PointCloud

TINY = NetworkArchitecture(
    in_channels=9,
    num_classes=5,
    mlp_hidden=4,
    meta_channels=4,
    encoder_channels=(4, 6, 6, 8),
    decoder_channels=(6, 6, 4, 4),
    context_channels=3,
)


def random_rri(seed=0, height=16, width=32):
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(400, 3)) * 10
    points = np.column_stack([xyz, rng.uniform(0, 1, 400)]).astype(np.float32)
    cloud = PointCloud(points)
    rri, _ = assemble_residual_image(cloud, [], ProjectionConfig(height=height, width=width))
    return rri


def seeded(shape, seed, dtype=torch.float64):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def fusion_params(c_ms, c_ctx, gate_bias):
    return {
        'gate.weight': torch.zeros(c_ms, c_ctx, 1, 1, dtype=torch.float64),
        'gate.bias': torch.full((c_ms,), gate_bias, dtype=torch.float64),
        'proj.weight': seeded((c_ms, c_ctx, 1, 1), 1),
        'proj.bias': seeded((c_ms,), 2),
    }


class TestContextModule:

    def test_zero_input_zero_bias(self):
        params = {
            'conv0.weight': seeded((3, 1, 3, 3), 0),
            'conv0.bias': torch.zeros(3, dtype=torch.float64),
            'conv1.weight': seeded((3, 3, 3, 3), 1),
            'conv1.bias': torch.zeros(3, dtype=torch.float64),
        }
        out = context_module_forward(torch.zeros(1, 6, 6, dtype=torch.float64), params)
        assert out.shape == (3, 6, 6)
        assert not out.any()

    def test_unit_passthrough(self):
        params = {
            'conv0.weight': torch.ones(1, 1, 1, 1),
            'conv0.bias': torch.zeros(1),
            'conv1.weight': torch.ones(1, 1, 1, 1),
            'conv1.bias': torch.zeros(1),
        }
        x = torch.rand(1, 5, 5, generator=torch.Generator().manual_seed(3))
        torch.testing.assert_close(context_module_forward(x, params), x)

    def test_matches_naive_convolutions(self):
        params = {
            'conv0.weight': seeded((3, 1, 3, 3), 0),
            'conv0.bias': seeded((3,), 1),
            'conv1.weight': seeded((2, 3, 3, 3), 2),
            'conv1.bias': seeded((2,), 3),
        }
        x = seeded((1, 6, 7), 4)
        hidden = relu(conv2d_naive(x, params['conv0.weight'], params['conv0.bias'], padding=1))
        expected = conv2d_naive(hidden, params['conv1.weight'], params['conv1.bias'], padding=2, dilation=2)
        torch.testing.assert_close(context_module_forward(x, params), expected)

    def test_needs_one_channel(self):
        with pytest.raises(ShapeError):
            context_module_forward(torch.zeros(2, 4, 4), {})


class TestAttentionFusion:

    def test_open_gate(self):
        ms, ctx = seeded((4, 3, 3), 5), seeded((2, 3, 3), 6)
        params = fusion_params(4, 2, 50.0)
        proj = conv2d_naive(ctx, params['proj.weight'], params['proj.bias'])
        torch.testing.assert_close(attention_fusion(ms, ctx, params), ms + proj)

    def test_closed_gate(self):
        ms, ctx = seeded((4, 3, 3), 5), seeded((2, 3, 3), 6)
        params = fusion_params(4, 2, -50.0)
        proj = conv2d_naive(ctx, params['proj.weight'], params['proj.bias'])
        torch.testing.assert_close(attention_fusion(ms, ctx, params), proj)

    def test_composition(self):
        ms, ctx = seeded((4, 3, 3), 7), seeded((2, 3, 3), 8)
        params = {
            'gate.weight': seeded((4, 2, 1, 1), 9),
            'gate.bias': seeded((4,), 10),
            'proj.weight': seeded((4, 2, 1, 1), 11),
            'proj.bias': seeded((4,), 12),
        }
        gate = sigmoid(conv2d_naive(ctx, params['gate.weight'], params['gate.bias']))
        expected = ms * gate + conv2d_naive(ctx, params['proj.weight'], params['proj.bias'])
        torch.testing.assert_close(attention_fusion(ms, ctx, params), expected)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            attention_fusion(torch.zeros(4, 3, 3), torch.zeros(2, 3, 4), fusion_params(4, 2, 0.0))


class TestFeatureAggregation:

    @staticmethod
    def fam_params(num_classes, seed=0):
        arch = NetworkArchitecture(num_classes=num_classes, meta_channels=4, decoder_channels=(6, 6, 4, 4),
                                   context_channels=3)
        shapes = {k: v for k, v in arch.parameter_shapes().items()
                  if k.split('.')[0] in ('context', 'fusion', 'fam')}
        return init_params(shapes, seed, dtype=torch.float64)

    def test_single_class_shape(self):
        params = self.fam_params(1)
        out = fam_forward(seeded((4, 4, 4), 0), seeded((4, 4, 4), 1), seeded((1, 4, 4), 2), params, 1)
        assert out.shape == (1, 4, 4)

    def test_zero_weights(self):
        shapes = {k: tuple(v.shape) for k, v in self.fam_params(3).tensors.items()}
        params = zero_params(shapes, dtype=torch.float64)
        out = fam_forward(seeded((4, 4, 4), 0), seeded((4, 4, 4), 1), seeded((1, 4, 4), 2), params, 3)
        assert not out.any()

    def test_step_by_step(self):
        params = self.fam_params(3, seed=4)
        meta, ms, rng = seeded((4, 4, 4), 0), seeded((4, 4, 4), 1), seeded((1, 4, 4), 2)

        p = dict(params.tensors)
        ctx = relu(conv2d_naive(rng, p['context.conv0.weight'], p['context.conv0.bias'], padding=1))
        ctx = conv2d_naive(ctx, p['context.conv1.weight'], p['context.conv1.bias'], padding=2, dilation=2)
        gate = sigmoid(conv2d_naive(ctx, p['fusion.gate.weight'], p['fusion.gate.bias']))
        guided = ms * gate + conv2d_naive(ctx, p['fusion.proj.weight'], p['fusion.proj.bias'])
        x = torch.cat([meta, guided])
        y = conv2d_naive(x, p['fam.conv.weight'], p['fam.conv.bias'], padding=1) \
            + conv2d_naive(x, p['fam.residual.weight'], p['fam.residual.bias'])
        expected = conv2d_naive(y, p['fam.head.weight'], p['fam.head.bias'])

        torch.testing.assert_close(fam_forward(meta, ms, rng, params, 3), expected)

    def test_class_count_checked(self):
        params = self.fam_params(3)
        with pytest.raises(ShapeError):
            fam_forward(seeded((4, 4, 4), 0), seeded((4, 4, 4), 1), seeded((1, 4, 4), 2), params, 4)


class TestBackbone:

    def test_shape_contract(self):
        params = init_network_params(TINY, seed=0)
        out = micro_backbone_forward(torch.rand(4, 16, 32), params)
        assert out.shape == (4, 16, 32)

    def test_zero_input_zero_bias(self):
        shapes = TINY.parameter_shapes()
        params = init_network_params(TINY, seed=0)
        for name in shapes:
            if name.endswith('bias'):
                params = params.set(name, torch.zeros(shapes[name]))
        assert not micro_backbone_forward(torch.zeros(4, 16, 32), params).any()

    def test_divisibility(self):
        params = init_network_params(TINY, seed=0)
        with pytest.raises(ShapeError):
            micro_backbone_forward(torch.zeros(4, 16, 40), params)


class TestNetwork:

    def test_shape_contract(self):
        logits = network_forward(random_rri(), init_network_params(TINY, seed=0), TINY)
        assert logits.shape == (5, 16, 32)
        assert logits.dtype == torch.float32

    def test_seeded_runs_are_identical(self):
        rri = random_rri(1)
        a = network_forward(rri, init_network_params(TINY, seed=3), TINY)
        b = network_forward(rri, init_network_params(TINY, seed=3), TINY)
        assert torch.equal(a, b)

    def test_different_seeds_differ(self):
        rri = random_rri(1)
        a = network_forward(rri, init_network_params(TINY, seed=3), TINY)
        b = network_forward(rri, init_network_params(TINY, seed=4), TINY)
        assert not torch.equal(a, b)

    def test_empty_image_gives_finite_logits(self):
        rri = RangeResidualImage(np.zeros((9, 16, 32), dtype=np.float32))
        logits = network_forward(rri, init_network_params(TINY, seed=0), TINY, [0] * 5, [1] * 5)
        assert torch.isfinite(logits).all()

    @pytest.mark.parametrize('use_meta_kernel,use_fam', [(False, True), (True, False), (False, False)])
    def test_ablations(self, use_meta_kernel, use_fam):
        arch = replace(TINY, use_meta_kernel=use_meta_kernel, use_fam=use_fam)
        logits = network_forward(random_rri(), init_network_params(arch, seed=0), arch)
        assert logits.shape == (5, 16, 32)

    def test_single_scan_input(self):
        arch = replace(TINY, in_channels=6)
        rri = RangeResidualImage(np.delete(random_rri().channels, [5, 6, 7], axis=0))
        assert network_forward(rri, init_network_params(arch, seed=0), arch).shape == (5, 16, 32)

    def test_channel_mismatch(self):
        arch = replace(TINY, in_channels=6)
        with pytest.raises(ShapeError):
            network_forward(random_rri(), init_network_params(arch, seed=0), arch)


class TestParametersAndCheckpoints:

    def test_default_shapes(self):
        shapes = NetworkArchitecture().parameter_shapes()
        assert shapes['meta_kernel.mlp.0.weight'] == (16, 4)
        assert shapes['meta_kernel.mlp.1.weight'] == (9, 16)
        assert shapes['meta_kernel.aggregator.weight'] == (32, 225)
        assert shapes['backbone.dec0.weight'] == (128, 256 + 256, 3, 3)
        assert shapes['fam.head.weight'] == (25, 32, 1, 1)

    def test_init_is_seeded(self):
        a, b = init_network_params(TINY, 7), init_network_params(TINY, 7)
        assert all(torch.equal(a[n], b[n]) for n in a.names())

    def test_set_checks_shape(self):
        params = init_network_params(TINY, 0)
        with pytest.raises(ShapeError):
            params.set('backbone.enc0.bias', torch.zeros(99))

    def test_checkpoint_round_trip(self, work_dir):
        params = init_network_params(TINY, 11)
        write_checkpoint(params, work_dir / 'tiny.mrsk', TINY.parameter_shapes())
        back = read_checkpoint(work_dir / 'tiny.mrsk', TINY.parameter_shapes())
        assert back.seed == 11
        assert all(torch.equal(back[n], params[n]) for n in params.names())

    def test_checkpoint_section_order(self, work_dir):
        write_checkpoint(init_network_params(TINY, 0), work_dir / 'tiny.mrsk', TINY.parameter_shapes())
        _, sections = read_sections(work_dir / 'tiny.mrsk')
        assert list(sections) == list(TINY.parameter_shapes())

    def test_checkpoint_architecture_mismatch(self, work_dir):
        write_checkpoint(init_network_params(TINY, 0), work_dir / 'tiny.mrsk')
        other = replace(TINY, num_classes=6)
        with pytest.raises(CheckpointError):
            read_checkpoint(work_dir / 'tiny.mrsk', other.parameter_shapes())

    def test_checkpoint_missing_section(self, work_dir):
        params = init_network_params(TINY, 0)
        partial = BlockParams(params.tensors.remove('fam.head.bias'), params.seed)
        write_checkpoint(partial, work_dir / 'tiny.mrsk')
        with pytest.raises(CheckpointError):
            read_checkpoint(work_dir / 'tiny.mrsk', TINY.parameter_shapes())

    @pytest.mark.parametrize('corrupt', ['magic', 'truncated', 'trailing'])
    def test_corrupt_checkpoint(self, work_dir, corrupt):
        path = work_dir / 'tiny.mrsk'
        write_checkpoint(init_network_params(TINY, 0), path)
        raw = path.read_bytes()
        raw = {'magic': b'XXXX' + raw[4:], 'truncated': raw[:-3], 'trailing': raw + b'\0'}[corrupt]
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            read_sections(path)
