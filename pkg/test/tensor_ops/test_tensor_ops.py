#!/usr/bin/env python3

"""
Test suite for the dense tensor kernels.
"""

import math

import pytest
import torch

from rangeseg.errors import NumericError, ShapeError
from rangeseg.network.tensor_ops import (
    DensePerceptron,
    PerceptronLayer,
    conv2d,
    conv2d_naive,
    finite_diff_grad,
    max_pool2d,
    perceptron_forward,
    softmax_channels,
    upsample_nearest2x,
)


class TestConv2d:

    def test_unit_kernel_is_identity(self):
        x = torch.randn(1, 5, 7, generator=torch.Generator().manual_seed(0))
        out = conv2d(x, torch.ones(1, 1, 1, 1), torch.zeros(1))
        torch.testing.assert_close(out, x)

    def test_ones_kernel_sums_neighbourhood(self):
        out = conv2d(torch.ones(1, 4, 4), torch.ones(1, 1, 3, 3), torch.zeros(1), padding=1)
        expected = torch.tensor([
            [4.0, 6.0, 6.0, 4.0],
            [6.0, 9.0, 9.0, 6.0],
            [6.0, 9.0, 9.0, 6.0],
            [4.0, 6.0, 6.0, 4.0],
        ])
        torch.testing.assert_close(out[0], expected)

    def test_stride_subsamples(self):
        x = torch.arange(16.0).reshape(1, 4, 4)
        out = conv2d(x, torch.ones(1, 1, 1, 1), stride=2)
        torch.testing.assert_close(out[0], torch.tensor([[0.0, 2.0], [8.0, 10.0]]))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(torch.ones(2, 4, 4), torch.ones(1, 3, 3, 3))

    @pytest.mark.parametrize('stride,padding,dilation', [(1, 1, 1), (2, 0, 1), (1, 2, 2)])
    def test_matches_loop_reference(self, stride, padding, dilation):
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(3, 6, 7, generator=gen, dtype=torch.float64)
        k = torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64)
        b = torch.randn(2, generator=gen, dtype=torch.float64)
        fast = conv2d(x, k, b, stride=stride, padding=padding, dilation=dilation)
        slow = conv2d_naive(x, k, b, stride=stride, padding=padding, dilation=dilation)
        torch.testing.assert_close(fast, slow, rtol=1e-12, atol=1e-12)

    def test_keeps_float32(self):
        out = conv2d(torch.ones(1, 2, 2), torch.ones(1, 1, 1, 1))
        assert out.dtype == torch.float32


class TestPooling:

    def test_window_one_is_identity(self):
        x = torch.randn(2, 3, 3, generator=torch.Generator().manual_seed(0))
        torch.testing.assert_close(max_pool2d(x, 1), x)

    def test_constant_map(self):
        x = torch.full((1, 5, 5), 2.5)
        torch.testing.assert_close(max_pool2d(x, 3, padding=1, pad_value=2.5), x)

    def test_enumerated_window(self):
        x = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
        torch.testing.assert_close(max_pool2d(x, 2), torch.tensor([[[3.0]]]))

    def test_pad_value_is_used(self):
        out = max_pool2d(torch.zeros(1, 2, 2), 3, padding=1, pad_value=-1.0)
        assert (out == 0).all()
        out = max_pool2d(torch.full((1, 2, 2), -5.0), 3, padding=1, pad_value=0.0)
        assert (out == 0).all()

    def test_upsample(self):
        x = torch.tensor([[[1.0, 2.0]]])
        torch.testing.assert_close(upsample_nearest2x(x), torch.tensor([[[1.0, 1.0, 2.0, 2.0]] * 2]))


class TestPerceptron:

    def test_identity_layer(self):
        p = DensePerceptron((PerceptronLayer(torch.eye(3), torch.zeros(3)),))
        x = torch.tensor([1.0, -2.0, 3.0])
        torch.testing.assert_close(perceptron_forward(p, x), x)

    def test_relu(self):
        p = DensePerceptron((PerceptronLayer(torch.eye(2), torch.zeros(2), 'relu'),))
        torch.testing.assert_close(perceptron_forward(p, torch.tensor([-1.0, 2.0])), torch.tensor([0.0, 2.0]))

    def test_two_layers_by_hand(self):
        w1 = torch.tensor([[1.0, 2.0], [-1.0, 0.5], [0.0, 1.0]])
        b1 = torch.tensor([0.5, 0.0, -3.0])
        w2 = torch.tensor([[1.0, 1.0, 1.0]])
        b2 = torch.tensor([-1.0])
        p = DensePerceptron.from_arrays([(w1, b1, 'relu'), (w2, b2, 'none')])
        # hidden = relu((1 + 4 + 0.5, -1 + 1, 2 - 3)) = (5.5, 0, 0)
        out = perceptron_forward(p, torch.tensor([1.0, 2.0]))
        torch.testing.assert_close(out, torch.tensor([4.5]))

    def test_batched_leading_dims(self):
        p = DensePerceptron((PerceptronLayer(torch.eye(2) * 2, torch.ones(2)),))
        out = perceptron_forward(p, torch.ones(3, 4, 2))
        assert out.shape == (3, 4, 2)
        assert (out == 3).all()

    def test_dimension_mismatch(self):
        p = DensePerceptron((PerceptronLayer(torch.eye(2), torch.zeros(2)),))
        with pytest.raises(ShapeError):
            perceptron_forward(p, torch.ones(3))

    def test_layers_must_chain(self):
        with pytest.raises(ShapeError):
            DensePerceptron((PerceptronLayer(torch.ones(3, 2), torch.zeros(3)),
                             PerceptronLayer(torch.ones(1, 4), torch.zeros(1))))


class TestSoftmax:

    def test_single_channel(self):
        torch.testing.assert_close(softmax_channels(torch.randn(1, 3, 3)), torch.ones(1, 3, 3))

    def test_equal_logits(self):
        torch.testing.assert_close(softmax_channels(torch.full((4, 2, 2), 7.0)), torch.full((4, 2, 2), 0.25))

    def test_two_classes(self):
        logits = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64).reshape(2, 1, 1)
        out = softmax_channels(logits)
        torch.testing.assert_close(out[:, 0, 0], torch.tensor([0.25, 0.75], dtype=torch.float64))

    def test_large_logits_stay_finite(self):
        out = softmax_channels(torch.tensor([1000.0, 0.0]).reshape(2, 1, 1))
        assert torch.isfinite(out).all()
        assert out[0, 0, 0] == pytest.approx(1.0)


class TestFiniteDifferences:

    def test_quadratic(self):
        g = finite_diff_grad(lambda x: float((x ** 2).sum()), torch.tensor([3.0]), 1e-3)
        assert float(g[0]) == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        g = finite_diff_grad(lambda x: 4.0, torch.zeros(5), 1e-3)
        assert not g.any()

    def test_sine(self):
        eps = 1e-3
        g = finite_diff_grad(lambda x: float(torch.sin(x).sum()), torch.zeros(1), eps)
        assert abs(float(g[0]) - 1.0) < eps ** 2

    def test_non_finite_value(self):
        with pytest.raises(NumericError):
            finite_diff_grad(lambda x: float('nan'), torch.zeros(2), 1e-3)
