"""
Dense tensor kernels on C x H x W feature maps.

Everything here works on single (unbatched) torch tensors. Kernels accumulate
in float64 and return the dtype of their input, so float32 storage stays
float32 while float64 inputs (gradient checks) stay float64.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from opt_einsum import contract as einsum

from rangeseg.errors import NumericError, ShapeError

FeatureMap = torch.Tensor  # [C, H, W]


def check_feature_map(x: torch.Tensor, name: str = 'input', channels: Optional[int] = None) -> None:
    if x.dim() != 3:
        raise ShapeError(f'{name} must be a C x H x W feature map, got shape {tuple(x.shape)}')
    if channels is not None and x.shape[0] != channels:
        raise ShapeError(f'{name} must have {channels} channels, got {x.shape[0]}')


def conv2d(
    input: FeatureMap,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> FeatureMap:
    '''
    Cross-correlation with zero padding.

    Args:
        input: [Cin, H, W]
        kernel: [Cout, Cin, kh, kw]
        bias: [Cout] or None

    Returns:
        [Cout, H', W'] with H' = (H + 2 padding - dilation (kh - 1) - 1) // stride + 1
    '''
    check_feature_map(input)
    if kernel.dim() != 4 or kernel.shape[1] != input.shape[0]:
        raise ShapeError(
            f'kernel {tuple(kernel.shape)} does not match input with {input.shape[0]} channels'
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f'bias {tuple(bias.shape)} does not match {kernel.shape[0]} output channels')

    out = F.conv2d(
        input[None].double(),
        kernel.double(),
        None if bias is None else bias.double(),
        stride=stride,
        padding=padding,
        dilation=dilation,
    )
    return out[0].to(input.dtype)


def conv2d_naive(
    input: FeatureMap,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> FeatureMap:
    """Reference cross-correlation with explicit loops over output cells."""
    check_feature_map(input)
    cout, cin, kh, kw = kernel.shape
    if cin != input.shape[0]:
        raise ShapeError(f'kernel expects {cin} input channels, got {input.shape[0]}')

    x = F.pad(input.double(), (padding, padding, padding, padding))
    k = kernel.double()
    h_out = (x.shape[1] - dilation * (kh - 1) - 1) // stride + 1
    w_out = (x.shape[2] - dilation * (kw - 1) - 1) // stride + 1

    out = torch.zeros((cout, h_out, w_out), dtype=torch.float64)
    for o in range(cout):
        for i in range(h_out):
            for j in range(w_out):
                total = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            total += float(x[c, i * stride + a * dilation, j * stride + b * dilation]) * float(k[o, c, a, b])
                if bias is not None:
                    total += float(bias[o])
                out[o, i, j] = total
    return out.to(input.dtype)


def max_pool2d(
    input: FeatureMap,
    window: int,
    stride: int = 1,
    padding: int = 0,
    pad_value: float = 0.0,
) -> FeatureMap:
    """Sliding-window maximum; padding cells hold ``pad_value``."""
    check_feature_map(input)
    if window < 1 or stride < 1:
        raise ShapeError(f'window and stride must be positive, got {window}, {stride}')
    x = F.pad(input.double(), (padding, padding, padding, padding), value=pad_value)
    return F.max_pool2d(x[None], kernel_size=window, stride=stride)[0].to(input.dtype)


def upsample_nearest2x(input: FeatureMap) -> FeatureMap:
    check_feature_map(input)
    return input.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def identity(x: torch.Tensor) -> torch.Tensor:
    return x


ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    'relu': relu,
    'sigmoid': sigmoid,
    'none': identity,
}


def softmax_channels(input: FeatureMap) -> FeatureMap:
    """Per-pixel softmax across channels, with max subtraction."""
    check_feature_map(input)
    x = input.double()
    x = x - x.max(dim=0, keepdim=True).values
    e = torch.exp(x)
    return (e / e.sum(dim=0, keepdim=True)).to(input.dtype)


########################################################
# Perceptron
########################################################

@dataclass(frozen=True)
class PerceptronLayer:
    weight: torch.Tensor  # [out, in]
    bias: torch.Tensor  # [out]
    activation: str = 'none'

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f'layer weight {tuple(self.weight.shape)} and bias {tuple(self.bias.shape)} do not agree'
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f'Unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}')

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class DensePerceptron:
    layers: Tuple[PerceptronLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError('a perceptron needs at least one layer')
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_features != b.in_features:
                raise ShapeError(f'layer widths do not chain: {a.out_features} -> {b.in_features}')
        object.__setattr__(self, 'layers', layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    @classmethod
    def from_arrays(cls, layers: Sequence[Tuple[torch.Tensor, torch.Tensor, str]]) -> 'DensePerceptron':
        return cls(tuple(PerceptronLayer(w, b, act) for w, b, act in layers))


def perceptron_forward(p: DensePerceptron, x: torch.Tensor) -> torch.Tensor:
    '''
    Apply the layers to ``x`` of shape [..., in_features].
    '''
    if x.shape[-1] != p.in_features:
        raise ShapeError(f'perceptron expects {p.in_features} inputs, got {x.shape[-1]}')
    h = x.double()
    for layer in p.layers:
        h = einsum('...i,oi->...o', h, layer.weight.double()) + layer.bias.double()
        h = ACTIVATIONS[layer.activation](h)
    return h.to(x.dtype)


########################################################
# Finite differences
########################################################

def finite_diff_grad(f: Callable[[torch.Tensor], float], x: torch.Tensor, eps: float) -> torch.Tensor:
    '''
    Central-difference gradient of a scalar function.

        g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)

    Raises:
        NumericError: f returned a non-finite value
    '''
    if eps <= 0:
        raise ValueError(f'eps must be positive, got {eps}')
    x = x.detach().clone().double().reshape(-1)
    grad = torch.zeros_like(x)

    def evaluate(point: torch.Tensor) -> float:
        value = float(f(point))
        if not math.isfinite(value):
            raise NumericError(f'function value is not finite: {value}')
        return value

    for i in range(x.numel()):
        orig = float(x[i])
        x[i] = orig + eps
        plus = evaluate(x.clone())
        x[i] = orig - eps
        minus = evaluate(x.clone())
        x[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return grad
