"""
Meta-Kernel: a 5x5 convolution-like operator whose per-neighbor weights are
generated at runtime by a shared perceptron from relative geometry.

For a center pixel i and each neighbor j of its 5x5 window (row-major order):

    rel_j = (r_j - r_i, x_j - x_i, y_j - y_i, z_j - z_i)
    w_j   = mlp(rel_j)
    out_i = A · concat_j(w_j * values_j) + b

Neighbors that are masked or outside the image contribute a zero relative
vector and zero values. The image is processed in bands of rows so memory
stays bounded for full-size range images.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from opt_einsum import contract as einsum

from rangeseg.errors import NumericError, ShapeError
from rangeseg.network.params import BlockParams, init_params
from rangeseg.network.tensor_ops import (
    ACTIVATIONS,
    DensePerceptron,
    FeatureMap,
    PerceptronLayer,
    check_feature_map,
    finite_diff_grad,
    perceptron_forward,
)

log = logging.getLogger(__name__)

WINDOW = 5
RADIUS = WINDOW // 2
NEIGHBORS = WINDOW * WINDOW
GEOMETRY_CHANNELS = 4


@dataclass(frozen=True)
class MetaKernelParams:
    weight_mlp: DensePerceptron  # 4 -> ... -> Cval
    aggregator_weight: torch.Tensor  # [Cout, 25 * Cval], column index j * Cval + c
    aggregator_bias: torch.Tensor  # [Cout]

    def __post_init__(self):
        if self.weight_mlp.in_features != GEOMETRY_CHANNELS:
            raise ShapeError(f'weight perceptron must take 4 inputs, got {self.weight_mlp.in_features}')
        cval = self.weight_mlp.out_features
        if self.aggregator_weight.dim() != 2 or self.aggregator_weight.shape[1] != NEIGHBORS * cval:
            raise ShapeError(
                f'aggregator weight {tuple(self.aggregator_weight.shape)} does not match 25 x {cval} inputs'
            )
        if self.aggregator_bias.shape != (self.aggregator_weight.shape[0],):
            raise ShapeError('aggregator bias does not match the output channel count')

    @property
    def values_channels(self) -> int:
        return self.weight_mlp.out_features

    @property
    def out_channels(self) -> int:
        return self.aggregator_weight.shape[0]

    @classmethod
    def from_block_params(cls, params: BlockParams, prefix: str = 'meta_kernel') -> 'MetaKernelParams':
        p = params.subset(prefix)
        n_layers = len({k.split('.')[1] for k in p if k.startswith('mlp.')})
        layers = []
        for i in range(n_layers):
            activation = 'relu' if i < n_layers - 1 else 'none'
            layers.append(PerceptronLayer(p[f'mlp.{i}.weight'], p[f'mlp.{i}.bias'], activation))
        return cls(DensePerceptron(tuple(layers)), p['aggregator.weight'], p['aggregator.bias'])

    def tensors(self) -> Dict[str, torch.Tensor]:
        out = {}
        for i, layer in enumerate(self.weight_mlp.layers):
            out[f'mlp.{i}.weight'] = layer.weight
            out[f'mlp.{i}.bias'] = layer.bias
        out['aggregator.weight'] = self.aggregator_weight
        out['aggregator.bias'] = self.aggregator_bias
        return out

    def replace_tensor(self, name: str, value: torch.Tensor) -> 'MetaKernelParams':
        if name.startswith('mlp.'):
            _, idx, field = name.split('.')
            layers = list(self.weight_mlp.layers)
            layers[int(idx)] = replace(layers[int(idx)], **{field: value})
            return replace(self, weight_mlp=DensePerceptron(tuple(layers)))
        return replace(self, **{name.replace('.', '_'): value})

    @classmethod
    def init(cls, values_channels: int, out_channels: int, hidden: int, seed: int,
             dtype: torch.dtype = torch.float32) -> 'MetaKernelParams':
        shapes = {
            'meta_kernel.mlp.0.weight': (hidden, GEOMETRY_CHANNELS),
            'meta_kernel.mlp.0.bias': (hidden,),
            'meta_kernel.mlp.1.weight': (values_channels, hidden),
            'meta_kernel.mlp.1.bias': (values_channels,),
            'meta_kernel.aggregator.weight': (out_channels, NEIGHBORS * values_channels),
            'meta_kernel.aggregator.bias': (out_channels,),
        }
        return cls.from_block_params(init_params(shapes, seed, dtype))


@dataclass(frozen=True)
class MetaKernelInput:
    geometry: torch.Tensor  # [4, H, W] (r, x, y, z)
    values: torch.Tensor  # [Cval, H, W]
    mask: torch.Tensor  # [H, W] bool

    def __post_init__(self):
        check_feature_map(self.geometry, 'geometry', GEOMETRY_CHANNELS)
        check_feature_map(self.values, 'values')
        if self.mask.shape != self.geometry.shape[1:] or self.values.shape[1:] != self.geometry.shape[1:]:
            raise ShapeError('geometry, values and mask must share H x W')
        if not torch.isfinite(self.geometry).all():
            raise NumericError('geometry contains non-finite values')
        object.__setattr__(self, 'mask', self.mask.bool())

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.mask.shape)


########################################################
# Forward
########################################################

def _unfold(x: torch.Tensor) -> torch.Tensor:
    """[C, h + 4, W + 4] -> [C, 25, h * W] neighborhoods, row-major window order."""
    c = x.shape[0]
    return F.unfold(x[None], kernel_size=WINDOW).reshape(c, NEIGHBORS, -1)


@dataclass
class _Band:
    rel: torch.Tensor  # [25, L, 4]
    pre: List[torch.Tensor]  # per layer [25, L, out]
    acts: List[torch.Tensor]  # layer inputs, [25, L, in]
    weights: torch.Tensor  # [25, L, Cval]
    values: torch.Tensor  # [25, L, Cval], masked
    concat: torch.Tensor  # [L, 25 * Cval]
    out: torch.Tensor  # [Cout, L]


class _Padded:
    """Masked, zero-padded copies of the input in float64."""

    def __init__(self, inp: MetaKernelInput):
        m = inp.mask.double()
        self.geometry = inp.geometry.double() * m
        pad = (RADIUS, RADIUS, RADIUS, RADIUS)
        self.geometry_p = F.pad(self.geometry, pad)
        self.values_p = F.pad(inp.values.double() * m, pad)
        self.mask_p = F.pad(m[None], pad)


def _band_forward(padded: _Padded, params: MetaKernelParams, r0: int, r1: int) -> _Band:
    rows = slice(r0, r1 + 2 * RADIUS)
    gn = _unfold(padded.geometry_p[:, rows])
    vn = _unfold(padded.values_p[:, rows])
    mn = _unfold(padded.mask_p[:, rows])[0]
    center = padded.geometry[:, r0:r1].reshape(GEOMETRY_CHANNELS, -1)

    rel = ((gn - center[:, None, :]) * mn[None]).permute(1, 2, 0)

    h = rel
    pre, acts = [], []
    for layer in params.weight_mlp.layers:
        acts.append(h)
        z = einsum('jli,oi->jlo', h, layer.weight.double()) + layer.bias.double()
        pre.append(z)
        h = ACTIVATIONS[layer.activation](z)

    values = vn.permute(1, 2, 0)
    modulated = h * values
    n_pix = modulated.shape[1]
    concat = modulated.permute(1, 0, 2).reshape(n_pix, -1)
    out = einsum('ok,lk->ol', params.aggregator_weight.double(), concat) + params.aggregator_bias.double()[:, None]
    return _Band(rel, pre, acts, h, values, concat, out)


def _bands(height: int, row_chunk: int):
    for r0 in range(0, height, row_chunk):
        yield r0, min(r0 + row_chunk, height)


def _check_params(inp: MetaKernelInput, params: MetaKernelParams) -> None:
    if inp.values.shape[0] != params.values_channels:
        raise ShapeError(
            f'values have {inp.values.shape[0]} channels, parameters expect {params.values_channels}'
        )


def meta_kernel_forward(inp: MetaKernelInput, params: MetaKernelParams, row_chunk: int = 8) -> FeatureMap:
    '''
    Args:
        inp: geometry, values and validity mask of a range image
        params: weight perceptron and aggregator
        row_chunk: rows processed per band

    Returns:
        [Cout, H, W] meta features in the dtype of ``inp.values``
    '''
    _check_params(inp, params)
    height, width = inp.shape
    padded = _Padded(inp)
    out = torch.empty((params.out_channels, height, width), dtype=torch.float64)
    for r0, r1 in _bands(height, row_chunk):
        out[:, r0:r1] = _band_forward(padded, params, r0, r1).out.reshape(-1, r1 - r0, width)
    return out.to(inp.values.dtype)


def relative_geometry(inp: MetaKernelInput) -> torch.Tensor:
    """[25, H * W, 4] relative vectors fed to the weight perceptron."""
    height, _ = inp.shape
    padded = _Padded(inp)
    rows = slice(0, height + 2 * RADIUS)
    gn = _unfold(padded.geometry_p[:, rows])
    mn = _unfold(padded.mask_p[:, rows])[0]
    center = padded.geometry.reshape(GEOMETRY_CHANNELS, -1)
    return ((gn - center[:, None, :]) * mn[None]).permute(1, 2, 0)


def neighbor_weights(inp: MetaKernelInput, params: MetaKernelParams) -> torch.Tensor:
    """[25, H * W, Cval] per-neighbor weight vectors."""
    return perceptron_forward(params.weight_mlp, relative_geometry(inp))


def meta_kernel_forward_reference(inp: MetaKernelInput, params: MetaKernelParams) -> FeatureMap:
    """Naive per-pixel, per-neighbor loop; the oracle for the banded forward."""
    _check_params(inp, params)
    height, width = inp.shape
    geometry = inp.geometry.double()
    values = inp.values.double()
    mask = inp.mask
    mlp = DensePerceptron(tuple(
        PerceptronLayer(layer.weight.double(), layer.bias.double(), layer.activation)
        for layer in params.weight_mlp.layers
    ))
    agg_w = params.aggregator_weight.double()
    agg_b = params.aggregator_bias.double()
    cval = params.values_channels

    out = torch.zeros((params.out_channels, height, width), dtype=torch.float64)
    for i in range(height):
        for j in range(width):
            center = geometry[:, i, j] if mask[i, j] else torch.zeros(GEOMETRY_CHANNELS, dtype=torch.float64)
            pieces = []
            for di in range(-RADIUS, RADIUS + 1):
                for dj in range(-RADIUS, RADIUS + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < height and 0 <= jj < width and mask[ii, jj]:
                        rel = geometry[:, ii, jj] - center
                        val = values[:, ii, jj]
                    else:
                        rel = torch.zeros(GEOMETRY_CHANNELS, dtype=torch.float64)
                        val = torch.zeros(cval, dtype=torch.float64)
                    pieces.append(perceptron_forward(mlp, rel) * val)
            out[:, i, j] = agg_w @ torch.cat(pieces) + agg_b
    return out.to(inp.values.dtype)


########################################################
# Backward
########################################################

@dataclass(frozen=True)
class MetaKernelGrads:
    params: Dict[str, torch.Tensor]  # keyed like MetaKernelParams.tensors()
    values: torch.Tensor  # [Cval, H, W]


def meta_kernel_backward(
    inp: MetaKernelInput,
    params: MetaKernelParams,
    upstream: FeatureMap,
    row_chunk: int = 8,
) -> MetaKernelGrads:
    '''
    Analytic gradients of <upstream, meta_kernel_forward(inp, params)> with
    respect to every parameter and to the value channels. Geometry is treated
    as constant input.
    '''
    _check_params(inp, params)
    height, width = inp.shape
    expected = (params.out_channels, height, width)
    if tuple(upstream.shape) != expected:
        raise ShapeError(f'upstream gradient {tuple(upstream.shape)} does not match output {expected}')

    padded = _Padded(inp)
    layers = params.weight_mlp.layers
    agg_w = params.aggregator_weight.double()
    cval = params.values_channels

    d_layers = [
        (torch.zeros_like(layer.weight, dtype=torch.float64), torch.zeros_like(layer.bias, dtype=torch.float64))
        for layer in layers
    ]
    d_agg_w = torch.zeros_like(agg_w)
    d_agg_b = torch.zeros(params.out_channels, dtype=torch.float64)
    d_values_p = torch.zeros_like(padded.values_p)

    for r0, r1 in _bands(height, row_chunk):
        band = _band_forward(padded, params, r0, r1)
        g = upstream[:, r0:r1].double().reshape(params.out_channels, -1)
        n_pix = g.shape[1]

        d_agg_w += einsum('ol,lk->ok', g, band.concat)
        d_agg_b += g.sum(dim=1)

        d_concat = einsum('ok,ol->lk', agg_w, g)
        d_mod = d_concat.reshape(n_pix, NEIGHBORS, cval).permute(1, 0, 2)

        # Values: scatter the neighborhood gradients back onto the padded image
        d_vals = (d_mod * band.weights).permute(2, 0, 1).reshape(1, cval * NEIGHBORS, n_pix)
        d_values_p[:, r0:r1 + 2 * RADIUS] += F.fold(
            d_vals, output_size=(r1 - r0 + 2 * RADIUS, width + 2 * RADIUS), kernel_size=WINDOW,
        )[0]

        # Weight perceptron
        d_h = d_mod * band.values
        for idx in reversed(range(len(layers))):
            layer = layers[idx]
            z = band.pre[idx]
            if layer.activation == 'relu':
                d_z = d_h * (z > 0)
            elif layer.activation == 'sigmoid':
                s = torch.sigmoid(z)
                d_z = d_h * s * (1 - s)
            else:
                d_z = d_h
            d_layers[idx][0].add_(einsum('jlo,jli->oi', d_z, band.acts[idx]))
            d_layers[idx][1].add_(d_z.sum(dim=(0, 1)))
            d_h = einsum('jlo,oi->jli', d_z, layer.weight.double())

    grads = {}
    for i, (d_w, d_b) in enumerate(d_layers):
        grads[f'mlp.{i}.weight'] = d_w
        grads[f'mlp.{i}.bias'] = d_b
    grads['aggregator.weight'] = d_agg_w
    grads['aggregator.bias'] = d_agg_b

    d_values = d_values_p[:, RADIUS:-RADIUS, RADIUS:-RADIUS] * inp.mask.double()
    return MetaKernelGrads(grads, d_values)


########################################################
# Gradient check
########################################################

@dataclass(frozen=True)
class GradcheckResult:
    seed: int
    eps: float
    errors: Dict[str, float]  # max relative error per parameter group

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    scale = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / scale


def build_gradcheck_instance(
    seed: int,
    height: int = 4,
    width: int = 4,
    values_channels: int = 9,
    out_channels: int = 4,
    hidden: int = 16,
    eps: float = 1e-3,
) -> Tuple[MetaKernelInput, MetaKernelParams]:
    '''
    Seeded float64 instance whose relu pre-activations stay at least
    2 eps max(1, max|rel|) away from zero, so central differences never
    straddle a kink.
    '''
    gen = torch.Generator().manual_seed(int(seed))
    xyz = torch.randn((3, height, width), generator=gen, dtype=torch.float64) * 5.0
    r = xyz.norm(dim=0, keepdim=True)
    geometry = torch.cat([r, xyz])
    mask = torch.rand((height, width), generator=gen, dtype=torch.float64) > 0.2
    mask[height // 2, width // 2] = True

    values = torch.randn((values_channels, height, width), generator=gen, dtype=torch.float64)
    n_geo = min(GEOMETRY_CHANNELS, values_channels)
    values[:n_geo] = geometry[:n_geo]
    values = values * mask

    inp = MetaKernelInput(geometry, values, mask)
    params = MetaKernelParams.init(values_channels, out_channels, hidden, seed, dtype=torch.float64)

    rel = relative_geometry(inp)
    margin = 2.0 * eps * max(1.0, float(rel.abs().max()))
    first = params.weight_mlp.layers[0]
    bias = first.bias.clone()
    pre = einsum('jli,oi->jlo', rel, first.weight) + first.bias
    for h in range(bias.numel()):
        s = torch.sort(pre[..., h].reshape(-1)).values
        gaps = s[1:] - s[:-1]
        k = int(torch.argmax(gaps)) if gaps.numel() else 0
        if gaps.numel() and float(gaps[k]) / 2 >= margin:
            bias[h] -= (s[k] + s[k + 1]) / 2
        else:
            bias[h] += margin - s[0]
    return inp, params.replace_tensor('mlp.0.bias', bias)


def meta_kernel_gradcheck(
    inp: MetaKernelInput,
    params: MetaKernelParams,
    eps: float = 1e-3,
    perturb: float = 0.0,
    seed: int = 0,
) -> GradcheckResult:
    '''
    Compare analytic gradients of sum(forward) with central differences.

    ``perturb`` scales the analytic gradients by (1 + perturb); a non-zero
    value is a negative control that must fail the check.
    '''
    output = meta_kernel_forward(inp, params)
    grads = meta_kernel_backward(inp, params, torch.ones_like(output))

    errors = {}
    for name, tensor in params.tensors().items():
        def loss(flat, name=name, tensor=tensor):
            p = params.replace_tensor(name, flat.reshape(tensor.shape))
            return float(meta_kernel_forward(inp, p).sum())

        numeric = finite_diff_grad(loss, tensor, eps)
        analytic = grads.params[name].reshape(-1) * (1.0 + perturb)
        errors[name] = float(relative_error(analytic, numeric).max())

    def loss_values(flat):
        return float(meta_kernel_forward(replace(inp, values=flat.reshape(inp.values.shape)), params).sum())

    numeric = finite_diff_grad(loss_values, inp.values, eps)
    analytic = grads.values.reshape(-1) * (1.0 + perturb)
    errors['values'] = float(relative_error(analytic, numeric).max())
    return GradcheckResult(seed, eps, errors)


@dataclass(frozen=True)
class GradcheckReport:
    results: Tuple[GradcheckResult, ...]
    eps_sweep: Dict[float, float]  # eps -> max relative error on the first seed
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.results)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_gradcheck(
    seeds: Sequence[int],
    height: int = 4,
    width: int = 4,
    values_channels: int = 9,
    out_channels: int = 4,
    hidden: int = 16,
    eps: float = 1e-3,
    tolerance: float = 1e-4,
    eps_sweep: Optional[Sequence[float]] = None,
    perturb: float = 0.0,
) -> GradcheckReport:
    eps_sweep = list(eps_sweep or [])
    eps_max = max([eps] + eps_sweep)

    results = []
    instances = {}
    for seed in seeds:
        inp, params = build_gradcheck_instance(seed, height, width, values_channels, out_channels, hidden, eps_max)
        instances[seed] = (inp, params)
        result = meta_kernel_gradcheck(inp, params, eps, perturb=perturb, seed=seed)
        log.info(f'seed {seed}: max relative error {result.max_error:.3e}')
        results.append(result)

    sweep = {}
    if eps_sweep and seeds:
        inp, params = instances[seeds[0]]
        for e in eps_sweep:
            sweep[e] = meta_kernel_gradcheck(inp, params, e, perturb=perturb, seed=seeds[0]).max_error
    return GradcheckReport(tuple(results), sweep, tolerance)


def random_instance(seed: int, height: int, width: int, values_channels: int, out_channels: int,
                    hidden: int = 16, dtype: torch.dtype = torch.float64) -> Tuple[MetaKernelInput, MetaKernelParams]:
    """Seeded instance for forward comparisons; about a fifth of the pixels are masked."""
    rng = np.random.default_rng(seed)
    xyz = rng.normal(scale=5.0, size=(3, height, width))
    geometry = np.concatenate([np.linalg.norm(xyz, axis=0, keepdims=True), xyz])
    mask = rng.random((height, width)) > 0.2
    values = rng.normal(size=(values_channels, height, width))
    inp = MetaKernelInput(
        torch.as_tensor(geometry, dtype=dtype),
        torch.as_tensor(values, dtype=dtype),
        torch.as_tensor(mask),
    )
    return inp, MetaKernelParams.init(values_channels, out_channels, hidden, seed, dtype=dtype)
