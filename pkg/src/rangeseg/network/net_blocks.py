"""
Forward-only network blocks and the full network composition.

    meta    = MetaKernel(rri)                       (or a 3x3 conv stem)
    ms      = MicroBackbone(meta)                   4 down / 4 up stages with skips
    ctx     = ContextModule(range channel)          3x3 dil 1, relu, 3x3 dil 2
    guided  = sigmoid(gate(ctx)) * ms + proj(ctx)   attention fusion
    x       = concat(meta, guided)
    logits  = head(conv3x3(x) + proj1x1(x))         feature aggregation

With the aggregation module disabled, a 1x1 head is applied to ``ms``.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from rangeseg.errors import ShapeError
from rangeseg.network.meta_kernel import MetaKernelInput, MetaKernelParams, meta_kernel_forward
from rangeseg.network.params import BlockParams, NetworkArchitecture
from rangeseg.network.tensor_ops import (
    FeatureMap,
    check_feature_map,
    conv2d,
    max_pool2d,
    relu,
    sigmoid,
    upsample_nearest2x,
)
from rangeseg.projection.range_view import BASE_CHANNELS, RANGE, RangeResidualImage, normalize_channels

log = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 16


def _conv(x: FeatureMap, params: Dict[str, torch.Tensor], name: str, dilation: int = 1) -> FeatureMap:
    weight = params[f'{name}.weight']
    k = weight.shape[-1]
    return conv2d(x, weight, params[f'{name}.bias'], padding=dilation * (k - 1) // 2, dilation=dilation)


def context_module_forward(range_channel: FeatureMap, params: Dict[str, torch.Tensor]) -> FeatureMap:
    '''
    Two stacked 3x3 convolutions (dilation 1 then 2) with a relu between.

    Args:
        range_channel: [1, H, W]
        params: tensors ``conv0.*`` and ``conv1.*``
    '''
    check_feature_map(range_channel, 'range channel', 1)
    x = relu(_conv(range_channel, params, 'conv0', dilation=1))
    return _conv(x, params, 'conv1', dilation=2)


def attention_fusion(multi_scale: FeatureMap, range_ctx: FeatureMap, params: Dict[str, torch.Tensor]) -> FeatureMap:
    '''
    Gate the multi-scale features with the range context and add the
    projected context: ms * sigmoid(gate(ctx)) + proj(ctx).
    '''
    check_feature_map(multi_scale, 'multi-scale features')
    check_feature_map(range_ctx, 'range context')
    if multi_scale.shape[1:] != range_ctx.shape[1:]:
        raise ShapeError(
            f'spatial sizes differ: {tuple(multi_scale.shape[1:])} vs {tuple(range_ctx.shape[1:])}'
        )
    gate = sigmoid(_conv(range_ctx, params, 'gate'))
    return multi_scale * gate + _conv(range_ctx, params, 'proj')


def fam_forward(
    meta: FeatureMap,
    multi_scale: FeatureMap,
    range_channel: FeatureMap,
    params: BlockParams,
    num_classes: int,
) -> FeatureMap:
    """Feature aggregation: n x H x W logits from meta, backbone and range features."""
    guided = attention_fusion(
        multi_scale,
        context_module_forward(range_channel, params.subset('context')),
        params.subset('fusion'),
    )
    if meta.shape[1:] != guided.shape[1:]:
        raise ShapeError('meta features and range-guided features differ in size')
    x = torch.cat([meta, guided.to(meta.dtype)])

    fam = params.subset('fam')
    y = _conv(x, fam, 'conv') + _conv(x, fam, 'residual')
    logits = _conv(y, fam, 'head')
    if logits.shape[0] != num_classes:
        raise ShapeError(f'head produces {logits.shape[0]} classes, expected {num_classes}')
    return logits


def check_backbone_input(x: FeatureMap) -> None:
    check_feature_map(x, 'backbone input')
    h, w = x.shape[1:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ShapeError(f'backbone input {h}x{w} is not divisible by {DOWNSAMPLE_FACTOR}')


def micro_backbone_forward(meta: FeatureMap, params: BlockParams) -> FeatureMap:
    '''
    Encoder: 4 x (3x3 conv, relu, 2x2 max-pool); the skip is taken before
    the pool. Decoder: 4 x (nearest 2x upsample, concat skip, 3x3 conv, relu).
    '''
    check_backbone_input(meta)
    p = params.subset('backbone')

    skips = []
    x = meta
    for i in range(4):
        x = relu(_conv(x, p, f'enc{i}'))
        skips.append(x)
        x = max_pool2d(x, window=2, stride=2)
    for i in range(4):
        x = upsample_nearest2x(x)
        x = torch.cat([x, skips[-1 - i]])
        x = relu(_conv(x, p, f'dec{i}'))
    return x


def split_network_input(
    rri: RangeResidualImage,
    means: Optional[Sequence[float]] = None,
    stds: Optional[Sequence[float]] = None,
) -> MetaKernelInput:
    '''
    Geometry comes from the raw (r, x, y, z) channels; values are the full
    channel stack, normalized when means/stds are given.
    '''
    if means is not None and stds is not None:
        values = normalize_channels(rri, means, stds)
    else:
        values = rri.channels
    return MetaKernelInput(
        geometry=torch.from_numpy(np.ascontiguousarray(rri.channels[RANGE:BASE_CHANNELS - 1])),
        values=torch.from_numpy(np.ascontiguousarray(values)),
        mask=torch.from_numpy(rri.mask),
    )


def network_forward(
    rri: RangeResidualImage,
    params: BlockParams,
    arch: NetworkArchitecture,
    means: Optional[Sequence[float]] = None,
    stds: Optional[Sequence[float]] = None,
    row_chunk: int = 8,
) -> FeatureMap:
    '''
    Full forward pass.

    Args:
        rri: range residual image with ``arch.in_channels`` channels
        params: network parameters matching ``arch``
        arch: block shapes and ablation switches
        means, stds: channel normalization for r, x, y, z, e

    Returns:
        [num_classes, H, W] float32 logits
    '''
    if rri.channels.shape[0] != arch.in_channels:
        raise ShapeError(f'network expects {arch.in_channels} input channels, got {rri.channels.shape[0]}')
    check_backbone_input(torch.empty((1, *rri.shape)))

    inp = split_network_input(rri, means, stds)
    if arch.use_meta_kernel:
        meta = meta_kernel_forward(inp, MetaKernelParams.from_block_params(params), row_chunk=row_chunk)
    else:
        meta = conv2d(inp.values, params['stem.weight'], params['stem.bias'], padding=1)

    ms = micro_backbone_forward(meta, params)
    if arch.use_fam:
        logits = fam_forward(meta, ms, inp.values[RANGE:RANGE + 1], params, arch.num_classes)
    else:
        logits = conv2d(ms, params['head.weight'], params['head.bias'])
    return logits.float()
