"""
Immutable parameter collections and the network architecture they belong to.

Parameters are named with dotted block paths ("backbone.enc0.weight") and
stored in a pyrsistent map together with the seed that produced them.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch
from pyrsistent import PMap, pmap

from rangeseg.config import PipelineConfig, residual_count
from rangeseg.errors import ShapeError

log = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class BlockParams:
    tensors: PMap
    seed: int

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> Iterator[str]:
        return iter(sorted(self.tensors))

    def set(self, name: str, value: torch.Tensor) -> 'BlockParams':
        if name in self.tensors and tuple(self.tensors[name].shape) != tuple(value.shape):
            raise ShapeError(f'{name}: shape {tuple(value.shape)} does not match {tuple(self.tensors[name].shape)}')
        return BlockParams(self.tensors.set(name, value), self.seed)

    def subset(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        start = prefix + '.'
        return {k[len(start):]: v for k, v in self.tensors.items() if k.startswith(start)}

    def to(self, dtype: torch.dtype) -> 'BlockParams':
        return BlockParams(pmap({k: v.to(dtype) for k, v in self.tensors.items()}), self.seed)

    @classmethod
    def from_dict(cls, tensors: Dict[str, torch.Tensor], seed: int) -> 'BlockParams':
        return cls(pmap(tensors), seed)


def init_lecun_normal(shape: Shape, generator: torch.Generator, scale: float = 1.0,
                      dtype: torch.dtype = torch.float32) -> torch.Tensor:
    '''
    Truncated normal (+-2 sigma) scaled by sqrt(scale / fan_in), fan_in being
    the product of all dimensions but the first.
    '''
    def truncated_normal(uniform, mu=0.0, sigma=1.0, a=-2, b=2):
        normal = torch.distributions.normal.Normal(0, 1)

        alpha = (a - mu) / sigma
        beta = (b - mu) / sigma

        alpha_normal_cdf = normal.cdf(torch.tensor(alpha))
        p = alpha_normal_cdf + (normal.cdf(torch.tensor(beta)) - alpha_normal_cdf) * uniform

        v = torch.clamp(2 * p - 1, -1 + 1e-8, 1 - 1e-8)
        x = mu + sigma * np.sqrt(2) * torch.erfinv(v)
        return torch.clamp(x, a, b)

    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    stddev = np.sqrt(scale / fan_in) / .87962566103423978
    uniform = torch.rand(shape, generator=generator, dtype=torch.float64)
    return (stddev * truncated_normal(uniform)).to(dtype)


def init_bias(shape: Shape, generator: torch.Generator, scale: float = 0.1,
              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Small uniform biases in [-scale, scale]."""
    return ((torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * scale).to(dtype)


@dataclass(frozen=True)
class NetworkArchitecture:
    '''
    Shapes of every block of the network.

    in_channels is 5 + residual count + 1 (9 by default, 6 without residuals).
    '''

    in_channels: int = 9
    num_classes: int = 25
    mlp_hidden: int = 16
    meta_channels: int = 32
    encoder_channels: Tuple[int, ...] = (32, 64, 128, 256)
    decoder_channels: Tuple[int, ...] = (128, 64, 32, 32)
    context_channels: int = 32
    use_meta_kernel: bool = True
    use_fam: bool = True

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ShapeError('the backbone has four encoder and four decoder stages')
        if self.in_channels < 6:
            raise ShapeError(f'network input needs at least 6 channels, got {self.in_channels}')

    @property
    def backbone_channels(self) -> int:
        return self.decoder_channels[-1]

    @classmethod
    def from_config(cls, conf: PipelineConfig, num_classes: int) -> 'NetworkArchitecture':
        net = conf.network
        return cls(
            in_channels=5 + residual_count(conf) + 1,
            num_classes=num_classes,
            mlp_hidden=int(net.meta_kernel.hidden),
            meta_channels=int(net.meta_kernel.out_channels),
            encoder_channels=tuple(int(c) for c in net.backbone.encoder_channels),
            decoder_channels=tuple(int(c) for c in net.backbone.decoder_channels),
            context_channels=int(net.context.channels),
            use_meta_kernel=bool(net.use_meta_kernel),
            use_fam=bool(net.use_fam),
        )

    def parameter_shapes(self) -> 'OrderedDict[str, Shape]':
        """Every parameter name and shape, in checkpoint order."""
        shapes: 'OrderedDict[str, Shape]' = OrderedDict()
        c_in, c_meta = self.in_channels, self.meta_channels

        if self.use_meta_kernel:
            shapes['meta_kernel.mlp.0.weight'] = (self.mlp_hidden, 4)
            shapes['meta_kernel.mlp.0.bias'] = (self.mlp_hidden,)
            shapes['meta_kernel.mlp.1.weight'] = (c_in, self.mlp_hidden)
            shapes['meta_kernel.mlp.1.bias'] = (c_in,)
            shapes['meta_kernel.aggregator.weight'] = (c_meta, 25 * c_in)
            shapes['meta_kernel.aggregator.bias'] = (c_meta,)
        else:
            shapes['stem.weight'] = (c_meta, c_in, 3, 3)
            shapes['stem.bias'] = (c_meta,)

        prev = c_meta
        for i, c in enumerate(self.encoder_channels):
            shapes[f'backbone.enc{i}.weight'] = (c, prev, 3, 3)
            shapes[f'backbone.enc{i}.bias'] = (c,)
            prev = c
        for i, c in enumerate(self.decoder_channels):
            skip = self.encoder_channels[-1 - i]
            shapes[f'backbone.dec{i}.weight'] = (c, prev + skip, 3, 3)
            shapes[f'backbone.dec{i}.bias'] = (c,)
            prev = c

        c_ms = self.backbone_channels
        if self.use_fam:
            c_ctx = self.context_channels
            shapes['context.conv0.weight'] = (c_ctx, 1, 3, 3)
            shapes['context.conv0.bias'] = (c_ctx,)
            shapes['context.conv1.weight'] = (c_ctx, c_ctx, 3, 3)
            shapes['context.conv1.bias'] = (c_ctx,)
            shapes['fusion.gate.weight'] = (c_ms, c_ctx, 1, 1)
            shapes['fusion.gate.bias'] = (c_ms,)
            shapes['fusion.proj.weight'] = (c_ms, c_ctx, 1, 1)
            shapes['fusion.proj.bias'] = (c_ms,)
            shapes['fam.conv.weight'] = (c_ms, c_meta + c_ms, 3, 3)
            shapes['fam.conv.bias'] = (c_ms,)
            shapes['fam.residual.weight'] = (c_ms, c_meta + c_ms, 1, 1)
            shapes['fam.residual.bias'] = (c_ms,)
            shapes['fam.head.weight'] = (self.num_classes, c_ms, 1, 1)
            shapes['fam.head.bias'] = (self.num_classes,)
        else:
            shapes['head.weight'] = (self.num_classes, c_ms, 1, 1)
            shapes['head.bias'] = (self.num_classes,)
        return shapes


def init_params(shapes: Dict[str, Shape], seed: int, dtype: torch.dtype = torch.float32) -> BlockParams:
    """Seeded parameters for the given shapes; weights lecun-normal, biases small uniform."""
    generator = torch.Generator().manual_seed(int(seed))
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith('bias'):
            tensors[name] = init_bias(shape, generator, dtype=dtype)
        else:
            tensors[name] = init_lecun_normal(shape, generator, dtype=dtype)
    return BlockParams.from_dict(tensors, int(seed))


def init_network_params(arch: NetworkArchitecture, seed: int,
                        dtype: torch.dtype = torch.float32) -> BlockParams:
    return init_params(arch.parameter_shapes(), seed, dtype)


def zero_params(shapes: Dict[str, Shape], seed: int = 0, dtype: Optional[torch.dtype] = torch.float32) -> BlockParams:
    return BlockParams.from_dict({k: torch.zeros(s, dtype=dtype) for k, s in shapes.items()}, seed)
