'''
    The "MRSK" checkpoint: named float32 parameter blocks behind a small
    section table. All multi-byte fields are little-endian.

        magic "MRSK" | u32 version | u64 seed | u32 section count
        per section:   u32 name length | UTF-8 name | u32 ndim | ndim x u32 dims
        then the float32 payload of every section, in table order
'''

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from rangeseg.errors import CheckpointError
from rangeseg.network.params import BlockParams, Shape

log = logging.getLogger(__name__)

MAGIC = b'MRSK'
VERSION = 1


class _Reader():
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f'{self.path}: truncated at byte {self.pos}')
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), dtype='<u4')[0])

    def u64(self) -> int:
        return int(np.frombuffer(self.take(8), dtype='<u8')[0])


def write_checkpoint(params: BlockParams, path: Union[str, Path],
                     order: Optional[Dict[str, Shape]] = None) -> None:
    '''
        Write every tensor of ``params``. ``order`` (typically the
        architecture's parameter shapes) fixes the section order; otherwise
        names are sorted.
    '''
    names = list(order) if order is not None else list(params.names())
    header = [MAGIC, np.array([VERSION], dtype='<u4').tobytes(),
              np.array([params.seed], dtype='<u8').tobytes(),
              np.array([len(names)], dtype='<u4').tobytes()]
    payload = []
    for name in names:
        tensor = params[name].detach().cpu()
        encoded = name.encode('utf-8')
        header.append(np.array([len(encoded)], dtype='<u4').tobytes())
        header.append(encoded)
        header.append(np.array([tensor.dim(), *tensor.shape], dtype='<u4').tobytes())
        payload.append(tensor.numpy().astype('<f4').tobytes())
    Path(path).write_bytes(b''.join(header + payload))


def read_sections(path: Union[str, Path]) -> Tuple[int, 'OrderedDict[str, np.ndarray]']:
    '''
        Parse a checkpoint into its seed and named float32 arrays.
    '''
    path = str(path)
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f'{path}: bad magic, not a checkpoint')
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f'{path}: unsupported checkpoint version {version}')
    seed = reader.u64()
    n_sections = reader.u32()

    table = []
    for _ in range(n_sections):
        try:
            name = reader.take(reader.u32()).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(f'{path}: section name is not UTF-8') from e
        ndim = reader.u32()
        dims = tuple(reader.u32() for _ in range(ndim))
        table.append((name, dims))

    sections = OrderedDict()
    for name, dims in table:
        if name in sections:
            raise CheckpointError(f'{path}: duplicate section {name}')
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(dims)
        sections[name] = data.astype(np.float32)

    if reader.pos != len(reader.raw):
        raise CheckpointError(f'{path}: {len(reader.raw) - reader.pos} trailing bytes')
    return seed, sections


def read_checkpoint(path: Union[str, Path], expected: Dict[str, Shape]) -> BlockParams:
    '''
        Load a checkpoint and check it against the expected architecture.

        Raises:
            CheckpointError: missing or unknown sections, or a shape mismatch
    '''
    seed, sections = read_sections(path)

    missing = [n for n in expected if n not in sections]
    unknown = [n for n in sections if n not in expected]
    if missing:
        raise CheckpointError(f'{path}: missing sections {missing}')
    if unknown:
        raise CheckpointError(f'{path}: unknown sections {unknown}')
    for name, shape in expected.items():
        if tuple(sections[name].shape) != tuple(shape):
            raise CheckpointError(
                f'{path}: section {name} has shape {tuple(sections[name].shape)}, expected {tuple(shape)}'
            )

    log.debug(f'loaded {len(sections)} sections from {path} (seed {seed})')
    return BlockParams.from_dict({n: torch.from_numpy(a.copy()) for n, a in sections.items()}, seed)
