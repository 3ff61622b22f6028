"""
DCK1 checkpoint container
Config snapshot plus named little-endian arrays; files are written once and renamed into place
"""
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from .error_reporter import ContractError, FormatError
from .unified_logging import get_logger
from .vit import ParamSet

logger = get_logger(__name__)

DCK1_MAGIC = b'DCK1'
DCK1_VERSION = 1

DTYPE_TAGS = {
    0: np.dtype('<f4'),
    1: np.dtype('<f8'),
    2: np.dtype('<i8'),
    3: np.dtype('u1'),
}

STUDENT_PREFIX = 'student.'
TEACHER_PREFIX = 'teacher.'
OPTIM_PREFIX = 'optim.'


@dataclass
class Checkpoint:
    """
    Everything needed to continue a run bit-exactly

    Random streams are keyed by (seed, step, sample id), so the rng state is
    the key itself and is stored as `rng.key`.
    """
    config_text: str
    step: int
    epoch: int
    student: ParamSet
    teacher: ParamSet
    center: np.ndarray
    optimizer: Dict[str, np.ndarray]
    rng_key: Tuple[int, ...] = ()
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = DCK1_VERSION

    def arrays(self) -> Dict[str, np.ndarray]:
        named = {
            'meta.step': np.array([self.step], dtype=np.int64),
            'meta.epoch': np.array([self.epoch], dtype=np.int64),
            'rng.key': np.array(self.rng_key, dtype=np.int64),
            'center': self.center,
        }
        named.update({STUDENT_PREFIX + k: v for k, v in self.student.arrays().items()})
        named.update({TEACHER_PREFIX + k: v for k, v in self.teacher.arrays().items()})
        named.update(self.optimizer)
        named.update({f'extra.{k}': v for k, v in self.extras.items()})
        return named

    @classmethod
    def from_arrays(cls, config_text: str, named: Dict[str, np.ndarray], version: int) -> 'Checkpoint':
        try:
            step = int(named['meta.step'][0])
            epoch = int(named['meta.epoch'][0])
            rng_key = tuple(int(v) for v in named['rng.key'])
            center = named['center']
        except KeyError as e:
            raise FormatError(f"checkpoint is missing required array {e}") from e

        def section(prefix: str) -> Dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in named.items() if k.startswith(prefix)}

        return cls(
            config_text=config_text, step=step, epoch=epoch,
            student=ParamSet.from_arrays(section(STUDENT_PREFIX), requires_grad=True),
            teacher=ParamSet.from_arrays(section(TEACHER_PREFIX), requires_grad=False),
            center=center,
            optimizer={k: v for k, v in named.items() if k.startswith(OPTIM_PREFIX)},
            rng_key=rng_key, extras=section('extra.'), version=version,
        )


def _tag_for(array: np.ndarray) -> int:
    for tag, dtype in DTYPE_TAGS.items():
        if array.dtype.kind == dtype.kind and array.dtype.itemsize == dtype.itemsize:
            return tag
    raise ContractError(f"checkpoint cannot store dtype {array.dtype}")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config = checkpoint.config_text.encode('utf-8')
    parts = [DCK1_MAGIC, struct.pack('<II', checkpoint.version, len(config)), config]
    for name, array in checkpoint.arrays().items():
        array = np.asarray(array)
        tag = _tag_for(array)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<BI', tag, array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes())
    return b''.join(parts)


def _iter_arrays(data: bytes, offset: int) -> Iterator[Tuple[str, np.ndarray]]:
    def need(count: int, what: str) -> None:
        if offset + count > len(data):
            raise FormatError(f"truncated {what}: need {count} bytes, {len(data) - offset} available", offset)

    while offset < len(data):
        need(4, 'array name length')
        (name_len,) = struct.unpack_from('<I', data, offset)
        offset += 4
        need(name_len, 'array name')
        try:
            name = data[offset:offset + name_len].decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError("array name is not UTF-8", offset) from e
        offset += name_len

        need(5, f'header of {name}')
        tag, rank = struct.unpack_from('<BI', data, offset)
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} for {name}", offset)
        offset += 5
        need(4 * rank, f'dims of {name}')
        shape = struct.unpack_from(f'<{rank}I', data, offset)
        offset += 4 * rank

        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(size, f'data of {name}')
        array = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=offset)
        offset += size
        yield name, array.reshape(shape).astype(dtype.newbyteorder('='), copy=True)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != DCK1_MAGIC:
        raise FormatError("bad magic, not a DCK1 checkpoint", 0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", len(data))
    version, config_len = struct.unpack_from('<II', data, 4)
    if version != DCK1_VERSION:
        raise FormatError(f"unsupported DCK1 version {version}", 4)
    if 12 + config_len > len(data):
        raise FormatError(f"config text needs {config_len} bytes, {len(data) - 12} available", 12)
    try:
        config_text = data[12:12 + config_len].decode('utf-8')
    except UnicodeDecodeError as e:
        raise FormatError("config text is not UTF-8", 12) from e

    named: Dict[str, np.ndarray] = {}
    for name, array in _iter_arrays(data, 12 + config_len):
        if name in named:
            raise FormatError(f"array {name} appears twice")
        named[name] = array
    return Checkpoint.from_arrays(config_text, named, version)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    """Write to a temporary file and rename, so readers never see a partial checkpoint"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as handle:
        handle.write(encode_checkpoint(checkpoint))
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint at step {checkpoint.step} to {path}",
                extra={'step': checkpoint.step, 'epoch': checkpoint.epoch})
    return path


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as handle:
        return decode_checkpoint(handle.read())
