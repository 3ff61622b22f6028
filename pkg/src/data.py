"""
Hermetic dataset layer
Procedural toy shapes with ground-truth masks, the DSV1 container, deterministic batching, PPM export
"""
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .error_reporter import ConfigError, FormatError, ParameterError
from .rng import STREAM_BATCHES, STREAM_DATA, derive_rng
from .unified_logging import get_logger

logger = get_logger(__name__)

DSV1_MAGIC = b'DSV1'
DSV1_VERSION = 1
SHAPES = ('disk', 'square', 'triangle', 'cross')
SPLIT_STREAMS = {'train': 0, 'test': 1, 'val': 2}

SUPERSAMPLE = 2
BASE_SCALE = 0.3
SHAPE_COLOR = (0.85, 0.55, 0.2)
BACKGROUND_COLOR = (0.35, 0.4, 0.45)
TEXTURE_PERIOD = 6.0


@dataclass(frozen=True)
class ToySpec:
    """
    Generator settings; jitter values are ranges around fixed defaults

    position_jitter: max center offset as a fraction of the side
    scale_jitter: relative size change, radius = BASE_SCALE * side * (1 +/- scale_jitter)
    rotation_jitter: max rotation in radians
    color_jitter: max per-channel shift of the shape color
    texture_jitter: fraction of the full phase/orientation range of the background stripes
    """
    n_per_class: int = 500
    classes: Tuple[str, ...] = SHAPES
    image_size: int = 32
    channels: int = 3
    noise: float = 0.05
    texture: float = 0.1
    position_jitter: float = 0.15
    scale_jitter: float = 0.25
    rotation_jitter: float = math.pi
    color_jitter: float = 0.3
    texture_jitter: float = 1.0
    seed: int = 7
    split: str = 'train'
    patch_size: int = 4

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError(f"toy.n_per_class must be >= 1, got {self.n_per_class}")
        if not self.classes or any(kind not in SHAPES for kind in self.classes):
            raise ConfigError(f"toy.classes must be drawn from {SHAPES}, got {self.classes}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"toy.classes has duplicates: {self.classes}")
        if self.image_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"toy.image_size={self.image_size} is not divisible by patch size {self.patch_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"toy.channels must be 1 or 3, got {self.channels}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"toy.noise must lie in [0, 1), got {self.noise}")
        if self.split not in SPLIT_STREAMS:
            raise ConfigError(f"toy.split must be one of {sorted(SPLIT_STREAMS)}, got {self.split!r}")
        if min(self.texture, self.position_jitter, self.scale_jitter, self.rotation_jitter,
               self.color_jitter, self.texture_jitter) < 0:
            raise ConfigError("toy jitter and texture values must be >= 0")


@dataclass(eq=False)
class Dataset:
    """
    Images stored as 8-bit pixels [N, C, H, W]; `images` exposes them in [0, 1]

    Equality compares pixels, labels and class names, i.e. exactly what DSV1 stores.
    """
    pixels: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]
    split: str = 'train'
    masks: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise ConfigError(f"dataset pixels must be uint8 [N,C,H,W], got {self.pixels.dtype} {self.pixels.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.pixels):
            raise ConfigError(f"{len(self.labels)} labels for {len(self.pixels)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError(f"labels must lie in [0, {len(self.class_names)})")

    @classmethod
    def from_images(cls, images: np.ndarray, labels: Sequence[int], class_names: Sequence[str],
                    split: str = 'train', masks: Optional[np.ndarray] = None) -> 'Dataset':
        pixels = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
        return cls(pixels, np.asarray(labels), tuple(class_names), split, masks)

    @property
    def images(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape[1:]

    def __len__(self) -> int:
        return len(self.pixels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.class_names == other.class_names
                and np.array_equal(self.labels, other.labels)
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels))

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        masks = None if self.masks is None else self.masks[indices]
        return Dataset(self.pixels[indices], self.labels[indices], self.class_names, self.split, masks)


# ---------------------------------------------------------------------------
# Toy generator
# ---------------------------------------------------------------------------

def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit-size shape, coordinates in shape frame"""
    if kind == 'disk':
        return u * u + v * v <= 1.0
    if kind == 'square':
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == 'triangle':
        root3 = math.sqrt(3.0)
        return (v >= -0.5) & (root3 * u + v <= 1.0) & (-root3 * u + v <= 1.0)
    if kind == 'cross':
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.3))
    raise ConfigError(f"unknown shape kind {kind!r}")


def render_toy_image(kind: str, spec: ToySpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    One shape on a striped background, with additive Gaussian noise

    Draw order: center offset (2), scale, rotation, color (3), texture phase
    and angle, noise. Shapes running off the canvas are clipped.

    Returns:
        (image [C, S, S] in [0, 1], ground-truth mask [S, S] where coverage >= 0.5)
    """
    side = spec.image_size
    offset = rng.uniform(-spec.position_jitter, spec.position_jitter, size=2) * side
    radius = BASE_SCALE * side * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))
    angle = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
    color = np.clip(np.array(SHAPE_COLOR) + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3), 0.0, 1.0)
    phase = rng.uniform(0.0, 2.0 * math.pi) * spec.texture_jitter
    stripe_angle = rng.uniform(-math.pi, math.pi) * spec.texture_jitter

    # Sub-pixel sample grid
    fine = (np.arange(side * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(fine, fine, indexing='ij')
    cy, cx = side / 2.0 + offset[0], side / 2.0 + offset[1]
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    dy, dx = ys - cy, xs - cx
    u = (cos_a * dx + sin_a * dy) / radius
    v = (-sin_a * dx + cos_a * dy) / radius
    coverage = _inside(kind, u, v).astype(np.float64)
    coverage = coverage.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).mean(axis=(1, 3))

    pix = np.arange(side) + 0.5
    py, px = np.meshgrid(pix, pix, indexing='ij')
    along = px * math.cos(stripe_angle) + py * math.sin(stripe_angle)
    stripes = spec.texture * np.sin(2.0 * math.pi * along / TEXTURE_PERIOD + phase)
    background = np.array(BACKGROUND_COLOR)[:, None, None] + stripes[None]

    image = background * (1.0 - coverage) + color[:, None, None] * coverage
    if spec.channels == 1:
        image = image.mean(axis=0, keepdims=True)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), coverage >= 0.5


def gen_toy(spec: ToySpec) -> Dataset:
    """
    Render n_per_class images per class; image i has class i mod |classes|

    Each image has its own stream keyed by (seed, split, index), so train and
    test splits of one spec never share images.
    """
    n_classes = len(spec.classes)
    total = spec.n_per_class * n_classes
    side = spec.image_size
    images = np.empty((total, spec.channels, side, side))
    masks = np.empty((total, side, side), dtype=bool)
    labels = np.arange(total) % n_classes
    split_stream = SPLIT_STREAMS[spec.split]

    for i in range(total):
        rng = derive_rng(spec.seed, STREAM_DATA, split_stream, i)
        images[i], masks[i] = render_toy_image(spec.classes[labels[i]], spec, rng)

    dataset = Dataset.from_images(images, labels, spec.classes, spec.split, masks)
    logger.info(f"Generated {total} toy images ({spec.split})",
                extra={'classes': list(spec.classes), 'image_size': side, 'seed': spec.seed})
    return dataset


# ---------------------------------------------------------------------------
# DSV1 container
# ---------------------------------------------------------------------------

def encode_dataset(dataset: Dataset) -> bytes:
    n, c, h, w = dataset.pixels.shape
    if len(dataset.class_names) > 0xFFFF:
        raise ConfigError("DSV1 stores class ids as u16; too many classes")
    parts = [DSV1_MAGIC, struct.pack('<6I', DSV1_VERSION, n, c, h, w, len(dataset.class_names))]
    for name in dataset.class_names:
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
    parts.append(np.ascontiguousarray(dataset.pixels).tobytes())
    parts.append(dataset.labels.astype('<u2').tobytes())
    return b''.join(parts)


class _Reader:
    """Cursor over a byte buffer that reports the failing offset"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(
                f"truncated {what}: need {count} bytes, {len(self.data) - self.offset} available",
                self.offset,
            )
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack('<I', self.take(4, what))[0]


def decode_dataset(data: bytes, split: str = 'train') -> Dataset:
    reader = _Reader(data)
    if reader.take(4, 'magic') != DSV1_MAGIC:
        raise FormatError("bad magic, not a DSV1 dataset", 0)
    version_offset = reader.offset
    version = reader.u32('version')
    if version != DSV1_VERSION:
        raise FormatError(f"unsupported DSV1 version {version}", version_offset)

    n, c, h, w = (reader.u32(name) for name in ('N', 'C', 'H', 'W'))
    n_classes = reader.u32('class count')
    names = []
    for index in range(n_classes):
        length = reader.u32(f'class name {index} length')
        start = reader.offset
        try:
            names.append(reader.take(length, f'class name {index}').decode('utf-8'))
        except UnicodeDecodeError as e:
            raise FormatError(f"class name {index} is not UTF-8", start) from e

    payload_offset = reader.offset
    payload_size = n * c * h * w
    needed = payload_size + 2 * n
    available = len(data) - payload_offset
    if available != needed:
        raise FormatError(
            f"header declares N={n} C={c} H={h} W={w} ({needed} payload bytes) but {available} remain",
            payload_offset,
        )
    pixels = np.frombuffer(reader.take(payload_size, 'pixels'), dtype=np.uint8).reshape(n, c, h, w).copy()
    label_offset = reader.offset
    labels = np.frombuffer(reader.take(2 * n, 'labels'), dtype='<u2').astype(np.int64)
    if n and labels.max() >= n_classes:
        raise FormatError(f"label {int(labels.max())} exceeds class count {n_classes}", label_offset)
    return Dataset(pixels, labels, tuple(names), split)


def save_dataset(dataset: Dataset, path: str) -> None:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as handle:
        handle.write(encode_dataset(dataset))
    os.replace(tmp_path, path)
    logger.info(f"Saved {len(dataset)} images to {path}")


def load_dataset(path: str, split: Optional[str] = None) -> Dataset:
    """Split defaults to the file stem when it names a known split, else 'train'"""
    with open(path, 'rb') as handle:
        data = handle.read()
    if split is None:
        stem = os.path.splitext(os.path.basename(path))[0]
        split = stem if stem in SPLIT_STREAMS else 'train'
    return decode_dataset(data, split)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return derive_rng(seed, STREAM_BATCHES, epoch).permutation(n)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int, start: int = 0) -> Iterator[Batch]:
    """
    Shuffled batches for one epoch, final partial batch included

    `start` skips the first batches of the epoch (resuming mid-epoch).
    """
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(dataset), seed, epoch)
    for begin in range(start * batch_size, len(order), batch_size):
        indices = order[begin:begin + batch_size]
        yield Batch(indices, dataset.pixels[indices].astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# PPM export
# ---------------------------------------------------------------------------

def export_ppm(dataset: Dataset, index: int, path: str) -> None:
    """P6 for 3-channel images, P5 for single-channel ones"""
    pixels = dataset.pixels[index]
    c, h, w = pixels.shape
    magic = 'P6' if c == 3 else 'P5'
    if c not in (1, 3):
        raise ConfigError(f"PPM export needs 1 or 3 channels, got {c}")
    with open(path, 'wb') as handle:
        handle.write(f"{magic}\n{w} {h}\n255\n".encode('ascii'))
        handle.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into a uint8 [C, H, W] array"""
    with open(path, 'rb') as handle:
        data = handle.read()

    tokens, offset = [], 0
    while len(tokens) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b'#':
            while offset < len(data) and data[offset:offset + 1] not in (b'\n', b'\r'):
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError("truncated PNM header", offset)
        tokens.append(data[start:offset])
    offset += 1

    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise FormatError(f"unsupported PNM magic {magic!r}", 0)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError("non-numeric PNM header field", 0) from e
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", 0)

    channels = 3 if magic == b'P6' else 1
    size = width * height * channels
    if len(data) - offset < size:
        raise FormatError(f"PNM payload needs {size} bytes, {len(data) - offset} available", offset)
    raster = np.frombuffer(data[offset:offset + size], dtype=np.uint8).reshape(height, width, channels)
    return raster.transpose(2, 0, 1).copy()
