"""
Multi-crop view generation
Two global crops plus n local crops per image, each with flip, color jitter, blur and solarization
"""
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .error_reporter import ConfigError
from .resample import resize_window
from .rng import STREAM_VIEWS, derive_rng

MAX_CROP_ATTEMPTS = 10
BLUR_TRUNCATE = 2.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ViewConfig:
    """Crop geometry and augmentation probabilities; defaults follow the BYOL recipe at toy size"""
    n_local: int = 6
    global_size: int = 32
    local_size: int = 16
    scale_split: float = 0.3
    local_min_scale: float = 0.05
    ratio_min: float = 3.0 / 4.0
    ratio_max: float = 4.0 / 3.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    blur_prob_global1: float = 1.0
    blur_prob_global2: float = 0.1
    blur_prob_local: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0
    solarize_prob_global2: float = 0.2
    solarize_threshold: float = 0.5

    def __post_init__(self):
        if self.n_local < 0:
            raise ConfigError(f"views.n_local must be >= 0, got {self.n_local}")
        if self.global_size < 1 or self.local_size < 1:
            raise ConfigError("views.global_size and views.local_size must be >= 1")
        if not self.local_min_scale < self.scale_split < 1.0:
            raise ConfigError(
                f"views.scale_split must lie in ({self.local_min_scale}, 1), got {self.scale_split}"
            )
        if not 0 < self.ratio_min <= self.ratio_max:
            raise ConfigError(f"views ratio range ({self.ratio_min}, {self.ratio_max}) is invalid")
        probs = (self.flip_prob, self.jitter_prob, self.blur_prob_global1, self.blur_prob_global2,
                 self.blur_prob_local, self.solarize_prob_global2)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("views probabilities must lie in [0, 1]")
        if not 0 < self.blur_sigma_min <= self.blur_sigma_max:
            raise ConfigError("views blur sigma range is invalid")

    @property
    def global_scale(self) -> Tuple[float, float]:
        return (self.scale_split, 1.0)

    @property
    def local_scale(self) -> Tuple[float, float]:
        return (self.local_min_scale, self.scale_split)

    @property
    def ratio_range(self) -> Tuple[float, float]:
        return (self.ratio_min, self.ratio_max)

    @property
    def jitter_strengths(self) -> Tuple[float, float, float]:
        return (self.brightness, self.contrast, self.saturation)

    @property
    def n_views(self) -> int:
        return 2 + self.n_local

    def check_patch_size(self, patch_size: int) -> None:
        for name, size in (('global_size', self.global_size), ('local_size', self.local_size)):
            if size % patch_size:
                raise ConfigError(f"views.{name}={size} is not divisible by patch size {patch_size}")


class CropRect(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width


class ViewMeta(NamedTuple):
    kind: str
    rect: CropRect
    flipped: bool


@dataclass
class ViewSet:
    """Views of one image; slots 0 and 1 are the global crops"""
    globals: List[np.ndarray]
    locals: List[np.ndarray]
    meta: List[ViewMeta]

    @property
    def views(self) -> List[np.ndarray]:
        return self.globals + self.locals

    def __len__(self) -> int:
        return len(self.globals) + len(self.locals)


@dataclass
class BatchViews:
    """Views of a batch grouped by slot: slots[v] is [B, C, s, s] for view index v"""
    slots: List[np.ndarray]
    view_sets: List[ViewSet]

    @property
    def n_views(self) -> int:
        return len(self.slots)


def sample_crop_rect(height: int, width: int, scale_range: Tuple[float, float],
                     ratio_range: Tuple[float, float], rng: np.random.Generator) -> CropRect:
    """
    Random rect with area fraction ~ U(scale_range) and log-uniform aspect ratio

    After MAX_CROP_ATTEMPTS misfits a center crop clipped to the ratio range is used.
    """
    area = height * width
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])

    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return CropRect(top, left, h, w)

    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w = width
        h = int(round(w / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        h = height
        w = int(round(h * ratio_range[1]))
    else:
        w, h = width, height
    return CropRect((height - h) // 2, (width - w) // 2, h, w)


def random_resized_crop(image: np.ndarray, scale_range: Tuple[float, float],
                        ratio_range: Tuple[float, float], out_size: int,
                        rng: np.random.Generator) -> Tuple[np.ndarray, CropRect]:
    """Crop a random rect of a [C, H, W] image and resize it bicubically to out_size x out_size"""
    if out_size < 1:
        raise ConfigError(f"crop output size must be >= 1, got {out_size}")
    rect = sample_crop_rect(image.shape[1], image.shape[2], scale_range, ratio_range, rng)
    return np.clip(resize_window(image, rect, out_size), 0.0, 1.0), rect


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def _grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, image, axes=(0, 0))[None]
    return image.mean(axis=0, keepdims=True)


def color_jitter(image: np.ndarray, strengths: Tuple[float, float, float],
                 rng: np.random.Generator) -> np.ndarray:
    """
    Brightness, then contrast, then saturation, each by a factor ~ U(max(0, 1 - s), 1 + s)
    and clamped to [0, 1] after every stage
    """
    brightness, contrast, saturation = strengths
    factors = [rng.uniform(max(0.0, 1.0 - s), 1.0 + s) for s in (brightness, contrast, saturation)]

    out = np.clip(image * factors[0], 0.0, 1.0)
    mean = _grayscale(out).mean()
    out = np.clip(factors[1] * out + (1.0 - factors[1]) * mean, 0.0, 1.0)
    gray = _grayscale(out)
    return np.clip(factors[2] * out + (1.0 - factors[2]) * gray, 0.0, 1.0)


def gaussian_blur(image: np.ndarray, sigma: Union[float, Tuple[float, float]],
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Per-channel Gaussian blur, kernel truncated at 2 sigma, edges clamped

    A (lo, hi) sigma is drawn uniformly from `rng`.
    """
    if isinstance(sigma, tuple):
        sigma = rng.uniform(sigma[0], sigma[1])
    out = gaussian_filter(image, sigma=(0.0, sigma, sigma), truncate=BLUR_TRUNCATE, mode='nearest')
    return np.clip(out, 0.0, 1.0)


def solarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(image >= threshold, 1.0 - image, image)


def _augment(image: np.ndarray, kind: str, scale_range, out_size: int, blur_prob: float,
             solarize_prob: float, config: ViewConfig, rng: np.random.Generator):
    # Draw order: crop, flip, jitter, blur, solarize
    view, rect = random_resized_crop(image, scale_range, config.ratio_range, out_size, rng)

    flipped = bool(rng.random() < config.flip_prob)
    if flipped:
        view = hflip(view)

    if rng.random() < config.jitter_prob:
        view = color_jitter(view, config.jitter_strengths, rng)

    if rng.random() < blur_prob:
        view = gaussian_blur(view, (config.blur_sigma_min, config.blur_sigma_max), rng)

    if rng.random() < solarize_prob:
        view = solarize(view, config.solarize_threshold)

    return view, ViewMeta(kind, rect, flipped)


def make_views(image: np.ndarray, config: ViewConfig, rng: np.random.Generator) -> ViewSet:
    """
    Global crop 1, global crop 2, then the local crops, all drawn from `rng` in that order

    Args:
        image: [C, H, W] with values in [0, 1]
    """
    image = np.asarray(image, dtype=np.float64)
    plans = [
        ('global', config.global_scale, config.global_size, config.blur_prob_global1, 0.0),
        ('global', config.global_scale, config.global_size, config.blur_prob_global2,
         config.solarize_prob_global2),
    ] + [('local', config.local_scale, config.local_size, config.blur_prob_local, 0.0)] * config.n_local

    globals_, locals_, meta = [], [], []
    for kind, scale_range, size, blur_prob, solarize_prob in plans:
        view, info = _augment(image, kind, scale_range, size, blur_prob, solarize_prob, config, rng)
        (globals_ if kind == 'global' else locals_).append(view)
        meta.append(info)
    return ViewSet(globals_, locals_, meta)


def make_batch_views(images: np.ndarray, sample_ids: Sequence[int], config: ViewConfig,
                     seed: int, step: int) -> BatchViews:
    """
    Views for a batch, one independent stream per (seed, step, sample id)

    The result does not depend on batch composition or order of generation.
    """
    view_sets = [
        make_views(image, config, derive_rng(seed, STREAM_VIEWS, step, int(sample_id)))
        for image, sample_id in zip(images, sample_ids)
    ]
    slots = [np.stack([vs.views[v] for vs in view_sets]) for v in range(config.n_views)]
    return BatchViews(slots, view_sets)
