"""
Separable bicubic resampling (Catmull-Rom, a = -0.5, edge-clamped taps)
Used for positional-table adaptation and for resizing crops
"""
import threading
from typing import Tuple

import numpy as np
from cachetools import LRUCache, cached

from .error_reporter import ConfigError

CUBIC_A = -0.5

_matrix_cache = LRUCache(maxsize=256)
_matrix_lock = threading.RLock()


def cubic_weights(frac: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """
    Weights of the four taps at offsets -1, 0, +1, +2 around floor(u)

    Args:
        frac: fractional part u - floor(u), any shape

    Returns:
        Array with a trailing axis of 4 weights summing to 1
    """
    frac = np.asarray(frac, dtype=np.float64)
    dist = np.stack([1.0 + frac, frac, 1.0 - frac, 2.0 - frac], axis=-1)
    near = dist <= 1.0
    w_near = ((a + 2.0) * dist - (a + 3.0)) * dist * dist + 1.0
    w_far = ((a * dist - 5.0 * a) * dist + 8.0 * a) * dist - 4.0 * a
    return np.where(near, w_near, np.where(dist < 2.0, w_far, 0.0))


def _matrix_from_coords(coords: np.ndarray, n_in: int) -> np.ndarray:
    base = np.floor(coords).astype(np.int64)
    weights = cubic_weights(coords - base)
    matrix = np.zeros((len(coords), n_in), dtype=np.float64)
    rows = np.arange(len(coords))
    for tap in range(4):
        cols = np.clip(base + tap - 1, 0, n_in - 1)
        np.add.at(matrix, (rows, cols), weights[:, tap])
    return matrix


@cached(_matrix_cache, lock=_matrix_lock)
def grid_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Resampling matrix [n_out, n_in] for a field sampled on grid points

    Output point j sits at input coordinate j (n_in - 1) / (n_out - 1), so the
    first and last samples coincide. A single output point sits at the center.
    Equal extents give the identity exactly. The cached array is read-only.
    """
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"grid extents must be positive, got {n_in} -> {n_out}")
    if n_in == n_out:
        matrix = np.eye(n_in, dtype=np.float64)
    else:
        if n_out == 1:
            coords = np.array([(n_in - 1) / 2.0])
        else:
            coords = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
        matrix = _matrix_from_coords(coords, n_in)
    matrix.setflags(write=False)
    return matrix


def area_matrix(n_in: int, start: int, length: int, n_out: int) -> np.ndarray:
    """
    Resampling matrix [n_out, n_in] mapping pixel centers of a window
    [start, start + length) onto n_out output pixels
    """
    if length < 1 or n_out < 1:
        raise ConfigError(f"crop window and output size must be positive, got {length} -> {n_out}")
    coords = start + (np.arange(n_out, dtype=np.float64) + 0.5) * (length / n_out) - 0.5
    return _matrix_from_coords(coords, n_in)


def resize_window(image: np.ndarray, rect: Tuple[int, int, int, int], out_size: int) -> np.ndarray:
    """
    Bicubic resize of the window rect = (top, left, height, width) of a [C, H, W] image

    The result is not clamped; callers working in pixel range clamp it.
    """
    top, left, height, width = rect
    _, h_in, w_in = image.shape
    rows = area_matrix(h_in, top, height, out_size)
    cols = area_matrix(w_in, left, width, out_size)
    out = np.einsum('ai,cij,bj->cab', rows, image.astype(np.float64), cols, optimize=True)
    return out.astype(image.dtype, copy=False)


def clear_cache() -> None:
    with _matrix_lock:
        _matrix_cache.clear()
