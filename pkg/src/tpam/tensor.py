"""Dense tensor helpers.

Tensors are plain row-major ``numpy.ndarray`` objects; image-like data is laid
out channel first (C, H, W).  The functions here are the small algebra the
model, interpretation and CAM code is written in terms of.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ArgumentError, ShapeError

NORM_EPS = 1e-12


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Copy ``data`` into a C-contiguous array, rejecting empty or non-finite input."""
    t = np.array(data, dtype=dtype, order="C", copy=True)
    if t.ndim == 0:
        t = t.reshape(1)
    if t.size == 0 or any(d < 1 for d in t.shape):
        raise ShapeError(f"every extent must be >= 1, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ArgumentError("tensor contains NaN or Inf")
    return t


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need >= 1 dims, each >= 1")
    return shape


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of elementwise products, accumulated in row-major order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"inner product of shapes {a.shape} and {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def outer_product(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise ArgumentError("outer product needs at least one vector")
    out = None
    for v in vectors:
        v = np.asarray(v)
        if v.ndim != 1:
            raise ShapeError(f"outer product operands must be order-1, got shape {v.shape}")
        out = v.copy() if out is None else np.multiply.outer(out, v)
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product.

    ``b`` may also be one order lower than ``a`` and match its trailing
    dimensions, in which case it is replicated along the leading (channel)
    axis: an H x W mask applied to a C x H x W image.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape == b.shape:
        return a * b
    if b.ndim == a.ndim - 1 and a.shape[1:] == b.shape:
        return a * b[np.newaxis]
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def geometric_rescale(x: np.ndarray, k: int) -> np.ndarray:
    """sign(x) * |x|**(1/k); k=1 returns a copy of x."""
    if int(k) != k or k < 1:
        raise ArgumentError(f"rescale order must be a positive integer, got {k}")
    x = np.asarray(x)
    if k == 1:
        return x.copy()
    return np.sign(x) * np.abs(x) ** (1.0 / k)


def _patch_geometry(shape, patch, step):
    shape = tuple(shape)
    patch = tuple(int(p) for p in patch)
    if len(patch) > len(shape):
        raise ArgumentError(f"patch {patch} has more dims than input {shape}")
    # leading dims not named by the patch (channels) are always fully covered
    lead = len(shape) - len(patch)
    full = shape[:lead] + patch
    if any(p < 1 for p in patch):
        raise ArgumentError(f"patch extents must be >= 1, got {patch}")
    if any(p > s for p, s in zip(full, shape)):
        raise ArgumentError(f"patch {full} larger than input {shape}")
    if np.isscalar(step):
        steps = (int(step),) * len(patch)
    else:
        steps = tuple(int(s) for s in step)
        if len(steps) != len(patch):
            raise ArgumentError(f"need one step per patch dim, got {steps} for {patch}")
    if any(s < 1 for s in steps):
        raise ArgumentError(f"steps must be >= 1, got {steps}")
    counts = tuple((s - p) // st + 1 for s, p, st in zip(shape[lead:], patch, steps))
    return lead, full, steps, counts


def patch_grid(shape, patch, step) -> tuple[int, ...]:
    """Number of patch positions along each spatial dim."""
    return _patch_geometry(shape, patch, step)[3]


def patch_windows(x: np.ndarray, patch, step, batch_dims: int = 0) -> np.ndarray:
    """Strided copy of all patches of ``x``.

    The result has shape ``batch + (P,) + full_patch`` where positions are
    enumerated in row-major order and overrunning positions are dropped.
    """
    x = np.asarray(x)
    batch = x.shape[:batch_dims]
    lead, full, steps, counts = _patch_geometry(x.shape[batch_dims:], patch, step)
    spatial_axes = tuple(range(batch_dims + lead, x.ndim))
    win = np.lib.stride_tricks.sliding_window_view(x, full[lead:], axis=spatial_axes)
    # win: batch + lead + positions(all) + patch ; subsample positions by step
    index = (slice(None),) * (batch_dims + lead) + tuple(
        slice(0, c * st, st) for c, st in zip(counts, steps)
    )
    win = win[index]
    nsp = len(counts)
    # move positions in front of the channel dims: batch + counts + lead + patch
    src = tuple(range(batch_dims + lead, batch_dims + lead + nsp))
    dst = tuple(range(batch_dims, batch_dims + nsp))
    win = np.moveaxis(win, src, dst)
    return np.ascontiguousarray(win).reshape(batch + (int(np.prod(counts)),) + full)


def extract_patches(x: np.ndarray, patch, step) -> list[np.ndarray]:
    return list(patch_windows(x, patch, step))


def normalize_map(m: np.ndarray, mode: str = "max-abs") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if mode == "max-abs":
        return m / (np.max(np.abs(m)) + NORM_EPS)
    if mode == "min-max":
        lo = np.min(m)
        return (m - lo) / (np.max(m) - lo + NORM_EPS)
    raise ArgumentError(f"unknown normalization mode {mode!r}")
