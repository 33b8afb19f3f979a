"""Dense tensor operations on float arrays.

Tensors are plain numpy arrays (C-contiguous, float32 or float64). Video
tensors use the fixed axis order (batch, frame, channel, height, width).
These wrappers add the shape/finiteness checking the rest of the package
relies on; heavy lifting is delegated to numpy, whose GEMM kernels compute
each output element with a serial inner loop and therefore give the same
bits at any thread count.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError, SizeError

VIDEO_NDIM = 5


def as_tensor(a, dtype=np.float64) -> np.ndarray:
    """Coerce to a C-contiguous float array, rejecting non-finite input."""
    out = np.ascontiguousarray(a, dtype=dtype)
    if not np.isfinite(out).all():
        raise NumericError("tensor contains non-finite values")
    return out


def check_video_shape(shape) -> tuple[int, int, int, int, int]:
    """Validate a (b, n_s, c, h, w) shape tuple and return it normalized."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != VIDEO_NDIM:
        raise ShapeError(f"expected 5 axes (b, n_s, c, h, w), got {shape}")
    if any(s <= 0 for s in shape):
        raise SizeError(f"non-positive extent in {shape}")
    return shape


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * float(s)


def reduce(a: np.ndarray, op: str, axes=None) -> np.ndarray:
    """Reduce over the given axes (all axes when None) with sum/mean/max.

    numpy's pairwise summation order is fixed for a given shape, so repeated
    calls are bit-identical.
    """
    if axes is not None:
        axes = tuple(int(x) for x in np.atleast_1d(axes))
        for x in axes:
            if not -a.ndim <= x < a.ndim:
                raise ShapeError(f"axis {x} out of range for ndim {a.ndim}")
    if op == "sum":
        return np.sum(a, axis=axes)
    if op == "mean":
        return np.mean(a, axis=axes)
    if op == "max":
        return np.max(a, axis=axes)
    raise ShapeError(f"unknown reduction op {op!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def conv3d(a: np.ndarray, kernel: np.ndarray, padding=(0, 0, 0)) -> np.ndarray:
    """Cross-correlate a video tensor with a (c_out, c_in, k_t, k_h, k_w) kernel.

    `a` has shape (b, n_s, c_in, h, w); zero padding is applied per axis as
    (p_t, p_h, p_w). Covers the degenerate spatial (1, k, k) and temporal
    (k, 1, 1) forms used by the denoiser. Implemented as an im2col GEMM.
    """
    shape = check_video_shape(a.shape)
    b, n_s, c_in, h, w = shape
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must have 5 axes, got {kernel.shape}")
    c_out, kc_in, kt, kh, kw = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"kernel expects {kc_in} input channels, tensor has {c_in}")
    pt, ph, pw = (int(p) for p in padding)
    if min(pt, ph, pw) < 0:
        raise ShapeError("padding must be non-negative")
    ot = n_s + 2 * pt - kt + 1
    oh = h + 2 * ph - kh + 1
    ow = w + 2 * pw - kw + 1
    if min(ot, oh, ow) <= 0:
        raise ShapeError(
            f"kernel {kernel.shape[2:]} with padding {padding} does not fit input {shape}"
        )
    patches = _conv3d_patches(a, (kt, kh, kw), (pt, ph, pw))
    cols = patches.reshape(b * ot * oh * ow, c_in * kt * kh * kw)
    out = cols @ kernel.reshape(c_out, -1).T
    return np.ascontiguousarray(
        out.reshape(b, ot, oh, ow, c_out).transpose(0, 1, 4, 2, 3)
    )


def _conv3d_patches(a: np.ndarray, ksize, padding) -> np.ndarray:
    """Gather sliding-window patches, shape (b, ot, oh, ow, c_in, kt, kh, kw)."""
    b, n_s, c_in, h, w = a.shape
    kt, kh, kw = ksize
    pt, ph, pw = padding
    if pt or ph or pw:
        a = np.pad(a, ((0, 0), (pt, pt), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(a, (kt, kh, kw), axis=(1, 3, 4))
    # win: (b, ot, c_in, oh, ow, kt, kh, kw) -> (b, ot, oh, ow, c_in, kt, kh, kw)
    return win.transpose(0, 1, 3, 4, 2, 5, 6, 7)
