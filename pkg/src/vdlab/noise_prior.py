"""Correlated noise priors over video tensors.

A noise prior draws (b, n_s, c, h, w) tensors whose per-frame marginals are
standard normal while frames are correlated across the n_s axis:

  iid          frames independent
  mixed        frame_i = sqrt(a^2/(1+a^2)) * shared + ind_i,
               ind_i ~ N(0, 1/(1+a^2)); every frame pair has correlation
               a^2/(1+a^2)
  progressive  frame_0 ~ N(0, 1); frame_i = rho * frame_{i-1} + ind_i with
               rho = a/sqrt(1+a^2) and ind_i ~ N(0, 1/(1+a^2)); an AR(1)
               chain with lag-k correlation rho^k
  frozen       one frame drawn and repeated (the a -> inf limit)

where a >= 0 is the correlation strength `alpha`. All kinds keep unit
marginal variance for every frame by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .ndcore import RngStream, check_video_shape, gaussian

KINDS = ("iid", "mixed", "progressive", "frozen")


@dataclass(frozen=True)
class NoiseSpec:
    """Which prior to draw from. `alpha` may be inf for the frozen limit;
    it is ignored by the iid and frozen kinds."""

    kind: str = "iid"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        a = float(self.alpha)
        if math.isnan(a) or a < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")

    def label(self) -> str:
        if self.kind in ("iid", "frozen"):
            return self.kind
        return f"{self.kind}(alpha={self.alpha:g})"


def _scales(alpha: float) -> tuple[float, float]:
    """(correlated component scale, independent component scale)."""
    if math.isinf(alpha):
        return 1.0, 0.0
    return alpha / math.sqrt(1.0 + alpha * alpha), 1.0 / math.sqrt(1.0 + alpha * alpha)


def sample_noise(spec: NoiseSpec, shape, rng: RngStream) -> np.ndarray:
    """Draw one batch of prior noise with shape (b, n_s, c, h, w).

    RNG contract: the stream is forked once per call; the shared component
    (mixed only) is drawn from fork child 0 and the per-frame block from fork
    child 1, as a single (b, n_s, c, h, w) draw consumed in frame-index
    order. Because the two components live on independent child streams, the
    per-frame block is identical across kinds, so at alpha = 0 the mixed and
    progressive kinds return bit-identical output to iid (the zero-scale
    branches short-circuit), and frozen repeats exactly the first iid frame.
    At alpha = inf the independent block is not consumed.
    """
    b, n_s, c, h, w = check_video_shape(shape)
    base = rng.fork()
    shared_stream = base.child(0)
    frames_stream = base.child(1)

    if spec.kind == "frozen":
        one = gaussian(frames_stream, (b, 1, c, h, w))
        return np.ascontiguousarray(np.broadcast_to(one, (b, n_s, c, h, w)))

    if spec.kind == "iid":
        return gaussian(frames_stream, (b, n_s, c, h, w))

    alpha = float(spec.alpha)
    corr_scale, ind_scale = _scales(alpha)

    if spec.kind == "mixed":
        if alpha == 0.0:
            return gaussian(frames_stream, (b, n_s, c, h, w))
        shared = gaussian(shared_stream, (b, 1, c, h, w))
        if ind_scale == 0.0:
            return np.ascontiguousarray(np.broadcast_to(shared, (b, n_s, c, h, w)))
        return corr_scale * shared + ind_scale * gaussian(frames_stream, (b, n_s, c, h, w))

    # progressive
    if alpha == 0.0:
        return gaussian(frames_stream, (b, n_s, c, h, w))
    if ind_scale == 0.0:
        one = gaussian(frames_stream, (b, 1, c, h, w))
        return np.ascontiguousarray(np.broadcast_to(one, (b, n_s, c, h, w)))
    z = gaussian(frames_stream, (b, n_s, c, h, w))
    out = np.empty_like(z)
    out[:, 0] = z[:, 0]
    for i in range(1, n_s):
        out[:, i] = corr_scale * out[:, i - 1] + ind_scale * z[:, i]
    return out


def frame_covariance(spec: NoiseSpec, i: int, j: int) -> float:
    """Closed-form covariance (equals correlation, marginals are unit) between
    frames i and j under `spec`."""
    if i < 0 or j < 0:
        raise ParameterError(f"frame indices must be non-negative, got ({i}, {j})")
    if i == j:
        return 1.0
    if spec.kind == "iid":
        return 0.0
    if spec.kind == "frozen":
        return 1.0
    alpha = float(spec.alpha)
    if spec.kind == "mixed":
        if math.isinf(alpha):
            return 1.0
        return alpha * alpha / (1.0 + alpha * alpha)
    rho, _ = _scales(alpha)
    return rho ** abs(i - j)


def covariance_matrix(spec: NoiseSpec, n_s: int) -> np.ndarray:
    """The full (n_s, n_s) frame correlation matrix implied by `spec`."""
    if n_s <= 0:
        raise ParameterError(f"n_s must be positive, got {n_s}")
    out = np.empty((n_s, n_s), dtype=np.float64)
    for i in range(n_s):
        for j in range(n_s):
            out[i, j] = frame_covariance(spec, i, j)
    return out


def empirical_correlation(noise: np.ndarray) -> np.ndarray:
    """Pearson correlation between frames, pooled over batch and pixels.

    Frame i is flattened across (b, c, h, w) and correlated against frame j
    over those pooled samples. The diagonal is exactly 1. A frame with zero
    pooled variance has no defined correlation and raises.
    """
    if noise.ndim != 5:
        raise ShapeError(f"expected (b, n_s, c, h, w), got {noise.shape}")
    b, n_s, c, h, w = noise.shape
    x = np.ascontiguousarray(noise.transpose(1, 0, 2, 3, 4).reshape(n_s, b * c * h * w))
    x = x - x.mean(axis=1, keepdims=True)
    cov = (x @ x.T) / x.shape[1]
    var = np.diag(cov).copy()
    if np.any(var <= 0):
        bad = int(np.argmax(var <= 0))
        raise DegenerateInputError(f"frame {bad} has zero variance")
    corr = cov / np.sqrt(np.outer(var, var))
    np.fill_diagonal(corr, 1.0)
    return corr
