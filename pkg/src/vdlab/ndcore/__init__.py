"""Numeric core: tensors, counter-based RNG, and the PTNS container."""

from .ops import (
    VIDEO_NDIM,
    add,
    as_tensor,
    check_video_shape,
    conv3d,
    matmul,
    mul,
    reduce,
    scale,
    sub,
)
from .ptns import read_ptns, write_ptns
from .rng import RngStream, gaussian, uniform

__all__ = [
    "VIDEO_NDIM",
    "RngStream",
    "add",
    "as_tensor",
    "check_video_shape",
    "conv3d",
    "gaussian",
    "matmul",
    "mul",
    "read_ptns",
    "reduce",
    "scale",
    "sub",
    "uniform",
    "write_ptns",
]
