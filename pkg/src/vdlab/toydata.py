"""Procedural video datasets with class-labelled motion.

Three families, all rendered into [-1, 1] with smooth sub-pixel motion so
any nonzero velocity changes pixel values between frames:

  bouncing_ball      a Gaussian blob bouncing elastically in the frame box
  moving_bars        a soft bar translating with wraparound
  drifting_gradient  a sinusoidal field whose phase drifts over time

Class labels partition motion direction (and bucket speed variation), so a
conditional model has real signal. Initial positions/phases are uniform and
the dynamics preserve that distribution, making per-frame statistics
independent of the frame index.

Determinism: video i of a dataset is a pure function of (spec, i). The
generator stream is RngStream(spec.seed, stream_id=1); video i draws
u = uniform(stream.child(i), (4,)) and uses the components as:

  bouncing_ball      u0 direction jitter, u1 speed jitter, u2/u3 start position
  moving_bars        u0 (unused), u1 speed jitter, u2 start phase
  drifting_gradient  u0 direction jitter, u1 speed jitter, u2 start phase

Labels are assigned round-robin: label(i) = i % class_count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, StateError
from .ndcore import RngStream, read_ptns, uniform, write_ptns

KINDS = ("bouncing_ball", "moving_bars", "drifting_gradient")
DATA_STREAM = 1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "bouncing_ball"
    n_videos: int = 48
    n_s: int = 8
    h: int = 16
    w: int = 16
    channels: int = 1
    motion_scale: float = 1.0
    class_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown dataset kind {self.kind!r}")
        if self.n_videos < 0:
            raise ParameterError("n_videos must be >= 0")
        if self.n_s <= 0 or self.channels <= 0:
            raise ParameterError("n_s and channels must be positive")
        if self.h < 4 or self.w < 4:
            raise ParameterError(f"resolution {self.h}x{self.w} too small to render")
        if self.motion_scale < 0:
            raise ParameterError("motion_scale must be >= 0")
        if self.class_count < 1:
            raise ParameterError("class_count must be >= 1")

    def content_hash(self) -> str:
        txt = "|".join(
            f"{k}={getattr(self, k)}"
            for k in ("kind", "n_videos", "n_s", "h", "w", "channels", "motion_scale", "class_count", "seed")
        )
        return hashlib.sha256(txt.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    spec: DatasetSpec
    videos: np.ndarray  # (n, n_s, c, h, w) float64 in [-1, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.videos.shape[0]


@dataclass
class Batch:
    videos: np.ndarray | None
    video_labels: np.ndarray | None
    images: np.ndarray | None  # (b_img, 1, c, h, w)
    image_labels: np.ndarray | None


# ---------------------------------------------------------------------------
# motion parameters


def _bucket_angle(label: int, class_count: int, jitter_u: float) -> float:
    width = 2.0 * math.pi / class_count
    return width * (label + 0.5) + width * 0.5 * (jitter_u - 0.5)


def video_params(spec: DatasetSpec, index: int) -> dict:
    """Per-video motion parameters; pure in (spec, index)."""
    if not 0 <= index:
        raise ParameterError("index must be non-negative")
    label = index % spec.class_count
    u = uniform(RngStream(spec.seed, DATA_STREAM).child(index), (4,))
    size = min(spec.h, spec.w)
    if spec.kind == "bouncing_ball":
        radius = 0.16 * size
        angle = _bucket_angle(label, spec.class_count, u[0])
        speed = 0.11 * size * spec.motion_scale * (0.75 + 0.5 * u[1])
        lo_y, hi_y = radius, spec.h - 1 - radius
        lo_x, hi_x = radius, spec.w - 1 - radius
        pos0 = np.array(
            [lo_y + u[2] * (hi_y - lo_y), lo_x + u[3] * (hi_x - lo_x)]
        )
        vel = speed * np.array([math.sin(angle), math.cos(angle)])
        return {"label": label, "radius": radius, "pos0": pos0, "vel": vel}
    if spec.kind == "moving_bars":
        horizontal = label % 2 == 1
        direction = 1.0 if (label // 2) % 2 == 0 else -1.0
        length = spec.h if horizontal else spec.w
        speed = direction * 0.13 * length * spec.motion_scale * (0.75 + 0.5 * u[1])
        phase0 = u[2] * length
        return {"label": label, "horizontal": horizontal, "speed": speed, "phase0": phase0}
    # drifting_gradient
    angle = _bucket_angle(label, spec.class_count, u[0])
    omega = 2.0 * math.pi * 0.14 * spec.motion_scale * (0.75 + 0.5 * u[1])
    if label // 2 % 2 == 1:
        omega = -omega
    phase0 = u[2] * 2.0 * math.pi
    return {"label": label, "angle": angle, "omega": omega, "phase0": phase0}


def _fold(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect positions into [lo, hi] (triangular fold; exact for constant
    velocity, equivalent to elastic bouncing)."""
    span = hi - lo
    q = np.mod(p - lo, 2.0 * span)
    return lo + (span - np.abs(q - span))


def ball_trajectory(spec: DatasetSpec, index: int) -> np.ndarray:
    """(n_s, 2) ball centers (y, x) for one bouncing_ball video."""
    if spec.kind != "bouncing_ball":
        raise ParameterError("trajectories exist for bouncing_ball only")
    p = video_params(spec, index)
    t = np.arange(spec.n_s, dtype=np.float64)[:, None]
    raw = p["pos0"][None, :] + t * p["vel"][None, :]
    out = np.empty_like(raw)
    out[:, 0] = _fold(raw[:, 0], p["radius"], spec.h - 1 - p["radius"])
    out[:, 1] = _fold(raw[:, 1], p["radius"], spec.w - 1 - p["radius"])
    return out


# ---------------------------------------------------------------------------
# rendering


def _render_video(spec: DatasetSpec, index: int) -> np.ndarray:
    p = video_params(spec, index)
    yy, xx = np.meshgrid(
        np.arange(spec.h, dtype=np.float64), np.arange(spec.w, dtype=np.float64), indexing="ij"
    )
    frames = np.empty((spec.n_s, spec.h, spec.w))
    if spec.kind == "bouncing_ball":
        centers = ball_trajectory(spec, index)
        sr = p["radius"] / 1.5
        for t in range(spec.n_s):
            d2 = (yy - centers[t, 0]) ** 2 + (xx - centers[t, 1]) ** 2
            frames[t] = 1.05 * np.exp(-d2 / (2.0 * sr * sr)) - 0.05
    elif spec.kind == "moving_bars":
        length = spec.h if p["horizontal"] else spec.w
        axis = yy if p["horizontal"] else xx
        width = 0.09 * length
        for t in range(spec.n_s):
            center = p["phase0"] + p["speed"] * t
            d = axis - center
            d = d - length * np.round(d / length)  # nearest wrapped distance
            frames[t] = 1.1 * np.exp(-(d * d) / (2.0 * width * width)) - 0.25
    else:
        ky = math.sin(p["angle"]) * 2.0 * math.pi / spec.h
        kx = math.cos(p["angle"]) * 2.0 * math.pi / spec.w
        for t in range(spec.n_s):
            frames[t] = 0.7 * np.sin(ky * yy + kx * xx + p["phase0"] + p["omega"] * t)
    video = np.repeat(frames[:, None, :, :], spec.channels, axis=1)
    if spec.channels > 1:
        # stagger channel amplitudes so channels are not exact copies
        scales = 1.0 - 0.1 * np.arange(spec.channels)
        video = video * scales[None, :, None, None]
    return np.clip(video, -1.0, 1.0)


def generate(spec: DatasetSpec) -> Dataset:
    """Render the full dataset; video i is a pure function of (spec, i)."""
    videos = np.empty((spec.n_videos, spec.n_s, spec.channels, spec.h, spec.w))
    labels = np.empty(spec.n_videos, dtype=np.int64)
    for i in range(spec.n_videos):
        videos[i] = _render_video(spec, i)
        labels[i] = i % spec.class_count
    return Dataset(spec=spec, videos=videos, labels=labels)


# ---------------------------------------------------------------------------
# batching


def next_batch(dataset: Dataset, rng: RngStream, b: int, b_img: int) -> Batch:
    """Uniformly sample b whole videos and b_img single frames.

    Consumption order: one uniform draw of shape (b,) for video indices, then
    (b_img,) for image-source videos, then (b_img,) for frame indices. Zero
    counts skip their draws and yield None fields.
    """
    if len(dataset) == 0:
        raise StateError("next_batch on an empty dataset")
    if b < 0 or b_img < 0:
        raise ParameterError("batch sizes must be >= 0")
    n = len(dataset)
    videos = video_labels = images = image_labels = None
    if b > 0:
        idx = np.minimum((uniform(rng, (b,)) * n).astype(np.int64), n - 1)
        videos = dataset.videos[idx]
        video_labels = dataset.labels[idx]
    if b_img > 0:
        vidx = np.minimum((uniform(rng, (b_img,)) * n).astype(np.int64), n - 1)
        fidx = np.minimum(
            (uniform(rng, (b_img,)) * dataset.spec.n_s).astype(np.int64), dataset.spec.n_s - 1
        )
        images = dataset.videos[vidx, fidx][:, None]
        image_labels = dataset.labels[vidx]
    return Batch(videos, video_labels, images, image_labels)


# ---------------------------------------------------------------------------
# on-disk form: one PTNS per video plus a text index


def export_dataset(dataset: Dataset, folder) -> None:
    root = Path(folder)
    root.mkdir(parents=True, exist_ok=True)
    s = dataset.spec
    head = [
        f"spec_hash = {s.content_hash()}",
        f"kind = {s.kind}", f"n_videos = {len(dataset)}", f"n_s = {s.n_s}",
        f"h = {s.h}", f"w = {s.w}", f"channels = {s.channels}",
        f"motion_scale = {s.motion_scale!r}", f"class_count = {s.class_count}",
        f"seed = {s.seed}", "",
    ]
    rows = []
    for i in range(len(dataset)):
        name = f"video_{i:05d}.ptns"
        write_ptns(root / name, dataset.videos[i])
        rows.append(f"{name} {int(dataset.labels[i])} {s.content_hash()}")
    (root / "index.txt").write_text("\n".join(head + rows) + "\n")


def import_dataset(folder) -> Dataset:
    root = Path(folder)
    text = (root / "index.txt").read_text().splitlines()
    meta = {}
    rows = []
    for line in text:
        line = line.strip()
        if not line:
            continue
        if " = " in line:
            k, _, v = line.partition(" = ")
            meta[k.strip()] = v.strip()
        else:
            rows.append(line.split())
    spec = DatasetSpec(
        kind=meta["kind"], n_videos=int(meta["n_videos"]), n_s=int(meta["n_s"]),
        h=int(meta["h"]), w=int(meta["w"]), channels=int(meta["channels"]),
        motion_scale=float(meta["motion_scale"]), class_count=int(meta["class_count"]),
        seed=int(meta["seed"]),
    )
    if spec.content_hash() != meta["spec_hash"]:
        raise FormatError(f"{root}: spec hash mismatch in index header")
    videos = np.empty((len(rows), spec.n_s, spec.channels, spec.h, spec.w))
    labels = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != 3:
            raise FormatError(f"{root}: malformed index row {row!r}")
        name, label, shash = row
        if shash != meta["spec_hash"]:
            raise FormatError(f"{root}: row {name} carries a different spec hash")
        videos[i] = read_ptns(root / name)
        labels[i] = int(label)
    return Dataset(spec=spec, videos=videos, labels=labels)
