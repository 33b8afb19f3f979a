"""Evidence experiments: inverted-noise statistics and metric ablations.

The pieces, in dependency order:

  * build_noise_bank inverts individual frames through a per-frame denoiser
    back to unit-scale noise maps;
  * cosine_stats / pca_embed_2d quantify whether maps from the same video
    resemble each other more than maps from different videos;
  * video_features / frame_features fit Gaussians over hand-crafted
    spatio-temporal features, and frechet_video_metric compares two fits
    (an ordinal stand-in for learned-feature video metrics: only orderings
    between methods are meaningful, never absolute values);
  * run_alpha_sweep / run_strategy_comparison finetune one image model under
    a grid of correlated priors and tabulate both metrics per cell.

Sweep cells are pure functions of (config, cell identity); the thread count
changes wall time only. Equivalent cells (any kind at alpha=0, any kind at
alpha=inf) are computed once and shared between rows.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import pipeline
from .denoiser_net import DenoiserModel
from .edm import EdmParams, precondition
from .errors import (
    ConfigError,
    DegenerateInputError,
    NumericError,
    ParameterError,
    ShapeError,
    StateError,
)
from .noise_prior import NoiseSpec
from .sampler import SamplerConfig, invert
from .toydata import Dataset

COV_SHRINKAGE = 1e-3

ALPHA_SWEEP_HEADER = ("kind", "alpha", "video_metric", "frame_metric", "seed", "steps")
STRATEGIES_HEADER = ("strategy", "video_metric", "frame_metric", "init_hash")
COSINE_HEADER = ("same_mean", "same_std", "diff_mean", "diff_std")
EMBED_HEADER = ("video_id", "x", "y")


# ---------------------------------------------------------------------------
# noise bank


@dataclass
class NoiseBank:
    """Per-frame inverted noise maps with their provenance."""

    video_ids: np.ndarray  # (n,) int64
    frame_indices: np.ndarray  # (n,) int64
    maps: np.ndarray  # (n, c, h, w)

    def __post_init__(self):
        if self.maps.ndim != 4:
            raise ShapeError(f"maps must be (n, c, h, w), got {self.maps.shape}")
        n = self.maps.shape[0]
        if self.video_ids.shape != (n,) or self.frame_indices.shape != (n,):
            raise ShapeError("id vectors must match the number of maps")

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def entries(self) -> list[tuple[int, int, np.ndarray]]:
        return [
            (int(self.video_ids[i]), int(self.frame_indices[i]), self.maps[i])
            for i in range(len(self))
        ]


def _frame_selection(n_s: int, frames_per_video: int) -> np.ndarray:
    # evenly spaced, unique because the spacing is >= 1 frame
    return np.round(np.linspace(0, n_s - 1, frames_per_video)).astype(np.int64)


def build_noise_bank(
    image_model,
    sampler_config: SamplerConfig,
    dataset: Dataset,
    n_videos: int,
    frames_per_video: int,
    edm_params: EdmParams = EdmParams(),
) -> NoiseBank:
    """Invert frames of the first n_videos videos back to noise maps.

    Each frame travels through the ODE independently as a single-frame clip,
    so the correlation structure of the resulting maps is purely a property
    of the data and the denoiser, never of joint processing. image_model is
    either a trained per-frame DenoiserModel (its class labels condition the
    inversion) or any denoise(x, sigma) callable standing in for one.
    """
    if sampler_config.churn > 0:
        raise ConfigError("inversion requires a churn-free sampler")
    if not 1 <= n_videos <= len(dataset):
        raise ParameterError(f"n_videos must be in [1, {len(dataset)}]")
    n_s = dataset.spec.n_s
    if not 1 <= frames_per_video <= n_s:
        raise ParameterError(f"frames_per_video must be in [1, {n_s}]")

    sel = _frame_selection(n_s, frames_per_video)
    vid = np.repeat(np.arange(n_videos, dtype=np.int64), frames_per_video)
    fid = np.tile(sel, n_videos)
    frames = dataset.videos[vid, fid][:, None]  # (N, 1, c, h, w)

    if isinstance(image_model, DenoiserModel):
        if image_model.cfg.temporal_enabled:
            raise ConfigError("noise banks are built with a per-frame (image) model")
        if image_model.train_steps == 0:
            raise StateError("image model has no recorded training steps")
        cond = dataset.labels[vid]
        def denoise(x, sigma):
            return precondition(image_model, x, sigma, cond, edm_params)
    else:
        denoise = image_model

    noise = invert(denoise, sampler_config, frames)
    return NoiseBank(video_ids=vid, frame_indices=fid, maps=noise[:, 0])


def _require_stats_shape(bank: NoiseBank) -> None:
    ids, counts = np.unique(bank.video_ids, return_counts=True)
    if len(ids) < 2 or counts.min() < 2:
        raise DegenerateInputError(
            "statistics need at least 2 videos with at least 2 maps each"
        )


def cosine_stats(bank: NoiseBank) -> dict:
    """Mean and std of pairwise cosine similarity, split into pairs from the
    same video and pairs from different videos."""
    _require_stats_shape(bank)
    flat = bank.maps.reshape(len(bank), -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm noise map in the bank")
    unit = flat / norms[:, None]
    cos = unit @ unit.T
    i, j = np.triu_indices(len(bank), k=1)
    same = bank.video_ids[i] == bank.video_ids[j]
    vals = cos[i, j]
    return {
        "same_mean": float(vals[same].mean()),
        "same_std": float(vals[same].std()),
        "diff_mean": float(vals[~same].mean()),
        "diff_std": float(vals[~same].std()),
    }


def pca_embed_2d(bank: NoiseBank) -> list[tuple[int, float, float]]:
    """Project flattened maps onto the top-2 principal components.

    Sign convention: each component's largest-magnitude loading is positive,
    so the embedding is reproducible. Raises on fewer than 3 maps or a bank
    with no variance at all.
    """
    if len(bank) < 3:
        raise DegenerateInputError("embedding needs at least 3 maps")
    x = bank.maps.reshape(len(bank), -1)
    if x.shape[1] < 2:
        raise DegenerateInputError("maps must have at least 2 elements")
    x = x - x.mean(axis=0)
    if float(np.sum(x * x)) <= 1e-20:
        raise DegenerateInputError("bank has no variance to embed")
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    rows = []
    coords = np.empty((len(bank), 2))
    for k in range(2):
        pc = vt[k]
        if pc[np.argmax(np.abs(pc))] < 0:
            pc = -pc
        coords[:, k] = x @ pc
    for i in range(len(bank)):
        rows.append((int(bank.video_ids[i]), float(coords[i, 0]), float(coords[i, 1])))
    return rows


# ---------------------------------------------------------------------------
# feature statistics and the Frechet-style metric


@dataclass
class VideoStats:
    """Gaussian fit (with diagonal shrinkage) over a feature matrix."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise ShapeError(f"mean {self.mean.shape} / cov {self.cov.shape} mismatch")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_feature_input(videos: np.ndarray, min_frames: int) -> tuple:
    if videos.ndim != 5:
        raise ShapeError(f"expected (n, n_s, c, h, w), got {videos.shape}")
    n, n_s, c, h, w = videos.shape
    if n_s < min_frames:
        raise ParameterError(f"need at least {min_frames} frames, got {n_s}")
    if h % 4 or w % 4:
        raise ParameterError(f"block pooling needs h, w divisible by 4, got {h}x{w}")
    return n, n_s, c, h, w


def _block_pool4(maps: np.ndarray) -> np.ndarray:
    """(n, h, w) -> (n, h/4 * w/4) means over non-overlapping 4x4 blocks."""
    n, h, w = maps.shape
    return maps.reshape(n, h // 4, 4, w // 4, 4).mean(axis=(2, 4)).reshape(n, -1)


def video_feature_matrix(videos: np.ndarray) -> np.ndarray:
    """One row per video: per-frame spatial means, per-frame spatial stds,
    then the mean absolute one-step temporal difference of each 4x4 block."""
    n, n_s, c, h, w = _check_feature_input(videos, min_frames=2)
    means = videos.mean(axis=(2, 3, 4))
    stds = videos.std(axis=(2, 3, 4))
    tdiff = np.abs(np.diff(videos, axis=1)).mean(axis=(1, 2))  # (n, h, w)
    return np.concatenate([means, stds, _block_pool4(tdiff)], axis=1)


def frame_feature_matrix(videos: np.ndarray) -> np.ndarray:
    """One row per frame: overall mean, overall std, then 4x4 block means
    (averaged over channels). Accepts single-frame clips."""
    n, n_s, c, h, w = _check_feature_input(videos, min_frames=1)
    frames = videos.reshape(n * n_s, c, h, w)
    means = frames.mean(axis=(1, 2, 3))[:, None]
    stds = frames.std(axis=(1, 2, 3))[:, None]
    blocks = _block_pool4(frames.mean(axis=1))
    return np.concatenate([means, stds, blocks], axis=1)


def fit_stats(features: np.ndarray) -> VideoStats:
    """Mean/covariance fit; the covariance is shrunk toward its diagonal so
    the matrix square root stays defined at small sample counts."""
    if features.ndim != 2 or features.shape[0] < 2:
        raise DegenerateInputError("need a (n >= 2, d) feature matrix")
    n = features.shape[0]
    mean = features.mean(axis=0)
    x = features - mean
    cov = (x.T @ x) / (n - 1)
    cov = (1.0 - COV_SHRINKAGE) * cov + COV_SHRINKAGE * np.diag(np.diag(cov))
    return VideoStats(mean=mean, cov=cov, n=n)


def video_features(videos: np.ndarray) -> VideoStats:
    return fit_stats(video_feature_matrix(videos))


def frame_features(videos: np.ndarray) -> VideoStats:
    return fit_stats(frame_feature_matrix(videos))


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition; rejects matrices
    with meaningfully negative eigenvalues."""
    sym = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(sym)
    tol = 1e-8 * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        raise NumericError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_video_metric(real: VideoStats, gen: VideoStats) -> float:
    """Frechet distance between the two Gaussian fits:
    ||mu_r - mu_g||^2 + tr(C_r + C_g - 2 (C_r C_g)^{1/2})."""
    if real.dim != gen.dim:
        raise ShapeError(f"feature dims differ: {real.dim} vs {gen.dim}")
    s = _sqrtm_psd(real.cov)
    cross = _sqrtm_psd(s @ gen.cov @ s)
    mean_term = float(np.sum((real.mean - gen.mean) ** 2))
    trace_term = float(np.trace(real.cov) + np.trace(gen.cov) - 2.0 * np.trace(cross))
    return max(mean_term + trace_term, 0.0)


# ---------------------------------------------------------------------------
# CSV emission


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "inf" if math.isinf(value) else f"{value:.9g}"
    return str(value)


def format_csv(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(format_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the ablation experiments


@dataclass(frozen=True)
class CellKey:
    """Identity of one training+evaluation job."""

    prior: NoiseSpec
    scratch: bool = False

    def label(self) -> str:
        return "scratch" if self.scratch else self.prior.label()


@dataclass
class CellResult:
    video_metric: float
    frame_metric: float
    init_hash: str


@dataclass
class _Harness:
    """Shared inputs for all cells of one experiment run."""

    cfg: object
    dataset: Dataset
    image_model: DenoiserModel
    real_video: VideoStats
    real_frame: VideoStats


def _prepare(cfg, image_model: DenoiserModel | None) -> _Harness:
    if image_model is None:
        image_model, _, _ = pipeline.load_image_model(cfg)
    dataset = pipeline.build_dataset(cfg)
    held = pipeline.heldout_dataset(cfg)
    return _Harness(
        cfg=cfg,
        dataset=dataset,
        image_model=image_model,
        real_video=video_features(held.videos),
        real_frame=frame_features(held.videos),
    )


def _run_cell(h: _Harness, key: CellKey) -> CellResult:
    cfg = h.cfg
    prior = pipeline.canonical_noise(key.prior)
    label = key.label()
    if key.scratch:
        model = pipeline.fresh_video_model(cfg)
    else:
        model = pipeline.adapt_video_model(cfg, h.image_model, label)
    init_hash = pipeline.params_hash(model.params)
    steps = cfg.training.steps
    state = pipeline.train_video(cfg, model, h.dataset, prior, steps, label)
    effective = prior if steps > 0 else NoiseSpec("iid", 0.0)
    videos = pipeline.generate_videos(
        cfg, model, state.ema, effective, cfg.analysis.sample_videos, "eval"
    )
    return CellResult(
        video_metric=frechet_video_metric(h.real_video, video_features(videos)),
        frame_metric=frechet_video_metric(h.real_frame, frame_features(videos)),
        init_hash=init_hash,
    )


def _run_cells(h: _Harness, keys: list[CellKey], jobs: int) -> dict[CellKey, CellResult]:
    uniq = sorted(set(keys), key=lambda k: k.label())
    if jobs <= 1:
        done = [_run_cell(h, k) for k in uniq]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(lambda k: _run_cell(h, k), uniq))
    return dict(zip(uniq, done))


def _sweep_key(kind: str, alpha: float) -> CellKey:
    return CellKey(prior=pipeline.canonical_noise(NoiseSpec(kind, alpha)))


SCRATCH_KEY = CellKey(prior=NoiseSpec("iid", 0.0), scratch=True)


def run_alpha_sweep(
    cfg,
    alphas,
    kinds=("mixed", "progressive"),
    image_model: DenoiserModel | None = None,
    jobs: int = 1,
) -> list[tuple]:
    """One finetune+evaluate cell per (kind, alpha) plus the scratch
    baseline; equivalent cells are computed once. Rows are sorted by
    (kind, alpha) with the scratch row last."""
    for kind in kinds:
        if kind not in ("mixed", "progressive"):
            raise ParameterError(f"sweep kinds are mixed/progressive, got {kind!r}")
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ParameterError("alpha list is empty")
    h = _prepare(cfg, image_model)
    requested = [(kind, a) for kind in sorted(kinds) for a in sorted(alphas)]
    keys = [_sweep_key(kind, a) for kind, a in requested] + [SCRATCH_KEY]
    results = _run_cells(h, keys, jobs)
    rows = []
    for (kind, a), key in zip(requested, keys):
        r = results[key]
        rows.append((kind, a, r.video_metric, r.frame_metric, cfg.seed, cfg.training.steps))
    r = results[SCRATCH_KEY]
    rows.append(("scratch", 0.0, r.video_metric, r.frame_metric, cfg.seed, cfg.training.steps))
    return rows


STRATEGIES = (
    ("scratch", SCRATCH_KEY),
    ("finetune", CellKey(prior=NoiseSpec("iid", 0.0))),
    ("mixed", CellKey(prior=NoiseSpec("mixed", 1.0))),
    ("progressive", CellKey(prior=NoiseSpec("progressive", 2.0))),
)


def run_strategy_comparison(
    cfg, image_model: DenoiserModel | None = None, jobs: int = 1
) -> list[tuple]:
    """The four training strategies under one compute budget: train from
    scratch, plain finetune, and finetune under each correlated prior (the
    correlated rows use the sweep's best-performing alphas)."""
    h = _prepare(cfg, image_model)
    results = _run_cells(h, [key for _, key in STRATEGIES], jobs)
    return [
        (name, results[key].video_metric, results[key].frame_metric, results[key].init_hash)
        for name, key in STRATEGIES
    ]
