"""Experiment plumbing: models, training loops and deterministic generation.

Everything random flows from one experiment seed through fixed stream ids
(data=1, training=2, sampling=3, analysis=4). Within a subsystem, independent
jobs get child streams keyed by a semantic label (a hash of what the job is,
never of when or where it runs), so results are identical at any worker
count and equivalent requests share randomness. Two consequences the
experiment suite relies on:

  * a sweep cell at alpha=0 is the same job as plain finetuning (labels pass
    through canonical_noise first), so their outputs are bit-identical;
  * evaluation draws its prior from a stream keyed by the effective noise
    spec, so models trained with the same prior are compared on common
    random numbers.

Sampling uses the noise prior the weights were actually trained under (the
checkpoint records it; a 0-step run inherits its initializer's prior).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .denoiser_net import (
    DenoiserModel,
    ModelConfig,
    OptimizerConfig,
    OptimizerState,
    init_from_image_model,
    init_optimizer,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from .edm import EdmParams, denoising_loss, precondition
from .errors import ConfigError, StateError
from .ndcore import RngStream, gaussian
from .noise_prior import NoiseSpec, sample_noise
from .sampler import SamplerConfig, sample
from .toydata import DATA_STREAM, Batch, Dataset, generate, next_batch

STREAM_TRAIN = 2
STREAM_SAMPLE = 3
STREAM_ANALYSIS = 4

IID = NoiseSpec("iid", 0.0)


def label_index(label: str) -> int:
    """Stable 63-bit child index for a semantic job label."""
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little") >> 1


def substream(seed: int, stream_id: int, label: str) -> RngStream:
    return RngStream(seed, stream_id).child(label_index(label))


def canonical_noise(spec: NoiseSpec) -> NoiseSpec:
    """Collapse equivalent priors onto one representative: alpha=0 of a
    parametric kind is iid and alpha=inf is frozen. The representative
    carries the default alpha, so it compares equal to a plain
    NoiseSpec(kind) literal. Kind is checked before alpha: the fixed kinds
    ignore alpha entirely, whatever value they carry."""
    if spec.kind == "frozen":
        return NoiseSpec("frozen")
    if spec.kind == "iid":
        return NoiseSpec("iid")
    a = float(spec.alpha)
    if a == 0.0:
        return NoiseSpec("iid")
    if np.isinf(a):
        return NoiseSpec("frozen")
    return spec


def params_hash(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# construction from an experiment config


def edm_params(cfg) -> EdmParams:
    return cfg.edm


def model_config(cfg, temporal: bool) -> ModelConfig:
    ds = cfg.dataset
    if cfg.model.n_frames_max < ds.n_s:
        raise ConfigError(
            f"model.n_frames_max={cfg.model.n_frames_max} < dataset.n_s={ds.n_s}"
        )
    return ModelConfig(
        c_in=ds.channels,
        channels=cfg.model.channels,
        emb_dim=cfg.model.emb_dim,
        groups=cfg.model.groups,
        n_classes=ds.class_count,
        n_frames_max=cfg.model.n_frames_max,
        temporal_enabled=temporal,
    )


def optimizer_config(cfg, image_phase: bool) -> OptimizerConfig:
    t = cfg.training
    return OptimizerConfig(
        lr=t.image_lr if image_phase else t.lr,
        beta1=t.beta1,
        beta2=t.beta2,
        weight_decay=t.weight_decay,
        ema_decay=t.ema,
    )


def build_dataset(cfg) -> Dataset:
    return generate(cfg.dataset)


def heldout_dataset(cfg) -> Dataset:
    """Fresh videos from the same distribution on a shifted dataset seed,
    used only for evaluation statistics."""
    spec = replace(
        cfg.dataset, seed=cfg.dataset.seed + 1, n_videos=cfg.analysis.eval_videos
    )
    return generate(spec)


def fresh_image_model(cfg) -> DenoiserModel:
    return DenoiserModel.initialize(
        model_config(cfg, temporal=False), substream(cfg.seed, STREAM_TRAIN, "init")
    )


def fresh_video_model(cfg) -> DenoiserModel:
    # same init label as the image model: shared parameters come out
    # bit-identical, so "scratch" differs only by skipping image pretraining
    return DenoiserModel.initialize(
        model_config(cfg, temporal=True), substream(cfg.seed, STREAM_TRAIN, "init")
    )


def adapt_video_model(cfg, image_model: DenoiserModel, label: str) -> DenoiserModel:
    return init_from_image_model(
        image_model, substream(cfg.seed, STREAM_TRAIN, f"adapt:{label}")
    )


# ---------------------------------------------------------------------------
# training


def train_image(cfg, dataset: Dataset, model: DenoiserModel | None = None):
    """Phase one: per-frame model on single-frame batches, i.i.d. noise."""
    if model is None:
        model = fresh_image_model(cfg)
    state = init_optimizer(model, optimizer_config(cfg, image_phase=True))
    rng = substream(cfg.seed, STREAM_TRAIN, "image")
    ep = edm_params(cfg)
    for _ in range(cfg.training.image_steps):
        batch = next_batch(dataset, rng, 0, cfg.training.image_batch)
        loss, g = denoising_loss(model, batch.images, batch.image_labels, IID, ep, rng)
        optimizer_step(state, model, g)
        state.loss_history.append(loss)
    return model, state


def joint_loss(model, batch: Batch, spec: NoiseSpec, ep: EdmParams, rng: RngStream):
    """Video term under `spec` plus image term under i.i.d. noise, weighted
    by item counts. Temporal layers see only the video part (single-frame
    clips bypass them by construction)."""
    parts = []
    if batch.videos is not None:
        parts.append(
            (batch.videos.shape[0], denoising_loss(model, batch.videos, batch.video_labels, spec, ep, rng))
        )
    if batch.images is not None:
        parts.append(
            (batch.images.shape[0], denoising_loss(model, batch.images, batch.image_labels, IID, ep, rng))
        )
    total = sum(n for n, _ in parts)
    loss = sum(n * lg[0] for n, lg in parts) / total
    grads = sum(n * lg[1] for n, lg in parts) / total
    return loss, grads


def train_video(cfg, model: DenoiserModel, dataset: Dataset, spec: NoiseSpec, steps: int, label: str) -> OptimizerState:
    """Joint image-video training under the (canonicalized) prior `spec`.

    `label` names the job for stream derivation; equal labels replay equal
    randomness regardless of call order or thread.
    """
    spec = canonical_noise(spec)
    state = init_optimizer(model, optimizer_config(cfg, image_phase=False))
    rng = substream(cfg.seed, STREAM_TRAIN, f"video:{label}")
    ep = edm_params(cfg)
    for _ in range(steps):
        batch = next_batch(dataset, rng, cfg.training.batch, cfg.training.image_batch)
        loss, g = joint_loss(model, batch, spec, ep, rng)
        optimizer_step(state, model, g)
        state.loss_history.append(loss)
    return state


# ---------------------------------------------------------------------------
# generation and inversion helpers


def denoise_fn(model: DenoiserModel, params: np.ndarray | None = None, ep: EdmParams = EdmParams(), cond=None):
    """Close a model (optionally with substitute parameters, e.g. an EMA
    vector) and fixed conditioning into a denoise(x, sigma) callable."""
    work = model if params is None else model.with_params(params)
    def denoise(x, sigma):
        return precondition(work, x, sigma, cond, ep)
    return denoise


def generation_labels(n: int, class_count: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % class_count


def generate_videos(cfg, model: DenoiserModel, params: np.ndarray | None, spec: NoiseSpec, n: int, label: str) -> np.ndarray:
    """Sample n videos under the canonicalized prior `spec`; the prior stream
    is keyed by the prior itself so equal-prior jobs share random numbers."""
    spec = canonical_noise(spec)
    ds = cfg.dataset
    shape = (n, ds.n_s, ds.channels, ds.h, ds.w)
    rng = substream(cfg.seed, STREAM_SAMPLE, f"{label}:{spec.label()}")
    prior = sample_noise(spec, shape, rng)
    cond = generation_labels(n, ds.class_count)
    d = denoise_fn(model, params, edm_params(cfg), cond)
    return sample(d, cfg.sampler, prior, noise_spec=spec, rng=rng)


# ---------------------------------------------------------------------------
# checkpoint conventions


def run_dir(cfg, command: str) -> Path:
    return Path(cfg.output_dir) / command


def checkpoint_dir(cfg, command: str) -> Path:
    return run_dir(cfg, command) / "checkpoint"


def training_prior_meta(spec: NoiseSpec | None, steps: int, init_meta: dict | None) -> dict:
    """Checkpoint record of the prior the weights were trained under. A run
    of zero steps trains under nothing, so it passes its initializer's
    record through (default i.i.d.)."""
    if steps > 0 and spec is not None:
        c = canonical_noise(spec)
        return {"noise_kind": c.kind, "noise_alpha": repr(float(c.alpha))}
    src = init_meta or {}
    return {
        "noise_kind": src.get("noise_kind", "iid"),
        "noise_alpha": src.get("noise_alpha", "0.0"),
    }


def recorded_prior(meta: dict) -> NoiseSpec:
    return canonical_noise(
        NoiseSpec(meta.get("noise_kind", "iid"), float(meta.get("noise_alpha", "0.0")))
    )


def save_trained(path, model: DenoiserModel, state: OptimizerState | None, prior_meta: dict) -> None:
    ema = state.ema if state is not None else None
    save_checkpoint(path, model, ema=ema, extra=prior_meta)


def load_image_model(cfg):
    """The pretrained per-frame model that finetuning and inversion start
    from; StateError when the checkpoint has not been produced yet."""
    path = checkpoint_dir(cfg, "train-image")
    if not (path / "meta.txt").exists():
        raise StateError(f"no image checkpoint at {path}; run train-image first")
    model, ema, meta = load_checkpoint(path)
    if model.cfg.temporal_enabled:
        raise ConfigError(f"{path} holds a video model, not an image model")
    return model, ema, meta


# ---------------------------------------------------------------------------
# gradcheck fixture


def gradcheck_setup(seed: int):
    """A deliberately small model (< 10^4 parameters) and batch for exact
    finite-difference verification of the full backward pass."""
    cfg = ModelConfig(
        c_in=1, channels=6, emb_dim=8, groups=3, n_classes=3, n_frames_max=4,
        temporal_enabled=True,
    )
    model = DenoiserModel.initialize(cfg, substream(seed, STREAM_TRAIN, "gradcheck"))
    rng = substream(seed, STREAM_ANALYSIS, "gradcheck")
    x_clean = np.tanh(gaussian(rng, (2, 3, 1, 6, 6)))
    cond = np.array([0, 2])
    sigma = np.array([0.4, 1.7])
    eps = gaussian(rng, x_clean.shape)
    return model, x_clean, cond, sigma, eps
