"""AdamW with decoupled weight decay and an EMA shadow of the parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from .model import DenoiserModel


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    ema_decay: float = 0.9999


@dataclass
class OptimizerState:
    cfg: OptimizerConfig
    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray
    step: int = 0
    loss_history: list = field(default_factory=list)


def init_optimizer(model: DenoiserModel, cfg: OptimizerConfig | None = None) -> OptimizerState:
    cfg = cfg or OptimizerConfig()
    return OptimizerState(
        cfg=cfg,
        m=model.zeros_like_params(),
        v=model.zeros_like_params(),
        ema=model.params.copy(),
    )


def optimizer_step(state: OptimizerState, model: DenoiserModel, grads: np.ndarray) -> None:
    """One AdamW update in place, followed by the EMA update.

    Decay is decoupled (applied directly to the parameters), so a zero
    gradient still shrinks weights by lr * weight_decay per step.
    """
    if grads.shape != model.params.shape:
        raise ShapeError("gradient vector has the wrong length")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        name = next(
            n for n, (sl, _) in model.slices.items() if sl.start <= bad < sl.stop
        )
        raise NumericError(f"non-finite gradient in parameter {name!r}")
    c = state.cfg
    state.step += 1
    t = state.step
    state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads
    state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads * grads
    m_hat = state.m / (1.0 - c.beta1**t)
    v_hat = state.v / (1.0 - c.beta2**t)
    model.params -= c.lr * c.weight_decay * model.params
    model.params -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
    model.train_steps += 1
    state.ema = c.ema_decay * state.ema + (1.0 - c.ema_decay) * model.params
