"""Finite-difference verification of the hand-written gradients.

The analytic gradient of the denoising loss is compared against central
differences, parameter by parameter, on a frozen batch (sigma and eps drawn
once and reused for every probe). Parameters are jittered away from their
init first: identity/zero initializations create exact saddle points where
both gradients vanish and relative error is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..edm import EdmParams, denoising_loss_terms
from ..ndcore import RngStream, gaussian
from .model import DenoiserModel


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_params: int
    checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(
    model: DenoiserModel,
    x_clean: np.ndarray,
    cond,
    sigma: np.ndarray,
    eps: np.ndarray,
    edm_params: EdmParams = EdmParams(),
    h: float = 1e-4,
    jitter: float = 0.05,
    rng: RngStream | None = None,
) -> GradCheckReport:
    """Check dLoss/dtheta for every parameter; returns the worst relative error.

    rel err = |g - fd| / max(|g|, |fd|). Pairs where both magnitudes sit
    below the finite-difference noise floor (machine epsilon at the loss
    scale, divided by h) count as zero error: those are true zero gradients,
    e.g. class rows absent from the batch or biases the softmax cancels, and
    central differences only measure rounding noise there.
    """
    work = model.clone()
    if jitter:
        jrng = rng if rng is not None else RngStream(2024, 97)
        work.params += jitter * gaussian(jrng, work.params.shape)

    loss0, analytic = denoising_loss_terms(work, x_clean, cond, sigma, eps, edm_params)
    floor = 100.0 * np.finfo(np.float64).eps * max(1.0, abs(loss0)) / h

    def loss_now() -> float:
        val, _ = denoising_loss_terms(
            work, x_clean, cond, sigma, eps, edm_params, want_grads=False
        )
        return val

    theta = work.params
    fd = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = loss_now()
        theta[i] = orig - h
        dn = loss_now()
        theta[i] = orig
        fd[i] = (up - dn) / (2.0 * h)

    denom = np.maximum(np.abs(analytic), np.abs(fd))
    rel = np.where(denom <= floor, 0.0, np.abs(analytic - fd) / np.maximum(denom, 1e-300))
    worst = int(np.argmax(rel))
    name = next(n for n, (sl, _) in work.slices.items() if sl.start <= worst < sl.stop)
    return GradCheckReport(
        max_rel_err=float(rel[worst]),
        worst_param=name,
        n_params=theta.size,
        checked=int(np.count_nonzero(denom > floor)),
    )
