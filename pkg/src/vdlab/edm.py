"""Denoising-diffusion training machinery in the sigma parameterization.

Data x is corrupted as x_noise = x + sigma * eps; a preconditioned denoiser

  D(x; sigma) = c_skip(sigma) x + c_out(sigma) F((1/s*) x; cond, ln(sigma)/4)

with s* = sqrt(sigma^2 + sigma_data^2), c_skip = sigma_data^2 / s*^2 and
c_out = sigma * sigma_data / s* is trained under the weighted objective

  E[ lambda(sigma) || D(x + sigma eps; sigma) - x ||^2 ],
  lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma sigma_data)^2,

where ln(sigma) ~ N(p_mean, p_std^2). lambda c_out^2 = 1 identically, so
every noise level contributes an equally scaled residual to the network.

The network object `f_theta` must provide:

  forward(x, sigma_feat, cond, want_cache=False) -> out | (out, cache)
  backward(cache, grad_out) -> flat parameter gradient

which both the real denoiser and the tiny stand-ins in tests implement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .ndcore import RngStream, gaussian
from .noise_prior import NoiseSpec, sample_noise


@dataclass(frozen=True)
class EdmParams:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ParameterError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.p_std < 0:
            raise ParameterError(f"p_std must be >= 0, got {self.p_std}")


def loss_weight(sigma, sigma_data: float):
    """lambda(sigma); accepts a scalar or an array of sigmas."""
    if sigma_data <= 0:
        raise ParameterError(f"sigma_data must be positive, got {sigma_data}")
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ParameterError("sigma must be positive and finite")
    out = (sig**2 + sigma_data**2) / (sig * sigma_data) ** 2
    return float(out) if np.isscalar(sigma) else out


def precondition_coeffs(sigma, sigma_data: float):
    """(c_skip, c_out, c_in) for the given sigma (scalar or array)."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0):
        raise ParameterError("sigma must be positive")
    s_star2 = sig**2 + sigma_data**2
    s_star = np.sqrt(s_star2)
    return sigma_data**2 / s_star2, sig * sigma_data / s_star, 1.0 / s_star


def sample_sigma(params: EdmParams, rng: RngStream, n: int) -> np.ndarray:
    """Draw n noise levels with ln(sigma) ~ N(p_mean, p_std^2)."""
    if n <= 0:
        raise ParameterError(f"n must be positive, got {n}")
    z = gaussian(rng, (n,))
    return np.exp(params.p_mean + params.p_std * z)


def _per_item(sigma, b: int) -> np.ndarray:
    sig = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sig.size == 1:
        sig = np.full(b, sig[0])
    if sig.size != b:
        raise ShapeError(f"sigma has {sig.size} entries for batch {b}")
    return sig


def precondition(f_theta, x: np.ndarray, sigma, cond=None, params: EdmParams = EdmParams(), want_cache: bool = False):
    """Apply the preconditioned denoiser D to a (b, n_s, c, h, w) batch.

    `sigma` is a positive scalar or a per-item vector of length b. With
    want_cache=True returns (D, cache) where cache carries what
    denoising_loss needs for the backward pass.
    """
    if x.ndim != 5:
        raise ShapeError(f"expected (b, n_s, c, h, w), got {x.shape}")
    sig = _per_item(sigma, x.shape[0])
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ParameterError("sigma must be positive and finite")
    c_skip, c_out, c_in = precondition_coeffs(sig, params.sigma_data)
    bshape = (-1, 1, 1, 1, 1)
    feat = np.log(sig) / 4.0
    fwd = f_theta.forward(c_in.reshape(bshape) * x, feat, cond, want_cache=want_cache)
    f_out, cache = fwd if want_cache else (fwd, None)
    d = c_skip.reshape(bshape) * x + c_out.reshape(bshape) * f_out
    if not np.all(np.isfinite(d)):
        raise NumericError(f"non-finite denoiser output at sigma={np.min(sig):g}..{np.max(sig):g}")
    if want_cache:
        return d, {"net": cache, "c_out": c_out}
    return d


def denoising_loss_terms(f_theta, x_clean: np.ndarray, cond, sigma: np.ndarray, eps: np.ndarray, params: EdmParams = EdmParams(), want_grads: bool = True):
    """Deterministic core of the loss: everything after sigma and eps are drawn.

    Returns (loss, grads) where loss = mean_i lambda(sigma_i) ||D_i - x_i||^2
    (sum over elements, mean over the batch) and grads is the flat parameter
    gradient (None with want_grads=False). Per-item terms are reduced in
    batch order with numpy's pairwise summation, so a repeated call is
    bit-identical.
    """
    if x_clean.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != data shape {x_clean.shape}")
    b = x_clean.shape[0]
    sig = _per_item(sigma, b)
    bshape = (-1, 1, 1, 1, 1)
    x_noise = x_clean + sig.reshape(bshape) * eps
    if want_grads:
        d, cache = precondition(f_theta, x_noise, sig, cond, params, want_cache=True)
    else:
        d, cache = precondition(f_theta, x_noise, sig, cond, params), None
    lam = loss_weight(sig, params.sigma_data)
    resid = d - x_clean
    per_item = lam * np.sum(resid.reshape(b, -1) ** 2, axis=1)
    loss = float(np.mean(per_item))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    if not want_grads:
        return loss, None
    # dL/dF = c_out * dL/dD, dL/dD = (2 lambda / b) (D - x_clean)
    dd = (2.0 / b) * lam.reshape(bshape) * resid
    grads = f_theta.backward(cache["net"], cache["c_out"].reshape(bshape) * dd)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    return loss, grads


def denoising_loss(f_theta, x_clean: np.ndarray, cond, noise_spec: NoiseSpec, params: EdmParams, rng: RngStream):
    """Draw per-item sigma and prior noise, then evaluate the loss and grads.

    RNG contract: one gaussian draw of shape (b,) for the sigma exponents,
    then one sample_noise call for eps, in that order.
    """
    if x_clean.ndim != 5:
        raise ShapeError(f"expected (b, n_s, c, h, w), got {x_clean.shape}")
    sig = sample_sigma(params, rng, x_clean.shape[0])
    eps = sample_noise(noise_spec, x_clean.shape, rng)
    return denoising_loss_terms(f_theta, x_clean, cond, sig, eps, params)
