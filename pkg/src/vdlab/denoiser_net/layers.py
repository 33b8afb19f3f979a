"""Layer primitives with hand-written forward/backward passes.

Every forward returns (out, cache); the matching backward takes (cache,
grad_out) and returns (grad_in, param_grads) where param_grads maps the
layer's parameter suffixes to arrays. All math is float64 and all reductions
happen in a fixed order, so repeated evaluation is bit-identical.

Video activations keep the (b, n_s, c, h, w) axis order throughout.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..ndcore.ops import _conv3d_patches

# ---------------------------------------------------------------------------
# convolution (covers spatial 1xkxk and temporal kx1x1 kernels)


def conv_fwd(x: np.ndarray, w: np.ndarray, bias: np.ndarray, padding):
    c_out = w.shape[0]
    patches = _conv3d_patches(x, w.shape[2:], padding)
    b, ot, oh, ow = patches.shape[:4]
    cols = patches.reshape(b * ot * oh * ow, -1)
    out = cols @ w.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(out.reshape(b, ot, oh, ow, c_out).transpose(0, 1, 4, 2, 3))
    return out, (x, w, padding)


def conv_bwd(cache, dout: np.ndarray):
    x, w, padding = cache
    c_out, c_in = w.shape[:2]
    kt, kh, kw = w.shape[2:]
    pt, ph, pw = padding
    b, ot, _, oh, ow = dout.shape
    dflat = np.ascontiguousarray(dout.transpose(0, 1, 3, 4, 2)).reshape(-1, c_out)

    patches = _conv3d_patches(x, (kt, kh, kw), padding)
    cols = patches.reshape(-1, c_in * kt * kh * kw)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)

    # accumulate input gradient one kernel offset at a time on the padded grid
    n_s, h, wd = x.shape[1], x.shape[3], x.shape[4]
    dxp = np.zeros((b, n_s + 2 * pt, c_in, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw_ in range(kw):
                g = (dflat @ w[:, :, dt, dh, dw_]).reshape(b, ot, oh, ow, c_in)
                dxp[:, dt : dt + ot, :, dh : dh + oh, dw_ : dw_ + ow] += g.transpose(0, 1, 4, 2, 3)
    dx = dxp[:, pt : pt + n_s, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(dx), {"w": dw, "b": db}


# ---------------------------------------------------------------------------
# group normalization (statistics per frame: the n_s axis folds into batch)


def group_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float = 1e-5):
    b, n_s, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(b * n_s, groups, (c // groups) * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, n_s, c, h, w)
    out = xhat * gamma.reshape(1, 1, c, 1, 1) + beta.reshape(1, 1, c, 1, 1)
    return out, (xhat, inv, gamma, groups)


def group_norm_bwd(cache, dout: np.ndarray):
    xhat, inv, gamma, groups = cache
    b, n_s, c, h, w = dout.shape
    dgamma = np.sum(dout * xhat, axis=(0, 1, 3, 4))
    dbeta = np.sum(dout, axis=(0, 1, 3, 4))
    dxhat = (dout * gamma.reshape(1, 1, c, 1, 1)).reshape(b * n_s, groups, -1)
    xh = xhat.reshape(b * n_s, groups, -1)
    m1 = dxhat.mean(axis=2, keepdims=True)
    m2 = (dxhat * xh).mean(axis=2, keepdims=True)
    dx = inv * (dxhat - m1 - xh * m2)
    return np.ascontiguousarray(dx.reshape(b, n_s, c, h, w)), {"g": dgamma, "b": dbeta}


# ---------------------------------------------------------------------------
# SiLU


def silu_fwd(x: np.ndarray):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(cache, dout: np.ndarray):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s))), {}


# ---------------------------------------------------------------------------
# linear (row convention: out = x @ w + b, w has shape (in, out))


def linear_fwd(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    return x @ w + bias, (x, w)


def linear_bwd(cache, dout: np.ndarray):
    x, w = cache
    dw = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout @ w.T, {"w": dw, "b": db}


# ---------------------------------------------------------------------------
# temporal self-attention (single head over the frame axis, per pixel)


def attention_fwd(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo, pos: np.ndarray):
    """Residual attention over frames: tokens are the n_s frame vectors at
    each (b, h, w) position. `pos` is a learned (n_frames_max, n_frames_max)
    additive score bias; its leading (n_s, n_s) block is used."""
    b, n_s, c, h, w = x.shape
    if n_s > pos.shape[0]:
        raise ShapeError(f"{n_s} frames exceeds positional table size {pos.shape[0]}")
    t = np.ascontiguousarray(x.transpose(0, 3, 4, 1, 2)).reshape(b * h * w, n_s, c)
    q = t @ wq + bq
    k = t @ wk + bk
    v = t @ wv + bv
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(c) + pos[:n_s, :n_s]
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)
    ctx = attn @ v
    y = ctx @ wo + bo
    out = x + np.ascontiguousarray(
        y.reshape(b, h, w, n_s, c).transpose(0, 3, 4, 1, 2)
    )
    return out, (t, q, k, v, attn, ctx, wq, wk, wv, wo, x.shape)


def attention_bwd(cache, dout: np.ndarray):
    t, q, k, v, attn, ctx, wq, wk, wv, wo, xshape = cache
    b, n_s, c, h, w = xshape
    dy = np.ascontiguousarray(dout.transpose(0, 3, 4, 1, 2)).reshape(b * h * w, n_s, c)

    dwo = ctx.reshape(-1, c).T @ dy.reshape(-1, c)
    dbo = dy.reshape(-1, c).sum(axis=0)
    dctx = dy @ wo.T

    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx

    # softmax jacobian, row-wise
    dscores = attn * (dattn - np.sum(dattn * attn, axis=2, keepdims=True))
    dpos_block = dscores.sum(axis=0)
    dq = (dscores @ k) / np.sqrt(c)
    dk = (dscores.transpose(0, 2, 1) @ q) / np.sqrt(c)

    tf = t.reshape(-1, c)
    dwq = tf.T @ dq.reshape(-1, c)
    dwk = tf.T @ dk.reshape(-1, c)
    dwv = tf.T @ dv.reshape(-1, c)
    dbq = dq.reshape(-1, c).sum(axis=0)
    dbk = dk.reshape(-1, c).sum(axis=0)
    dbv = dv.reshape(-1, c).sum(axis=0)

    dt = dq @ wq.T + dk @ wk.T + dv @ wv.T
    dx_tokens = np.ascontiguousarray(
        dt.reshape(b, h, w, n_s, c).transpose(0, 3, 4, 1, 2)
    )
    # "pos_block" is the leading (n_s, n_s) slice; the caller pads it out to
    # the full positional table.
    grads = {
        "wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk, "wv": dwv, "bv": dbv,
        "wo": dwo, "bo": dbo, "pos_block": dpos_block,
    }
    return dout + dx_tokens, grads


# ---------------------------------------------------------------------------
# resolution changes (spatial only)


def avg_pool2_fwd(x: np.ndarray):
    b, n_s, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling needs even spatial extents, got {h}x{w}")
    out = x.reshape(b, n_s, c, h // 2, 2, w // 2, 2).mean(axis=(4, 6))
    return out, x.shape


def avg_pool2_bwd(cache, dout: np.ndarray):
    b, n_s, c, h, w = cache
    g = np.empty((b, n_s, c, h // 2, 2, w // 2, 2), dtype=dout.dtype)
    g[...] = (dout * 0.25)[:, :, :, :, None, :, None]
    return g.reshape(b, n_s, c, h, w), {}


def upsample2_fwd(x: np.ndarray):
    out = np.repeat(np.repeat(x, 2, axis=3), 2, axis=4)
    return np.ascontiguousarray(out), x.shape


def upsample2_bwd(cache, dout: np.ndarray):
    b, n_s, c, h, w = cache
    g = dout.reshape(b, n_s, c, h, 2, w, 2).sum(axis=(4, 6))
    return np.ascontiguousarray(g), {}
