"""The video denoiser: a small two-level conv net with optional temporal layers.

Architecture (channels C at full resolution, 2C after one 2x pool):

  stem conv 1x3x3
  enc  residual block [GN, SiLU, conv, +emb bias, GN, SiLU, conv]
  enc  temporal conv 3x1x1            (temporal)
  avg-pool 2x2 -> proj conv to 2C
  mid  residual block
  mid  temporal attention over frames (temporal)
  mid  temporal conv 3x1x1            (temporal)
  nearest-upsample 2x -> proj conv to C
  dec  residual block
  dec  temporal conv 3x1x1            (temporal)
  head GN, SiLU, conv to c_in

Conditioning: sigma_feat = ln(sigma)/4 runs through a 2-layer MLP of width
emb_dim; a per-class embedding row is added when labels are given; each
residual block injects a per-channel linear projection of the result.

Temporal layers run only when temporal_enabled and the clip has more than
one frame; otherwise the net factorizes exactly over frames. Temporal convs
start as the identity kernel and the attention output projection starts at
zero, so a freshly adapted video model reproduces its image parent exactly.

Parameters live in one flat float64 vector with named views, which keeps the
optimizer, EMA, checkpointing and finite differencing trivial.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, ParameterError, ShapeError
from ..ndcore import RngStream, gaussian
from . import layers as L

_SPATIAL_PAD = (0, 1, 1)
_TEMPORAL_PAD = (1, 0, 0)
GN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    c_in: int = 1
    channels: int = 16
    emb_dim: int = 32
    groups: int = 4
    n_classes: int = 4
    n_frames_max: int = 8
    temporal_enabled: bool = True

    def __post_init__(self):
        if min(self.c_in, self.channels, self.emb_dim, self.groups, self.n_classes, self.n_frames_max) <= 0:
            raise ParameterError("all model dimensions must be positive")
        if self.channels % self.groups or (2 * self.channels) % self.groups:
            raise ParameterError(
                f"channels {self.channels} must be divisible by groups {self.groups}"
            )


def _param_plan(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) table; the flat vector follows this order."""
    C, C2, E = cfg.channels, 2 * cfg.channels, cfg.emb_dim
    plan: list[tuple[str, tuple]] = [("stem.w", (C, cfg.c_in, 1, 3, 3)), ("stem.b", (C,))]

    def block(prefix: str, ch: int):
        plan.extend(
            [
                (f"{prefix}.norm1.g", (ch,)), (f"{prefix}.norm1.b", (ch,)),
                (f"{prefix}.conv1.w", (ch, ch, 1, 3, 3)), (f"{prefix}.conv1.b", (ch,)),
                (f"{prefix}.emb.w", (E, ch)), (f"{prefix}.emb.b", (ch,)),
                (f"{prefix}.norm2.g", (ch,)), (f"{prefix}.norm2.b", (ch,)),
                (f"{prefix}.conv2.w", (ch, ch, 1, 3, 3)), (f"{prefix}.conv2.b", (ch,)),
            ]
        )

    block("enc", C)
    plan.extend([("enc.tconv.w", (C, C, 3, 1, 1)), ("enc.tconv.b", (C,))])
    plan.extend([("mid.proj.w", (C2, C, 1, 3, 3)), ("mid.proj.b", (C2,))])
    block("mid", C2)
    for nm in ("wq", "wk", "wv", "wo"):
        plan.append((f"mid.attn.{nm}", (C2, C2)))
    for nm in ("bq", "bk", "bv", "bo"):
        plan.append((f"mid.attn.{nm}", (C2,)))
    plan.append(("mid.attn.pos", (cfg.n_frames_max, cfg.n_frames_max)))
    plan.extend([("mid.tconv.w", (C2, C2, 3, 1, 1)), ("mid.tconv.b", (C2,))])
    plan.extend([("dec.proj.w", (C, C2, 1, 3, 3)), ("dec.proj.b", (C,))])
    block("dec", C)
    plan.extend([("dec.tconv.w", (C, C, 3, 1, 1)), ("dec.tconv.b", (C,))])
    plan.extend(
        [
            ("head.norm.g", (C,)), ("head.norm.b", (C,)),
            ("head.conv.w", (cfg.c_in, C, 1, 3, 3)), ("head.conv.b", (cfg.c_in,)),
            ("emb.mlp1.w", (1, E)), ("emb.mlp1.b", (E,)),
            ("emb.mlp2.w", (E, E)), ("emb.mlp2.b", (E,)),
            ("emb.cond.table", (cfg.n_classes, E)),
        ]
    )
    return plan


TEMPORAL_PREFIXES = ("enc.tconv", "mid.attn", "mid.tconv", "dec.tconv")


def is_temporal_param(name: str) -> bool:
    return name.startswith(TEMPORAL_PREFIXES)


class DenoiserModel:
    """Flat-parameter denoiser net; see the module docstring for the layout."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.slices: dict[str, tuple[slice, tuple]] = {}
        off = 0
        for name, shape in _param_plan(cfg):
            n = int(np.prod(shape))
            self.slices[name] = (slice(off, off + n), shape)
            off += n
        self.params = np.zeros(off, dtype=np.float64)
        self.train_steps = 0

    # -- parameter access ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.params.size

    def view(self, name: str) -> np.ndarray:
        sl, shape = self.slices[name]
        return self.params[sl].reshape(shape)

    def param_names(self) -> list[str]:
        return list(self.slices)

    def zeros_like_params(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def describe(self) -> list[str]:
        """Ordered layer plan, for logging and architecture hashing."""
        return [
            f"{name}:{'x'.join(map(str, shape))}"
            for name, (_, shape) in self.slices.items()
        ]

    def arch_hash(self) -> str:
        """Hash of the spatial architecture; ignores the temporal flag so an
        image model and its video adaptation hash alike."""
        c = self.cfg
        txt = f"v1|c_in={c.c_in}|ch={c.channels}|emb={c.emb_dim}|groups={c.groups}" \
              f"|classes={c.n_classes}|frames={c.n_frames_max}|" + ";".join(self.describe())
        return hashlib.sha256(txt.encode()).hexdigest()[:16]

    def clone(self) -> "DenoiserModel":
        out = DenoiserModel(self.cfg)
        out.params[:] = self.params
        out.train_steps = self.train_steps
        return out

    def with_params(self, params: np.ndarray) -> "DenoiserModel":
        if params.shape != self.params.shape:
            raise ShapeError("parameter vector has the wrong length")
        out = DenoiserModel(self.cfg)
        out.params[:] = params
        out.train_steps = self.train_steps
        return out

    # -- initialization -----------------------------------------------------

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: RngStream) -> "DenoiserModel":
        """Random spatial weights, identity temporal additions.

        Weights are N(0, 1/fan_in); norm gains start at 1; temporal convs at
        the identity kernel; attention q/k/v random with a zero output
        projection and zero positional bias.
        """
        model = cls(cfg)
        for name in model.param_names():
            model.view(name)[...] = _init_param(name, model.view(name).shape, rng)
        return model

    def reset_temporal_params(self, rng: RngStream | None = None):
        """Restore every temporal parameter to its init value. With an rng the
        attention q/k/v are redrawn; without one they are zeroed too."""
        for name in self.param_names():
            if not is_temporal_param(name):
                continue
            v = self.view(name)
            if rng is not None and name.split(".")[-1] in ("wq", "wk", "wv"):
                v[...] = _init_param(name, v.shape, rng)
            else:
                v[...] = _init_param(name, v.shape, None)

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, sigma_feat, cond=None, want_cache: bool = False):
        """Run the net on (b, n_s, c_in, h, w) input.

        sigma_feat is a per-item scalar feature (already ln(sigma)/4). cond is
        None or an int vector of class labels.
        """
        if x.ndim != 5:
            raise ShapeError(f"expected (b, n_s, c, h, w), got {x.shape}")
        b, n_s, c_in, h, w = x.shape
        if c_in != self.cfg.c_in:
            raise ShapeError(f"model expects {self.cfg.c_in} channels, got {c_in}")
        if h % 2 or w % 2:
            raise ShapeError(f"spatial extents must be even, got {h}x{w}")
        temporal = self.cfg.temporal_enabled and n_s > 1
        if temporal and n_s > self.cfg.n_frames_max:
            raise ShapeError(f"{n_s} frames exceeds n_frames_max={self.cfg.n_frames_max}")
        feat = np.asarray(sigma_feat, dtype=np.float64).reshape(-1)
        if feat.size == 1:
            feat = np.full(b, feat[0])
        if feat.size != b:
            raise ShapeError(f"sigma_feat has {feat.size} entries for batch {b}")
        if cond is not None:
            cond = np.asarray(cond, dtype=np.int64).reshape(-1)
            if cond.size != b:
                raise ShapeError(f"cond has {cond.size} entries for batch {b}")
            if cond.min() < 0 or cond.max() >= self.cfg.n_classes:
                raise ParameterError(f"class labels outside [0, {self.cfg.n_classes})")

        cc: dict = {"temporal": temporal, "cond": cond}
        emb, cc["emb"] = self._emb_fwd(feat, cond)

        p = self.view
        hcur, cc["stem"] = L.conv_fwd(x, p("stem.w"), p("stem.b"), _SPATIAL_PAD)
        hcur, cc["enc"] = self._block_fwd("enc", hcur, emb)
        if temporal:
            hcur, cc["enc.tconv"] = L.conv_fwd(hcur, p("enc.tconv.w"), p("enc.tconv.b"), _TEMPORAL_PAD)
        hcur, cc["pool"] = L.avg_pool2_fwd(hcur)
        hcur, cc["mid.proj"] = L.conv_fwd(hcur, p("mid.proj.w"), p("mid.proj.b"), _SPATIAL_PAD)
        hcur, cc["mid"] = self._block_fwd("mid", hcur, emb)
        if temporal:
            hcur, cc["mid.attn"] = L.attention_fwd(
                hcur, p("mid.attn.wq"), p("mid.attn.bq"), p("mid.attn.wk"), p("mid.attn.bk"),
                p("mid.attn.wv"), p("mid.attn.bv"), p("mid.attn.wo"), p("mid.attn.bo"),
                p("mid.attn.pos"),
            )
            hcur, cc["mid.tconv"] = L.conv_fwd(hcur, p("mid.tconv.w"), p("mid.tconv.b"), _TEMPORAL_PAD)
        hcur, cc["up"] = L.upsample2_fwd(hcur)
        hcur, cc["dec.proj"] = L.conv_fwd(hcur, p("dec.proj.w"), p("dec.proj.b"), _SPATIAL_PAD)
        hcur, cc["dec"] = self._block_fwd("dec", hcur, emb)
        if temporal:
            hcur, cc["dec.tconv"] = L.conv_fwd(hcur, p("dec.tconv.w"), p("dec.tconv.b"), _TEMPORAL_PAD)
        hcur, cc["head.norm"] = L.group_norm_fwd(hcur, p("head.norm.g"), p("head.norm.b"), self.cfg.groups, GN_EPS)
        hcur, cc["head.silu"] = L.silu_fwd(hcur)
        out, cc["head.conv"] = L.conv_fwd(hcur, p("head.conv.w"), p("head.conv.b"), _SPATIAL_PAD)
        if want_cache:
            return out, cc
        return out

    def backward(self, cache: dict, dout: np.ndarray) -> np.ndarray:
        """Flat parameter gradient for the cached forward pass."""
        g = self.zeros_like_params()

        def put(prefix: str, grads: dict):
            for suffix, val in grads.items():
                if suffix == "pos_block":
                    full = np.zeros(self.view("mid.attn.pos").shape)
                    full[: val.shape[0], : val.shape[1]] = val
                    self._acc(g, "mid.attn.pos", full)
                else:
                    self._acc(g, f"{prefix}.{suffix}", val)

        temporal = cache["temporal"]
        d, grads = L.conv_bwd(cache["head.conv"], dout)
        put("head.conv", grads)
        d, _ = L.silu_bwd(cache["head.silu"], d)
        d, grads = L.group_norm_bwd(cache["head.norm"], d)
        put("head.norm", grads)
        demb = np.zeros_like(cache["emb"]["out"])
        if temporal:
            d, grads = L.conv_bwd(cache["dec.tconv"], d)
            put("dec.tconv", grads)
        d = self._block_bwd("dec", cache["dec"], d, g, demb)
        d, grads = L.conv_bwd(cache["dec.proj"], d)
        put("dec.proj", grads)
        d, _ = L.upsample2_bwd(cache["up"], d)
        if temporal:
            d, grads = L.conv_bwd(cache["mid.tconv"], d)
            put("mid.tconv", grads)
            d, grads = L.attention_bwd(cache["mid.attn"], d)
            put("mid.attn", grads)
        d = self._block_bwd("mid", cache["mid"], d, g, demb)
        d, grads = L.conv_bwd(cache["mid.proj"], d)
        put("mid.proj", grads)
        d, _ = L.avg_pool2_bwd(cache["pool"], d)
        if temporal:
            d, grads = L.conv_bwd(cache["enc.tconv"], d)
            put("enc.tconv", grads)
        d = self._block_bwd("enc", cache["enc"], d, g, demb)
        d, grads = L.conv_bwd(cache["stem"], d)
        put("stem", grads)
        self._emb_bwd(cache, demb, g)
        return g

    # -- internals ------------------------------------------------------------

    def _acc(self, g: np.ndarray, name: str, val: np.ndarray):
        sl, shape = self.slices[name]
        g[sl] += val.reshape(-1)

    def _emb_fwd(self, feat: np.ndarray, cond):
        p = self.view
        h1, c1 = L.linear_fwd(feat.reshape(-1, 1), p("emb.mlp1.w"), p("emb.mlp1.b"))
        h2, c2 = L.silu_fwd(h1)
        h3, c3 = L.linear_fwd(h2, p("emb.mlp2.w"), p("emb.mlp2.b"))
        out = h3 if cond is None else h3 + p("emb.cond.table")[cond]
        return out, {"mlp1": c1, "silu": c2, "mlp2": c3, "out": out}

    def _emb_bwd(self, cache: dict, demb: np.ndarray, g: np.ndarray):
        ec = cache["emb"]
        cond = cache["cond"]
        if cond is not None:
            sl, shape = self.slices["emb.cond.table"]
            table_g = g[sl].reshape(shape)
            np.add.at(table_g, cond, demb)
        d, grads = L.linear_bwd(ec["mlp2"], demb)
        self._acc(g, "emb.mlp2.w", grads["w"])
        self._acc(g, "emb.mlp2.b", grads["b"])
        d, _ = L.silu_bwd(ec["silu"], d)
        d, grads = L.linear_bwd(ec["mlp1"], d)
        self._acc(g, "emb.mlp1.w", grads["w"])
        self._acc(g, "emb.mlp1.b", grads["b"])

    def _block_fwd(self, prefix: str, x: np.ndarray, emb: np.ndarray):
        p = self.view
        cc = {}
        h, cc["norm1"] = L.group_norm_fwd(x, p(f"{prefix}.norm1.g"), p(f"{prefix}.norm1.b"), self.cfg.groups, GN_EPS)
        h, cc["silu1"] = L.silu_fwd(h)
        h, cc["conv1"] = L.conv_fwd(h, p(f"{prefix}.conv1.w"), p(f"{prefix}.conv1.b"), _SPATIAL_PAD)
        bias, cc["emb"] = L.linear_fwd(emb, p(f"{prefix}.emb.w"), p(f"{prefix}.emb.b"))
        h = h + bias[:, None, :, None, None]
        h, cc["norm2"] = L.group_norm_fwd(h, p(f"{prefix}.norm2.g"), p(f"{prefix}.norm2.b"), self.cfg.groups, GN_EPS)
        h, cc["silu2"] = L.silu_fwd(h)
        h, cc["conv2"] = L.conv_fwd(h, p(f"{prefix}.conv2.w"), p(f"{prefix}.conv2.b"), _SPATIAL_PAD)
        return x + h, cc

    def _block_bwd(self, prefix: str, cc: dict, dout: np.ndarray, g: np.ndarray, demb: np.ndarray):
        d, grads = L.conv_bwd(cc["conv2"], dout)
        self._acc(g, f"{prefix}.conv2.w", grads["w"])
        self._acc(g, f"{prefix}.conv2.b", grads["b"])
        d, _ = L.silu_bwd(cc["silu2"], d)
        d, grads = L.group_norm_bwd(cc["norm2"], d)
        self._acc(g, f"{prefix}.norm2.g", grads["g"])
        self._acc(g, f"{prefix}.norm2.b", grads["b"])
        dbias = d.sum(axis=(1, 3, 4))
        dembL, grads = L.linear_bwd(cc["emb"], dbias)
        self._acc(g, f"{prefix}.emb.w", grads["w"])
        self._acc(g, f"{prefix}.emb.b", grads["b"])
        demb += dembL
        d, grads = L.conv_bwd(cc["conv1"], d)
        self._acc(g, f"{prefix}.conv1.w", grads["w"])
        self._acc(g, f"{prefix}.conv1.b", grads["b"])
        d, _ = L.silu_bwd(cc["silu1"], d)
        d, grads = L.group_norm_bwd(cc["norm1"], d)
        self._acc(g, f"{prefix}.norm1.g", grads["g"])
        self._acc(g, f"{prefix}.norm1.b", grads["b"])
        return dout + d


def _init_param(name: str, shape: tuple, rng: RngStream | None) -> np.ndarray:
    """Initial value for one named parameter (rng=None gives the
    deterministic part only, used when resetting temporal layers)."""
    leaf = name.split(".")[-1]
    if name.endswith("tconv.w"):
        w = np.zeros(shape)
        for o in range(shape[0]):
            w[o, o, shape[2] // 2, 0, 0] = 1.0
        return w
    if name in ("mid.attn.wo", "mid.attn.pos") or leaf in ("b", "bq", "bk", "bv", "bo"):
        return np.zeros(shape)
    if leaf == "g":
        return np.ones(shape)
    if name == "emb.cond.table":
        if rng is None:
            return np.zeros(shape)
        return 0.1 * gaussian(rng.child(_name_key(name)), shape)
    # remaining leaves are weight matrices / kernels
    if rng is None:
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) >= 2 else shape[0]
    if leaf in ("wq", "wk", "wv"):
        fan_in = shape[0]
    if name.startswith("emb.mlp"):
        fan_in = shape[0]
    return gaussian(rng.child(_name_key(name)), shape) / np.sqrt(fan_in)


def _name_key(name: str) -> int:
    """Stable per-parameter child index so init draws are order-independent."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def init_from_image_model(image_model: DenoiserModel, rng: RngStream | None = None) -> DenoiserModel:
    """Adapt a spatial-only model into a video model.

    Spatial parameters are copied verbatim; temporal convs are reset to the
    identity kernel, the attention output projection and positional bias to
    zero, and the attention q/k/v redrawn when an rng is supplied. The first
    forward pass on any clip therefore equals per-frame application of the
    image model.
    """
    if image_model.cfg.temporal_enabled:
        raise ConfigError("source model already has temporal layers enabled")
    video = DenoiserModel(replace(image_model.cfg, temporal_enabled=True))
    if video.arch_hash() != image_model.arch_hash():
        raise ConfigError("architecture mismatch between image and video model")
    video.params[:] = image_model.params
    video.train_steps = image_model.train_steps
    video.reset_temporal_params(rng)
    return video
