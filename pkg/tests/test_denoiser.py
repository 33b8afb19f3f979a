"""Tests for the hand-written denoiser network, its optimizer, and checkpoints."""

import numpy as np
import pytest

from vdlab.denoiser_net import (
    DenoiserModel,
    ModelConfig,
    OptimizerConfig,
    finite_difference_check,
    init_from_image_model,
    init_optimizer,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from vdlab.denoiser_net.layers import (
    attention_bwd,
    attention_fwd,
    avg_pool2_bwd,
    avg_pool2_fwd,
    conv_bwd,
    conv_fwd,
    group_norm_bwd,
    group_norm_fwd,
    linear_fwd,
    silu_fwd,
    upsample2_bwd,
    upsample2_fwd,
)
from vdlab.denoiser_net.model import is_temporal_param
from vdlab.errors import ConfigError, FormatError, NumericError, ShapeError
from vdlab.ndcore import RngStream, conv3d, gaussian

TINY = ModelConfig(c_in=1, channels=8, emb_dim=8, groups=2, n_classes=4, n_frames_max=4)


def rand(seed, shape):
    return gaussian(RngStream(seed, 2), shape)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        dn = f()
        x[i] = old
        g[i] = (up - dn) / (2 * h)
        it.iternext()
    return g


class TestLayers:
    def test_conv_matches_core_conv3d_plus_bias(self):
        x = rand(0, (2, 3, 2, 5, 5))
        w = rand(1, (4, 2, 1, 3, 3))
        b = rand(2, (4,))
        out, _ = conv_fwd(x, w, b, (0, 1, 1))
        want = conv3d(x, w, padding=(0, 1, 1)) + b.reshape(1, 1, 4, 1, 1)
        np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-12)

    def test_conv_backward_against_numeric(self):
        x = rand(3, (1, 2, 2, 3, 3))
        w = rand(4, (2, 2, 1, 3, 3))
        b = rand(5, (2,))
        dout = rand(6, (1, 2, 2, 3, 3))

        def loss():
            out, _ = conv_fwd(x, w, b, (0, 1, 1))
            return float(np.sum(out * dout))

        _, cache = conv_fwd(x, w, b, (0, 1, 1))
        dx, grads = conv_bwd(cache, dout)
        np.testing.assert_allclose(dx, numeric_grad(loss, x), atol=1e-7)
        np.testing.assert_allclose(grads["w"], numeric_grad(loss, w), atol=1e-7)
        np.testing.assert_allclose(grads["b"], numeric_grad(loss, b), atol=1e-7)

    def test_group_norm_normalizes_per_frame_groups(self):
        x = rand(7, (2, 3, 4, 4, 4))
        gamma, beta = np.ones(4), np.zeros(4)
        out, _ = group_norm_fwd(x, gamma, beta, groups=2)
        # statistics pool channels within a group and pixels, per (item, frame)
        g = out.reshape(2, 3, 2, 2 * 4 * 4)
        np.testing.assert_allclose(g.mean(axis=3), 0.0, atol=1e-12)
        np.testing.assert_allclose(g.var(axis=3), 1.0, atol=1e-3)

    def test_group_norm_backward_against_numeric(self):
        x = rand(8, (1, 2, 4, 2, 2))
        gamma = rand(9, (4,)) * 0.1 + 1.0
        beta = rand(10, (4,)) * 0.1
        dout = rand(11, (1, 2, 4, 2, 2))

        def loss():
            out, _ = group_norm_fwd(x, gamma, beta, groups=2)
            return float(np.sum(out * dout))

        _, cache = group_norm_fwd(x, gamma, beta, groups=2)
        dx, grads = group_norm_bwd(cache, dout)
        np.testing.assert_allclose(dx, numeric_grad(loss, x), atol=1e-6)
        np.testing.assert_allclose(grads["g"], numeric_grad(loss, gamma), atol=1e-6)
        np.testing.assert_allclose(grads["b"], numeric_grad(loss, beta), atol=1e-6)

    def test_silu_formula(self):
        x = np.linspace(-4, 4, 17)
        out, _ = silu_fwd(x)
        np.testing.assert_allclose(out, x / (1 + np.exp(-x)), rtol=1e-14)

    def test_linear_formula(self):
        x = rand(12, (5, 3))
        w = rand(13, (3, 7))
        b = rand(14, (7,))
        out, _ = linear_fwd(x, w, b)
        np.testing.assert_allclose(out, x @ w + b, rtol=1e-13)

    def test_attention_against_direct_softmax(self):
        b, n_s, c, h, w = 1, 3, 4, 2, 2
        x = rand(15, (b, n_s, c, h, w))
        wq, wk, wv, wo = (rand(16 + i, (c, c)) for i in range(4))
        bq, bk, bv, bo = (rand(20 + i, (c,)) * 0.1 for i in range(4))
        pos = rand(24, (4, 4)) * 0.1
        out, _ = attention_fwd(x, wq, bq, wk, bk, wv, bv, wo, bo, pos)

        want = x.copy()
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    t = x[bi, :, :, i, j]  # (n_s, c) tokens
                    q, k, v = t @ wq + bq, t @ wk + bk, t @ wv + bv
                    s = q @ k.T / np.sqrt(c) + pos[:n_s, :n_s]
                    e = np.exp(s - s.max(axis=1, keepdims=True))
                    a = e / e.sum(axis=1, keepdims=True)
                    want[bi, :, :, i, j] += (a @ v) @ wo + bo
        np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-12)

    def test_attention_backward_against_numeric(self):
        b, n_s, c, h, w = 1, 2, 2, 2, 1
        x = rand(25, (b, n_s, c, h, w))
        mats = {n: rand(26 + i, (c, c)) for i, n in enumerate("wq wk wv wo".split())}
        vecs = {n: rand(30 + i, (c,)) * 0.1 for i, n in enumerate("bq bk bv bo".split())}
        pos = rand(34, (3, 3)) * 0.1
        dout = rand(35, (b, n_s, c, h, w))

        def run():
            out, _ = attention_fwd(
                x, mats["wq"], vecs["bq"], mats["wk"], vecs["bk"],
                mats["wv"], vecs["bv"], mats["wo"], vecs["bo"], pos,
            )
            return float(np.sum(out * dout))

        _, cache = attention_fwd(
            x, mats["wq"], vecs["bq"], mats["wk"], vecs["bk"],
            mats["wv"], vecs["bv"], mats["wo"], vecs["bo"], pos,
        )
        dx, grads = attention_bwd(cache, dout)
        np.testing.assert_allclose(dx, numeric_grad(run, x), atol=1e-6)
        for n in mats:
            np.testing.assert_allclose(grads[n], numeric_grad(run, mats[n]), atol=1e-6)
        for n in vecs:
            np.testing.assert_allclose(grads[n], numeric_grad(run, vecs[n]), atol=1e-6)
        np.testing.assert_allclose(
            grads["pos_block"], numeric_grad(run, pos)[:n_s, :n_s], atol=1e-6
        )

    def test_pool_and_upsample_are_adjoint(self):
        # <pool(x), y> == <x, pool^T(y)> and likewise for upsampling
        x = rand(36, (2, 2, 3, 4, 4))
        pooled, pc = avg_pool2_fwd(x)
        y = rand(37, (2, 2, 3, 2, 2))
        lhs = np.sum(pooled * y)
        rhs = np.sum(x * avg_pool2_bwd(pc, y)[0])
        assert lhs == pytest.approx(rhs, rel=1e-13)

        u = rand(38, (2, 2, 3, 2, 2))
        up, uc = upsample2_fwd(u)
        yy = rand(39, (2, 2, 3, 4, 4))
        assert np.sum(up * yy) == pytest.approx(
            np.sum(u * upsample2_bwd(uc, yy)[0]), rel=1e-13
        )

    def test_pool_halves_and_upsample_doubles(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 1, 4, 4)
        p, _ = avg_pool2_fwd(x)
        np.testing.assert_allclose(p[0, 0, 0], [[2.5, 4.5], [10.5, 12.5]])
        u, _ = upsample2_fwd(p)
        assert u.shape == x.shape
        np.testing.assert_allclose(u[0, 0, 0, :2, :2], 2.5)


class TestModel:
    def test_forward_shapes_and_finiteness(self):
        model = DenoiserModel.initialize(TINY, RngStream(0, 2))
        x = rand(40, (2, 3, 1, 8, 8))
        out = model.forward(x, np.array([0.1, -0.2]), cond=np.array([0, 2]))
        assert out.shape == x.shape
        assert np.all(np.isfinite(out))

    def test_input_validation(self):
        model = DenoiserModel.initialize(TINY, RngStream(0, 2))
        with pytest.raises(ShapeError):
            model.forward(rand(41, (2, 3, 1, 7, 8)), np.zeros(2))  # odd height
        with pytest.raises(ShapeError):
            model.forward(rand(42, (2, 5, 1, 8, 8)), np.zeros(2))  # > n_frames_max
        with pytest.raises(Exception):
            model.forward(rand(43, (2, 3, 1, 8, 8)), np.zeros(2), cond=np.array([0, 9]))

    def test_spatial_model_factorizes_over_frames(self):
        cfg = ModelConfig(
            c_in=1, channels=8, emb_dim=8, groups=2, n_classes=4,
            n_frames_max=4, temporal_enabled=False,
        )
        model = DenoiserModel.initialize(cfg, RngStream(1, 2))
        x = rand(44, (2, 4, 1, 8, 8))
        feat = np.array([0.3, -0.1])
        full = model.forward(x, feat)
        for i in range(4):
            # no value crosses the frame axis; slicing only reorders the GEMM
            # accumulation, so agreement is to rounding, not bitwise
            one = model.forward(x[:, i : i + 1], feat)
            np.testing.assert_allclose(full[:, i : i + 1], one, rtol=1e-12, atol=1e-13)

    def test_video_init_equals_image_model_per_frame(self):
        img_cfg = ModelConfig(
            c_in=1, channels=8, emb_dim=8, groups=2, n_classes=4,
            n_frames_max=4, temporal_enabled=False,
        )
        img = DenoiserModel.initialize(img_cfg, RngStream(2, 2))
        vid = init_from_image_model(img, RngStream(3, 2))
        x = rand(45, (2, 4, 1, 8, 8))
        feat = np.array([0.0, 0.5])
        cond = np.array([1, 3])
        np.testing.assert_array_equal(
            vid.forward(x, feat, cond), img.forward(x, feat, cond)
        )

    def test_init_from_image_model_rejects_temporal_source(self):
        vid = DenoiserModel.initialize(TINY, RngStream(4, 2))
        with pytest.raises(ConfigError):
            init_from_image_model(vid)

    def test_arch_hash_ignores_temporal_flag(self):
        a = DenoiserModel(TINY)
        b = DenoiserModel(
            ModelConfig(c_in=1, channels=8, emb_dim=8, groups=2, n_classes=4,
                        n_frames_max=4, temporal_enabled=False)
        )
        c = DenoiserModel(
            ModelConfig(c_in=1, channels=16, emb_dim=8, groups=2, n_classes=4, n_frames_max=4)
        )
        assert a.arch_hash() == b.arch_hash()
        assert a.arch_hash() != c.arch_hash()

    def test_temporal_params_are_flagged(self):
        model = DenoiserModel(TINY)
        names = model.param_names()
        temporal = {n for n in names if is_temporal_param(n)}
        assert any("tconv" in n for n in temporal)
        assert any("attn" in n for n in temporal)
        assert all("norm" not in n for n in temporal)

    def test_forward_deterministic(self):
        model = DenoiserModel.initialize(TINY, RngStream(5, 2))
        x = rand(46, (1, 2, 1, 8, 8))
        a = model.forward(x, np.zeros(1))
        b = model.forward(x, np.zeros(1))
        np.testing.assert_array_equal(a, b)

    def test_gradients_match_finite_differences(self):
        # exact backprop against central differences over every parameter of
        # a model small enough to sweep
        model = DenoiserModel.initialize(
            ModelConfig(c_in=1, channels=4, emb_dim=4, groups=2, n_classes=2, n_frames_max=3),
            RngStream(6, 2),
        )
        assert model.n_params <= 10_000
        x = rand(47, (2, 3, 1, 4, 4))
        eps = rand(48, (2, 3, 1, 4, 4))
        report = finite_difference_check(
            model, x, np.array([0, 1]), np.array([0.4, 1.3]), eps
        )
        assert report.ok(1e-4), f"max rel err {report.max_rel_err:g} at {report.worst_param}"


class TestOptimizer:
    def test_adamw_hand_trace_single_param(self):
        cfg = OptimizerConfig(lr=0.1, beta1=0.9, beta2=0.99, weight_decay=0.1,
                              eps=1e-8, ema_decay=0.5)
        model = DenoiserModel(TINY)
        model.params[:] = 1.0
        state = init_optimizer(model, cfg)
        g = np.full(model.n_params, 2.0)
        optimizer_step(state, model, g)

        # step 1: m_hat = g, v_hat = g^2; decoupled decay applies first
        w = 1.0 - 0.1 * 0.1 * 1.0
        w -= 0.1 * 2.0 / (np.sqrt(4.0) + 1e-8)
        np.testing.assert_allclose(model.params, w, rtol=1e-12)
        np.testing.assert_allclose(state.ema, 0.5 * 1.0 + 0.5 * w, rtol=1e-12)
        assert state.step == 1

        optimizer_step(state, model, g)
        m2 = 0.9 * 0.2 + 0.1 * 2.0  # m after two identical grads (m1 = 0.1 g)
        v2 = 0.99 * 0.04 + 0.01 * 4.0
        mh = m2 / (1 - 0.9**2)
        vh = v2 / (1 - 0.99**2)
        w2 = w * (1 - 0.1 * 0.1) - 0.1 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(model.params, w2, rtol=1e-12)

    def test_weight_decay_is_decoupled(self):
        # zero gradient must still shrink weights, and the shrink must not
        # touch the moment estimates
        cfg = OptimizerConfig(lr=0.5, weight_decay=0.01)
        model = DenoiserModel(TINY)
        model.params[:] = 3.0
        state = init_optimizer(model, cfg)
        optimizer_step(state, model, np.zeros(model.n_params))
        np.testing.assert_allclose(model.params, 3.0 * (1 - 0.5 * 0.01), rtol=1e-14)
        np.testing.assert_array_equal(state.m, 0.0)

    def test_non_finite_gradient_is_named(self):
        model = DenoiserModel.initialize(TINY, RngStream(7, 2))
        state = init_optimizer(model)
        g = np.zeros(model.n_params)
        sl, _ = model.slices["head.conv.b"]
        g[sl.start] = np.nan
        with pytest.raises(NumericError, match="head.conv.b"):
            optimizer_step(state, model, g)

    def test_ema_starts_at_init_and_tracks(self):
        model = DenoiserModel.initialize(TINY, RngStream(8, 2))
        state = init_optimizer(model, OptimizerConfig(ema_decay=0.9))
        np.testing.assert_array_equal(state.ema, model.params)
        before = model.params.copy()
        optimizer_step(state, model, np.ones(model.n_params))
        np.testing.assert_allclose(
            state.ema, 0.9 * before + 0.1 * model.params, rtol=1e-12
        )


class TestCheckpoint:
    def test_round_trip_params_ema_meta(self, tmp_path):
        model = DenoiserModel.initialize(TINY, RngStream(9, 2))
        model.train_steps = 123
        ema = model.params + 0.25
        save_checkpoint(tmp_path / "ck", model, ema, extra={"note": "abc", "alpha": "2"})
        back, ema2, meta = load_checkpoint(tmp_path / "ck")
        np.testing.assert_array_equal(back.params, model.params)
        np.testing.assert_array_equal(ema2, ema)
        assert back.cfg == model.cfg
        assert back.train_steps == 123
        assert meta["note"] == "abc" and meta["alpha"] == "2"

    def test_round_trip_without_ema(self, tmp_path):
        model = DenoiserModel.initialize(TINY, RngStream(10, 2))
        save_checkpoint(tmp_path / "ck", model)
        _, ema, _ = load_checkpoint(tmp_path / "ck")
        assert ema is None

    def test_extra_key_collision_rejected(self, tmp_path):
        model = DenoiserModel(TINY)
        with pytest.raises(FormatError):
            save_checkpoint(tmp_path / "ck", model, extra={"channels": "9"})

    def test_corrupt_meta_rejected(self, tmp_path):
        model = DenoiserModel(TINY)
        save_checkpoint(tmp_path / "ck", model)
        meta = (tmp_path / "ck" / "meta.txt").read_text()
        (tmp_path / "ck" / "meta.txt").write_text(
            meta.replace("meta_version = 1", "meta_version = 99")
        )
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "ck")

    def test_arch_mismatch_rejected(self, tmp_path):
        model = DenoiserModel.initialize(TINY, RngStream(11, 2))
        save_checkpoint(tmp_path / "ck", model)
        meta = (tmp_path / "ck" / "meta.txt").read_text()
        (tmp_path / "ck" / "meta.txt").write_text(meta.replace("channels = 8", "channels = 4"))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "ck")


class TestTraining:
    def test_loss_decreases_on_fixed_batch(self):
        from vdlab.edm import denoising_loss_terms

        model = DenoiserModel.initialize(
            ModelConfig(c_in=1, channels=4, emb_dim=4, groups=2, n_classes=2, n_frames_max=2),
            RngStream(12, 2),
        )
        state = init_optimizer(model, OptimizerConfig(lr=3e-3, weight_decay=0.0))
        x = rand(49, (4, 2, 1, 4, 4)) * 0.3
        eps = rand(50, (4, 2, 1, 4, 4))
        sig = np.array([0.3, 0.8, 0.3, 0.8])
        cond = np.array([0, 1, 1, 0])
        first, _ = denoising_loss_terms(model, x, cond, sig, eps)
        for _ in range(30):
            _, g = denoising_loss_terms(model, x, cond, sig, eps)
            optimizer_step(state, model, g)
        last, _ = denoising_loss_terms(model, x, cond, sig, eps)
        assert last < 0.5 * first
