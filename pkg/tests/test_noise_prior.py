"""Tests for the correlated video noise priors."""

import math

import numpy as np
import pytest

from vdlab.errors import ParameterError, ShapeError
from vdlab.ndcore import RngStream
from vdlab.noise_prior import (
    KINDS,
    NoiseSpec,
    covariance_matrix,
    empirical_correlation,
    frame_covariance,
    sample_noise,
)

SHAPE = (4, 6, 1, 8, 8)  # (b, n_s, c, h, w)


def draws(spec, seed=0, shape=SHAPE):
    return sample_noise(spec, shape, RngStream(seed, 3))


class TestFrameCovariance:
    def test_mixed_alpha_one_offdiagonal_is_half(self):
        spec = NoiseSpec("mixed", alpha=1.0)
        assert frame_covariance(spec, 0, 5) == pytest.approx(0.5)
        assert frame_covariance(spec, 2, 2) == pytest.approx(1.0)

    def test_mixed_general_alpha(self):
        for a in (0.3, 2.0, 10.0):
            spec = NoiseSpec("mixed", alpha=a)
            assert frame_covariance(spec, 0, 1) == pytest.approx(a * a / (1 + a * a))

    def test_progressive_is_ar1_with_geometric_decay(self):
        a = 2.0
        spec = NoiseSpec("progressive", alpha=a)
        phi = a / math.sqrt(1 + a * a)  # 2/sqrt(5)
        assert frame_covariance(spec, 3, 4) == pytest.approx(phi)
        assert frame_covariance(spec, 0, 3) == pytest.approx(phi**3)

    def test_iid_and_frozen_limits(self):
        assert frame_covariance(NoiseSpec("iid"), 0, 9) == 0.0
        assert frame_covariance(NoiseSpec("frozen"), 0, 9) == 1.0

    def test_mixed_limits_match_iid_and_frozen(self):
        assert frame_covariance(NoiseSpec("mixed", alpha=0.0), 0, 1) == pytest.approx(0.0)
        assert frame_covariance(NoiseSpec("mixed", alpha=math.inf), 0, 1) == pytest.approx(1.0)

    def test_covariance_matrix_assembles_pairwise_values(self):
        spec = NoiseSpec("progressive", alpha=1.0)
        m = covariance_matrix(spec, 4)
        assert m.shape == (4, 4)
        np.testing.assert_allclose(m, m.T)
        np.testing.assert_allclose(np.diag(m), 1.0)
        assert m[0, 2] == pytest.approx(frame_covariance(spec, 0, 2))


class TestSampleNoise:
    @pytest.mark.parametrize("kind", KINDS)
    def test_unit_marginals(self, kind):
        spec = NoiseSpec(kind, alpha=1.5)
        z = draws(spec, shape=(32, 6, 1, 16, 16))
        # every frame is marginally standard normal; 8192 pooled samples per
        # frame put the variance-of-variance near 0.016, so 0.08 is ~5 sigma
        per_frame_var = z.var(axis=(0, 2, 3, 4))
        np.testing.assert_allclose(per_frame_var, 1.0, atol=0.08)
        assert abs(z.mean()) < 0.03

    @pytest.mark.parametrize("kind", ("mixed", "progressive"))
    def test_alpha_zero_bitwise_equals_iid(self, kind):
        a = draws(NoiseSpec(kind, alpha=0.0))
        b = draws(NoiseSpec("iid"))
        np.testing.assert_array_equal(a, b)

    def test_alpha_inf_freezes_frames(self):
        # mixed(inf) repeats its shared draw; progressive(inf) degenerates to
        # the frozen kind bit for bit
        m = draws(NoiseSpec("mixed", alpha=math.inf))
        for i in range(1, SHAPE[1]):
            np.testing.assert_array_equal(m[:, i], m[:, 0])
        p = draws(NoiseSpec("progressive", alpha=math.inf))
        np.testing.assert_array_equal(p, draws(NoiseSpec("frozen")))

    def test_frozen_repeats_first_iid_frame(self):
        z = draws(NoiseSpec("frozen"))
        for i in range(1, SHAPE[1]):
            np.testing.assert_array_equal(z[:, i], z[:, 0])
        # with a single batch element the draw offsets line up exactly
        one = (1,) + SHAPE[1:]
        np.testing.assert_array_equal(
            draws(NoiseSpec("frozen"), shape=one)[:, 0],
            draws(NoiseSpec("iid"), shape=one)[:, 0],
        )

    def test_empirical_matches_analytic_covariance(self):
        spec = NoiseSpec("progressive", alpha=2.0)
        z = draws(spec, shape=(64, 6, 1, 12, 12))
        got = empirical_correlation(z)
        want = covariance_matrix(spec, 6)
        np.testing.assert_allclose(got, want, atol=0.04)

    def test_mixed_empirical_offdiagonal_flat(self):
        z = draws(NoiseSpec("mixed", alpha=1.0), shape=(64, 5, 1, 12, 12))
        got = empirical_correlation(z)
        off = got[~np.eye(5, dtype=bool)]
        np.testing.assert_allclose(off, 0.5, atol=0.04)

    def test_deterministic_given_stream_state(self):
        spec = NoiseSpec("progressive", alpha=0.7)
        a = sample_noise(spec, SHAPE, RngStream(5, 3))
        b = sample_noise(spec, SHAPE, RngStream(5, 3))
        np.testing.assert_array_equal(a, b)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            sample_noise(NoiseSpec("iid"), (4, 6, 8, 8), RngStream(0, 3))


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            NoiseSpec("perlin")

    def test_negative_and_nan_alpha_rejected(self):
        with pytest.raises(ParameterError):
            NoiseSpec("progressive", alpha=-0.5)
        with pytest.raises(ParameterError):
            NoiseSpec("mixed", alpha=math.nan)

    def test_labels(self):
        assert NoiseSpec("iid").label() == "iid"
        assert NoiseSpec("mixed", alpha=2.0).label() == "mixed(alpha=2)"
        assert NoiseSpec("progressive", alpha=math.inf).label() == "progressive(alpha=inf)"
