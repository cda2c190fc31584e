import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from invisp import metrics
from invisp.isp import BayerFrame
from invisp.metrics import bmp_size, compression_report, psnr, rgb_ssim, ssim

from conftest import brute_force_ssim


class TestPsnr:
    def test_uniform_offset_is_20db(self):
        a = np.full((3, 8, 8), 0.4)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-6)

    def test_identical_is_inf(self, rng):
        a = rng.uniform(0, 1, (3, 4, 4))
        assert psnr(a, a) == math.inf

    def test_peak_scaling(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 25.5, peak=255) == pytest.approx(20.0, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.uniform(0, 1, (2, 3, 5, 5))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSsim:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (1, 16, 16))
        b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
        assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-6

    def test_multichannel_brute_force(self, rng):
        a = rng.uniform(0, 1, (3, 14, 15))
        b = rng.uniform(0, 1, (3, 14, 15))
        assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-6

    def test_matches_skimage(self, rng):
        a = rng.uniform(0, 1, (32, 40))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        ref = structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        # skimage averages over the interior, i.e. the valid windows
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_identical_is_one(self, rng):
        a = rng.uniform(0, 1, (3, 16, 16))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_small_image_shrinks_window(self, rng):
        a = rng.uniform(0, 1, (1, 8, 8))
        b = rng.uniform(0, 1, (1, 8, 8))
        assert abs(ssim(a, b) - brute_force_ssim(a, b, size=7)) < 1e-6

    def test_rgb_ssim_uses_luma(self, rng):
        a = rng.uniform(0, 1, (3, 16, 16))
        b = rng.uniform(0, 1, (3, 16, 16))
        la = np.tensordot([0.299, 0.587, 0.114], a, axes=1)[None]
        lb = np.tensordot([0.299, 0.587, 0.114], b, axes=1)[None]
        assert rgb_ssim(a, b) == pytest.approx(brute_force_ssim(la, lb), abs=1e-6)


class TestCompression:
    def test_bmp_8x8x14(self):
        assert bmp_size(8, 8, 14) == 166

    def test_bmp_values(self):
        assert bmp_size(1, 1, 8) == 55
        assert bmp_size(3000, 4000, 14) == 21_000_054
        assert bmp_size(1, 1, 14) == pytest.approx(55.75)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 512), st.integers(1, 512), st.integers(1, 16))
    def test_bmp_monotone(self, h, w, b):
        assert bmp_size(h + 1, w, b) > bmp_size(h, w, b)
        assert bmp_size(h, w, b + 1) > bmp_size(h, w, b)

    def test_bmp_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            bmp_size(0, 8, 14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 256), st.integers(1, 256), st.integers(1, 16), st.integers(1, 10**6))
    def test_report_identities(self, h, w, b, nbytes):
        rep = compression_report((h, w, b), nbytes)
        assert rep.B_BMP == bmp_size(h, w, b)
        assert rep.C_ratio == rep.B_BMP / rep.B_JPEG
        assert rep.bpp == 8 * rep.B_JPEG / (rep.H * rep.W)

    def test_report_from_frame(self):
        f = BayerFrame(np.zeros((8, 8)), "RGGB", 14, (1, 1, 1))
        rep = compression_report(f, 83)
        assert (rep.B_BMP, rep.C_ratio, rep.bpp) == (166, 2.0, 8 * 83 / 64)
        assert json.loads(rep.to_json())["B_BMP"] == 166
        assert "C_ratio" in rep.table()

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            compression_report((8, 8, 14), 0)


def test_format_metrics():
    text = metrics.format_metrics({"psnr": math.inf, "ssim": 0.5, "n": 3})
    assert text.splitlines() == ["psnr  inf", "ssim  0.5000", "n     3"]
