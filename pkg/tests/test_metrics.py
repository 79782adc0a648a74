import math

import numpy as np
import pytest

from resnct.errors import NumericalError, ShapeError
from resnct.metrics import (
    LineProfile,
    MetricsReport,
    attenuation_correlation,
    attenuation_histogram_rmse,
    line_profile,
    mae,
    ncc,
    psnr,
    roi_mean_hu,
    rmse,
    ssim,
)


def reference_ssim(a, b):
    """Independent implementation of the local-statistics similarity index
    (direct per-pixel formula with an explicitly normalized Gaussian window),
    used as an oracle against the production version."""
    from scipy.signal import convolve2d

    size, sigma = 11, 1.5
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    window /= window.sum()

    def smooth(x):
        padded = np.pad(x, size // 2, mode="edge")
        return convolve2d(padded, window, mode="valid")

    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = smooth(a), smooth(b)
    sa = smooth(a * a) - mu_a**2
    sb = smooth(b * b) - mu_b**2
    sab = smooth(a * b) - mu_a * mu_b
    values = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (sa + sb + c2)
    )
    return values.mean()


@pytest.fixture
def image_pair():
    rng = np.random.default_rng(0)
    return rng.random((32, 32)), rng.random((32, 32))


class TestScalarMetrics:
    def test_psnr_rmse_identity(self, image_pair):
        a, b = image_pair
        assert psnr(a, b) == pytest.approx(-20 * math.log10(rmse(a, b)), abs=1e-12)

    def test_psnr_identical_is_infinite(self):
        a = np.random.default_rng(1).random((16, 16))
        assert math.isinf(psnr(a, a))

    def test_psnr_constant_offset(self):
        a = np.zeros((8, 8))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-10)

    def test_mae_rmse_constant_gap(self):
        a = np.zeros((8, 8))
        assert mae(a, a + 0.02) == pytest.approx(0.02)
        assert rmse(a, a + 0.02) == pytest.approx(0.02)

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            assert rmse(a, b) >= mae(a, b)

    def test_ncc_affine_invariance(self, image_pair):
        a, _ = image_pair
        assert ncc(a, a) == pytest.approx(1.0)
        assert ncc(a, 2 * a - 0.3) == pytest.approx(1.0)
        assert ncc(a, -a) == pytest.approx(-1.0)

    def test_ncc_constant_input_rejected(self):
        with pytest.raises(NumericalError):
            ncc(np.ones((8, 8)), np.random.default_rng(0).random((8, 8)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mae(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_symmetry(self, image_pair):
        a, b = image_pair
        for metric in (psnr, ssim, ncc, mae, rmse):
            assert metric(a, b) == pytest.approx(metric(b, a), abs=1e-12)


class TestSsim:
    def test_identical(self, image_pair):
        a, _ = image_pair
        assert ssim(a, a) == pytest.approx(1.0)

    def test_inverted_less_than_one(self, image_pair):
        a, _ = image_pair
        assert ssim(a, 1 - a) < 1.0

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(3)
        checker = np.indices((16, 16)).sum(axis=0) % 2 * 0.8 + 0.1
        pairs = [
            (checker, np.clip(checker + 0.1, 0, 1)),
            (rng.random((24, 24)), rng.random((24, 24))),
            (rng.random((32, 16)), rng.random((32, 16))),
        ]
        for a, b in pairs:
            assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-6)

    def test_too_small_image_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestLineProfile:
    def test_constant_image(self):
        img = np.full((20, 20), 50.0)
        profile = line_profile(img, (2, 2), (15, 15), 10)
        np.testing.assert_allclose(profile.values_hu, 50.0)

    def test_bilinear_exact_on_gradient(self):
        img = np.tile(np.arange(20.0), (20, 1))  # left-right ramp
        profile = line_profile(img, (10, 0), (10, 19), 20)
        np.testing.assert_allclose(profile.values_hu, np.arange(20.0), atol=1e-9)

    def test_self_rmse_zero(self):
        img = np.random.default_rng(4).random((20, 20)) * 100
        a = line_profile(img, (1, 1), (18, 18), 50)
        b = line_profile(img, (1, 1), (18, 18), 50)
        assert float(np.sqrt(np.mean((a.values_hu - b.values_hu) ** 2))) == 0.0

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ShapeError):
            line_profile(np.zeros((10, 10)), (0, 0), (10, 5), 5)

    def test_endpoints_inclusive(self):
        img = np.arange(100.0).reshape(10, 10)
        profile = line_profile(img, (0, 0), (9, 9), 5)
        assert profile.values_hu[0] == img[0, 0]
        assert profile.values_hu[-1] == img[9, 9]
        assert isinstance(profile, LineProfile)


class TestRoiAndHistograms:
    def test_roi_mean_uniform(self):
        img = np.full((10, 10), 42.0)
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:6, 3:6] = True
        assert roi_mean_hu(img, mask) == 42.0

    def test_roi_empty_mask_rejected(self):
        with pytest.raises(NumericalError):
            roi_mean_hu(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))

    def test_histogram_rmse_identical(self):
        region = np.random.default_rng(5).uniform(-100, 200, 500)
        assert attenuation_histogram_rmse(region, region) == 0.0

    def test_histogram_rmse_disjoint_two_bins(self):
        # All of a in the lower bin, all of b in the upper: density-mass
        # difference is (1, -1), RMSE exactly 1.
        a = np.full(100, -100.0)
        b = np.full(100, 200.0)
        assert attenuation_histogram_rmse(a, b, bins=2) == pytest.approx(1.0)

    def test_correlation_self(self):
        region = np.random.default_rng(6).uniform(-50, 150, 1000)
        assert attenuation_correlation(region, region) == pytest.approx(1.0)

    def test_correlation_independent_noise_small(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=5000)
        b = rng.normal(size=5000)
        assert abs(attenuation_correlation(a, b)) < 0.2


class TestMetricsReport:
    def test_aggregation_population_sd(self):
        rng = np.random.default_rng(8)
        report = MetricsReport()
        for _ in range(5):
            report.add_pair(rng.random((16, 16)), rng.random((16, 16)))
        summary = report.summary()
        assert summary["image_count"] == 5
        assert summary["rmse"]["sd"] == pytest.approx(np.std(report.rmse))

    def test_infinite_psnr_excluded(self):
        a = np.random.default_rng(9).random((16, 16))
        report = MetricsReport()
        report.add_pair(a, a)
        report.add_pair(a, np.clip(a + 0.05, 0, 1))
        summary = report.summary()
        assert summary["psnr_excluded_count"] == 1
        assert math.isfinite(summary["psnr_db"]["mean"])

    def test_json_serializable(self):
        a = np.random.default_rng(10).random((16, 16))
        report = MetricsReport()
        report.add_pair(a, a)
        assert '"inf"' in report.to_json()
