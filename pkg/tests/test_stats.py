import math

import numpy as np
import pytest

from distillab.stats import kde, moving_average, normal_cdf, pearson, silverman_bandwidth


class TestPearson:
    def test_self_correlation(self):
        x = np.array([1.0, 4.0, 2.0, 8.0])
        assert pearson(x, x) == 1.0

    def test_anticorrelation(self):
        x = np.array([1.0, 4.0, 2.0, 8.0])
        assert pearson(x, -x) == -1.0

    def test_hand_computed_fixture(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([2.0, 1.0, 4.0, 3.0])
        assert abs(pearson(x, y) - 0.6) < 1e-12

    def test_zero_variance_error(self):
        with pytest.raises(ValueError, match="variance"):
            pearson(np.ones(4), np.arange(4.0))

    def test_affine_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=30)
        y = rng.normal(size=30)
        r = pearson(x, y)
        assert abs(pearson(3.2 * x + 1.0, y) - r) < 1e-12
        assert abs(pearson(x, 0.5 * y - 7.0) - r) < 1e-12


class TestNormalCdf:
    def test_at_mean(self):
        assert normal_cdf(3.0, 3.0, 2.0) == 0.5

    def test_tabulated_value(self):
        assert abs(normal_cdf(1.96) - 0.975002) < 1e-5

    def test_monotone(self):
        grid = np.linspace(-5, 5, 201)
        vals = [normal_cdf(g, 0.3, 1.7) for g in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            normal_cdf(0.0, 0.0, 0.0)


class TestKde:
    def test_integrates_to_one(self):
        rng = np.random.default_rng(1)
        grid, dens = kde(rng.normal(size=400))
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3

    def test_symmetric_data_symmetric_density(self):
        x = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
        grid, dens = kde(x, bandwidth=0.7, grid_size=511)
        assert np.max(np.abs(dens - dens[::-1])) < 1e-9

    def test_matches_per_point_kernel_sum(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=50)
        h = silverman_bandwidth(x)
        grid, dens = kde(x)
        for gi in [7, 100, 333, 470]:
            expected = sum(
                math.exp(-0.5 * ((grid[gi] - xi) / h) ** 2) for xi in x
            ) / (len(x) * h * math.sqrt(2 * math.pi))
            assert abs(dens[gi] - expected) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        _, dens = kde(rng.exponential(size=100))
        assert (dens >= 0).all()

    def test_zero_variance_error(self):
        with pytest.raises(ValueError):
            kde(np.ones(10))


class TestMovingAverage:
    def test_window_one_identity(self):
        x = np.array([3.0, 1.0, 4.0])
        np.testing.assert_array_equal(moving_average(x, 1), x)

    def test_constant_series(self):
        np.testing.assert_array_equal(moving_average(np.full(6, 2.5), 3), np.full(6, 2.5))

    def test_edge_truncated_means(self):
        out = moving_average(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 3)
        np.testing.assert_allclose(out, [1.5, 2.0, 3.0, 4.0, 4.5])

    def test_window_validation(self):
        with pytest.raises(ValueError):
            moving_average(np.arange(5.0), 4)
        with pytest.raises(ValueError):
            moving_average(np.arange(3.0), 5)
