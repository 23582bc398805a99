"""Tests for rotation, aggregation and density estimation."""

from __future__ import annotations

import numpy as np
import pytest

from multiret.epochs import ReturnPanel, mean_only_normalize, normalize_positions, normalize_time_series
from multiret.errors import DataError, RankError
from multiret.models import equicorrelation
from multiret.rotate import (
    BinningKind,
    BinningRule,
    EmpiricalDensity,
    SamplePool,
    aggregate,
    estimate_density,
    loglog_frame,
    original_densities,
    per_eigenvector_densities,
    pool_original,
    rotate_returns,
)
from multiret.spectra import covariance, eigendecompose, position_correlation, time_correlation


def _normalized(k: int = 6, t: int = 300, seed: int = 2, rho: float = 0.4, slice_id: str = "panel"):
    rng = np.random.default_rng(seed)
    z = np.linalg.cholesky(equicorrelation(k, rho)) @ rng.standard_normal((k, t))
    return normalize_time_series(ReturnPanel(tuple(f"T{i}" for i in range(k)), z, slice_id=slice_id))


def _rotated(**kwargs):
    normalized = _normalized(**kwargs)
    return rotate_returns(normalized, eigendecompose(time_correlation(normalized)))


class TestRotate:
    def test_rescaled_directions_are_uncorrelated(self):
        rotated = _rotated()
        second = rotated.rescaled @ rotated.rescaled.T / rotated.n_times
        np.testing.assert_allclose(second, np.eye(6), atol=1e-10)

    def test_pool_second_moment_is_one(self):
        """(1/T) sum_t r^T C^-1 r = trace(C^-1 C) = K, so the pooled mean square is 1."""
        for k, t in ((2, 5), (10, 40), (50, 60)):
            pool = aggregate(_rotated(k=k, t=t, seed=k))
            assert np.mean(pool.values**2) == pytest.approx(1.0, abs=1e-10)
            assert len(pool) == k * t

    def test_foreign_basis_rejected(self):
        normalized = _normalized()
        other = _normalized(seed=9, slice_id="other")
        spec = eigendecompose(time_correlation(other))
        with pytest.raises(DataError, match="same slice"):
            rotate_returns(normalized, spec)

    def test_position_basis_rejected(self):
        panel = _normalized().base
        spec = eigendecompose(position_correlation(normalize_positions(panel)))
        with pytest.raises(DataError, match="position matrix"):
            rotate_returns(normalize_time_series(panel), spec)

    def test_basis_kind_must_match_normalization(self):
        panel = _normalized().base
        centred = mean_only_normalize(panel)
        with pytest.raises(DataError, match="time-series normalized"):
            rotate_returns(centred, eigendecompose(time_correlation(normalize_time_series(panel))))
        with pytest.raises(DataError, match="mean-only normalized"):
            rotate_returns(normalize_time_series(panel), eigendecompose(covariance(centred)))
        pool = aggregate(rotate_returns(centred, eigendecompose(covariance(centred))))
        assert np.mean(pool.values**2) == pytest.approx(1.0, abs=1e-10)

    def test_rank_deficient_rotates_without_rescaling(self):
        rotated = _rotated(k=10, t=6)
        assert rotated.rescaled is None
        assert rotated.rotated.shape == (10, 6)
        with pytest.raises(RankError):
            aggregate(rotated)

    def test_pool_keeps_direction_layout(self):
        rotated = _rotated()
        pool = aggregate(rotated)
        np.testing.assert_array_equal(pool.direction(5), rotated.rescaled[5])

    def test_concat(self):
        a = SamplePool(np.ones(3), "a")
        b = SamplePool(np.zeros(2), "b")
        merged = SamplePool.concat([a, b], "ab")
        assert len(merged) == 5
        with pytest.raises(DataError):
            merged.direction(0)


class TestDensity:
    def test_unit_integral(self):
        samples = np.random.default_rng(0).standard_normal(5000)
        density = estimate_density(samples)
        assert density.edges.size == 202
        assert np.sum(density.density * density.widths) == pytest.approx(1.0)
        assert density.outside == 0
        assert density.edges[-1] == pytest.approx(1.05 * np.abs(samples).max())

    def test_limit_is_capped(self):
        samples = np.concatenate([np.random.default_rng(0).standard_normal(500), [80.0]])
        assert estimate_density(samples).edges[-1] == 50.0

    def test_fixed_limit_counts_outside(self):
        samples = np.concatenate([np.linspace(-1, 1, 200), [5.0, -7.0]])
        density = estimate_density(samples, BinningRule(bins=20, limit=2.0))
        assert density.outside == 2
        assert density.sample_count == 200
        assert np.sum(density.density * density.widths) == pytest.approx(1.0)

    def test_freedman_diaconis(self):
        samples = np.random.default_rng(4).standard_normal(2000)
        density = estimate_density(samples, BinningRule(BinningKind.FREEDMAN_DIACONIS, clip=3.0))
        assert density.edges[0] >= -3.0 and density.edges[-1] <= 3.0
        assert np.allclose(np.diff(density.edges), density.widths[0])

    def test_too_few_samples(self):
        with pytest.raises(DataError, match=">= 100"):
            estimate_density(np.arange(50.0))

    def test_identical_samples(self):
        with pytest.raises(DataError, match="identical"):
            estimate_density(np.ones(200))

    def test_loglog_mirrors_negative_side(self):
        edges = np.linspace(-2, 2, 5)
        density = EmpiricalDensity(edges, np.array([0.1, 0.2, 0.3, 0.4]), np.array([1, 2, 3, 4]), 10, "x")
        frame = loglog_frame(density)
        np.testing.assert_allclose(frame["abs_x"], [0.5, 1.5])
        np.testing.assert_allclose(frame["density_pos"], [0.3, 0.4])
        np.testing.assert_allclose(frame["density_neg"], [0.2, 0.1])


class TestPerDirection:
    def test_labels_and_order(self):
        rotated = _rotated(k=4, t=400)
        densities = per_eigenvector_densities(rotated, BinningRule(bins=21), workers=2)
        assert [d.label for d in densities.rotated] == ["rot,1", "rot,2", "rot,3", "rot,4"]
        assert densities.rescaled[0].label == "rot-scal,1"
        assert densities.largest[0] == 3
        assert densities.flagged == ()

    def test_short_subpools_are_flagged(self):
        densities = per_eigenvector_densities(_rotated(k=3, t=50))
        assert densities.flagged == (0, 1, 2)
        assert densities.rotated == (None, None, None)

    def test_originals(self):
        normalized = _normalized(k=3, t=200)
        labels = [d.label for d in original_densities(normalized)]
        assert labels == ["orig,T0", "orig,T1", "orig,T2"]
        pool = pool_original([normalized, normalized])
        assert len(pool) == 1200
        assert pool.label == "orig"
