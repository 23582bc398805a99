"""Tests for the comparative studies."""

from __future__ import annotations

import numpy as np
import pytest

from multiret.epochs import ReturnPanel, normalize_time_series
from multiret.errors import DataError, RankError
from multiret.fitting import FitResult, FitScale
from multiret.ingest import load_daily_panel
from multiret.models import equicorrelation
from multiret.rotate import BinningRule
from multiret.studies import (
    epoch_length_study,
    epoch_vs_interval_overlay,
    excess_kurtosis,
    interval_length_comparison,
    overnight_study,
    pairwise_aggregate,
    shrinkage_study,
    synthesize_overnight_grid,
    tail_slope_comparison,
)

BINS = BinningRule(bins=51)


def _gaussian_panel(k: int, t: int, seed: int = 0, epoch_ranges=()) -> ReturnPanel:
    rng = np.random.default_rng(seed)
    return ReturnPanel(tuple(f"T{i}" for i in range(k)), rng.standard_normal((k, t)), epoch_ranges=epoch_ranges)


def _fit(family: str, params: dict, scale: FitScale = FitScale.LOG, label: str = "") -> FitResult:
    return FitResult(family, scale, params, 0.1, 0.1, 0.1, 100, {}, "1s", label)


class TestOverlay:
    def test_interval_tail_exceeds_epoch_tails(self):
        epochs = [_fit("A", {"l": l}, label=f"epoch-{i}") for i, l in enumerate((3.0, 4.0, 5.0))]
        interval = _fit("AA", {"l": 3.0, "N": 2.0, "L": 3.0})
        report = epoch_vs_interval_overlay(epochs, interval)
        at8 = report.summary["x=8"]
        assert at8["interval_exceeds_fraction"] == 1.0
        assert at8["epoch_exceeds_fraction"] == 0.0
        assert set(report.curves) == {"interval", "epoch:epoch-0", "epoch:epoch-1", "epoch:epoch-2"}
        assert len(report.curves["interval"]) == 401

    def test_identical_curves_do_not_count(self):
        epochs = [_fit("A", {"l": 3.0})]
        interval = _fit("GG", {"N": 4.0})
        report = epoch_vs_interval_overlay(epochs, interval, grid=np.array([-5.0, 0.0, 5.0, 8.0]))
        assert report.summary["epochs"] == 1
        assert report.summary["x=5"]["interval_exceeds_fraction"] + report.summary["x=5"]["epoch_exceeds_fraction"] <= 1.0

    def test_reference_must_be_on_grid(self):
        with pytest.raises(DataError, match="reference"):
            epoch_vs_interval_overlay([_fit("A", {"l": 3.0})], _fit("GG", {"N": 4.0}), grid=np.linspace(0, 6, 7))

    def test_mixed_epoch_scales(self):
        epochs = [_fit("A", {"l": 3.0}), _fit("A", {"l": 3.0}, FitScale.LIN)]
        with pytest.raises(DataError, match="mix"):
            epoch_vs_interval_overlay(epochs, _fit("GG", {"N": 4.0}))


class TestIntervalLength:
    def test_longer_intervals_fit_larger_n(self):
        short = [_fit("GG", {"N": 2.0}), _fit("GG", {"N": 4.0})]
        long = [_fit("GG", {"N": 10.0}), _fit("GG", {"N": 10.0})]
        report = interval_length_comparison(short, long)
        assert report.summary["N_difference"] == pytest.approx(7.0)
        assert report.summary["tail_ratio"] < 1.0
        assert report.summary["short"]["intervals"] == 2

    def test_one_family_only(self):
        with pytest.raises(DataError, match="one family"):
            interval_length_comparison([_fit("GG", {"N": 2.0})], [_fit("AG", {"l": 3.0, "N": 2.0})])


class TestOvernight:
    def test_overnight_returns_raise_kurtosis(self):
        grid = synthesize_overnight_grid(k=10, days=10, dt_seconds=60.0, seed=4)
        report = overnight_study(grid, BINS, workers=2)
        exclude, include = report.summary["exclude"], report.summary["include"]
        assert exclude["boundary_returns"] == 0
        assert include["boundary_returns"] == 9 * 10
        assert abs(exclude["orig"]["excess_kurtosis"]) < 0.3
        assert report.summary["kurtosis_increase"] > 1.0
        assert set(report.densities) == {"exclude/orig", "exclude/aggr", "include/orig", "include/aggr"}

    def test_synthetic_grid_is_seeded(self):
        a = synthesize_overnight_grid(3, 2, 600.0, seed=1)
        b = synthesize_overnight_grid(3, 2, 600.0, seed=1)
        np.testing.assert_array_equal(a.prices, b.prices)
        assert a.n_days == 2

    def test_needs_intraday_days(self, tmp_path):
        with pytest.raises(DataError, match="two trading days"):
            overnight_study(synthesize_overnight_grid(3, 1, 600.0, seed=1))
        daily = tmp_path / "daily.csv"
        daily.write_text("date,ticker,adj_close\n2014-01-02,A,1\n2014-01-03,A,2\n2014-01-06,A,3\n")
        with pytest.raises(DataError, match="intraday"):
            overnight_study(load_daily_panel(daily))


class TestPairwise:
    def test_second_moment_is_one(self):
        """Each 2 x 2 block satisfies the trace identity, so the pool has mean square 1."""
        normalized = normalize_time_series(_gaussian_panel(30, 25))
        result = pairwise_aggregate(normalized, max_pairs=None)
        assert result.pairs_used == 435
        assert result.pool.values.size == 435 * 2 * 25
        assert np.mean(result.pool.values**2) == pytest.approx(1.0, abs=1e-10)
        assert result.pool.label == "aggr-pairwise"

    def test_subsampling_needs_seed(self):
        normalized = normalize_time_series(_gaussian_panel(10, 25))
        with pytest.raises(DataError, match="seed"):
            pairwise_aggregate(normalized, max_pairs=5)
        a = pairwise_aggregate(normalized, max_pairs=5, seed=3)
        b = pairwise_aggregate(normalized, max_pairs=5, seed=3)
        assert a.pairs_used == 5
        np.testing.assert_array_equal(a.pool.values, b.pool.values)

    def test_perfectly_correlated_pair_is_skipped(self):
        returns = np.random.default_rng(0).standard_normal((3, 25))
        returns[2] = 2.0 * returns[0]
        result = pairwise_aggregate(normalize_time_series(ReturnPanel(("A", "B", "C"), returns)), max_pairs=None)
        assert result.pairs_skipped == 1
        assert result.pairs_used == 2


class TestEpochLength:
    def test_short_epochs_follow_normalization_law(self):
        """Normalizing n Gaussian values by their own moments gives excess kurtosis -6/(n+1)."""
        panel = _gaussian_panel(30, 5000, seed=1)
        report = epoch_length_study(panel, lengths=(25, 100), seed=2, binning=BINS)
        t25, t100 = report.summary["T=25"], report.summary["T=100"]
        assert t25["epochs"] == 200
        assert t25["orig"]["excess_kurtosis"] == pytest.approx(-6 / 26, abs=0.05)
        assert t100["orig"]["excess_kurtosis"] == pytest.approx(-6 / 101, abs=0.05)
        assert "pairwise" in t25 and "pairwise" not in t100
        assert t25["pairwise"]["samples"] == 200 * 200 * 2 * 25

    @pytest.mark.slow
    def test_per_epoch_normalization_artifact(self):
        """10^6 pooled i.i.d. values: T = 10 is clearly platykurtic, T = 25 is close to normal."""
        panel = _gaussian_panel(50, 20_000, seed=8)
        report = epoch_length_study(panel, lengths=(10, 25), pairwise=False, binning=BINS)
        t10, t25 = report.summary["T=10"]["orig"], report.summary["T=25"]["orig"]
        assert t10["samples"] == t25["samples"] == 1_000_000
        assert t10["excess_kurtosis"] < -0.2
        assert t25["ks_normal"] < 0.01

    def test_length_beyond_panel(self):
        with pytest.raises(DataError, match="exceeds"):
            epoch_length_study(_gaussian_panel(3, 50), lengths=(100,))

    @pytest.mark.slow
    def test_long_epochs_converge_on_heavy_tails(self):
        rng = np.random.default_rng(5)
        returns = rng.standard_t(5, size=(10, 40_000))
        panel = ReturnPanel(tuple(f"T{i}" for i in range(10)), returns)
        report = epoch_length_study(panel, lengths=(25, 1000, 2000), binning=BINS)
        k25, k1000, k2000 = (report.summary[f"T={n}"]["orig"]["excess_kurtosis"] for n in (25, 1000, 2000))
        assert k25 < k1000
        assert abs(k2000 - k1000) < abs(k1000 - k25)


class TestShrinkage:
    def test_zero_shrinkage_changes_nothing(self):
        panel = _gaussian_panel(8, 400, epoch_ranges=((0, 200), (200, 400)))
        report = shrinkage_study(panel, shrinkage=0.0)
        assert report.summary["median_ks"] == 0.0
        assert report.summary["epochs"] == 2

    def test_long_epochs_barely_move(self):
        panel = _gaussian_panel(10, 6000, seed=3)
        report = shrinkage_study(panel, epoch_columns=2000, workers=2)
        assert report.summary["median_ks"] < 0.05
        assert len(report.summary["per_epoch"]) == 3

    @pytest.mark.slow
    def test_shrinkage_matters_less_for_longer_epochs(self):
        """K = 50: raw and shrunk pools agree at T_ep = 2220 and drift apart for short epochs."""
        rng = np.random.default_rng(6)
        returns = np.linalg.cholesky(equicorrelation(50, 0.3)) @ rng.standard_normal((50, 3 * 2220))
        panel = ReturnPanel(tuple(f"T{i}" for i in range(50)), returns)
        long = shrinkage_study(panel, epoch_columns=2220, workers=2)
        short = shrinkage_study(panel, epoch_columns=111, workers=2)
        assert long.summary["epochs"] == 3
        assert long.summary["median_ks"] < 0.02
        assert short.summary["median_ks"] > long.summary["median_ks"]
        assert short.summary["mean_shrinkage"] > long.summary["mean_shrinkage"]

    def test_rank_deficient_epochs(self):
        panel = _gaussian_panel(10, 8)
        with pytest.raises(RankError):
            shrinkage_study(panel)


class TestTails:
    def test_comparison_report(self):
        rng = np.random.default_rng(0)
        pareto = (1.0 - rng.random(400_000)) ** (-1.0 / 3.0) * rng.choice([-1.0, 1.0], 400_000)
        report = tail_slope_comparison(pareto, rng.standard_normal(400_000))
        assert report.summary["orig"]["offset_from_cubic"] == pytest.approx(0.0, abs=0.25)
        assert report.summary["aggr"]["slope_pos"] < report.summary["orig"]["slope_pos"]

    def test_excess_kurtosis_of_gaussian(self):
        assert excess_kurtosis(np.random.default_rng(1).standard_normal(200_000)) == pytest.approx(0.0, abs=0.05)
