"""Tests for histogram fits, chi^2 and tail exponents."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from scipy import stats

from multiret.errors import DataError, ParameterError
from multiret.fitting import (
    FitConfig,
    FitResult,
    FitScale,
    average_epoch_params,
    average_interval_params,
    binned_curve,
    chi_squared,
    family_model,
    fit_epoch,
    fit_interval,
    tail_exponent,
)
from multiret.models import EpochKernel, build_model
from multiret.rotate import BinningRule, EmpiricalDensity, estimate_density
from multiret.storage import dumps


def _noise_free(model, edges=None, label="model", sample_count=10**9) -> EmpiricalDensity:
    """Bin-averaged model density dressed as a histogram of sample_count draws."""
    edges = np.linspace(-8.0, 8.0, 161) if edges is None else np.asarray(edges, dtype=float)
    density = binned_curve(model, edges)
    counts = np.rint(density * np.diff(edges) * sample_count).astype(np.int64)
    return EmpiricalDensity(edges, density, counts, int(counts.sum()), label)


def _epoch_result(l: float, scale: FitScale = FitScale.LOG, dt: str = "1s") -> FitResult:
    return FitResult("A", scale, {"l": l}, 0.1, 0.2, 0.1, 100, {"l": False}, dt, f"epoch-{l}")


class TestBinnedCurve:
    def test_bin_average_of_smooth_density(self):
        edges = np.linspace(-3.0, 3.0, 61)
        model = build_model("gaussian")
        expected = np.diff(stats.norm.cdf(edges)) / np.diff(edges)
        np.testing.assert_allclose(binned_curve(model, edges), expected, rtol=1e-4)

    def test_mask_and_divergent_peak(self):
        edges = np.linspace(-1.0, 1.0, 5)
        model = build_model("gaussian", None, "gaussian", 1.0)
        mask = np.array([False, True, True, False])
        values = binned_curve(model, edges, mask)
        assert values[0] == 0.0 and values[3] == 0.0
        np.testing.assert_allclose(values[1:3], model.pdf(np.array([-0.25, 0.25])))


class TestChiSquared:
    def test_exact_curve_scores_zero(self):
        density = _noise_free(build_model("algebraic", 3.0))
        assert chi_squared(density, density.density, "log", 1) == 0.0

    def test_normalized_by_degrees_of_freedom(self):
        edges = np.linspace(-1, 1, 5)
        density = EmpiricalDensity(edges, np.full(4, 0.5), np.full(4, 50), 200, "flat")
        curve = np.array([0.4, 0.5, 0.5, 0.6])
        assert chi_squared(density, curve, FitScale.LIN, 1) == pytest.approx(0.02 / 3)

    def test_log_scale_skips_sparse_bins(self):
        edges = np.linspace(-2, 2, 9)
        counts = np.array([0, 3, 20, 40, 40, 20, 3, 0])
        density = EmpiricalDensity(edges, counts / (126 * 0.5), counts, 126, "sparse")
        curve = density.density * math.e
        assert chi_squared(density, curve, "log", 1) == pytest.approx(4 / 3)

    def test_too_few_bins(self):
        edges = np.linspace(-1, 1, 3)
        density = EmpiricalDensity(edges, np.array([0.5, 0.5]), np.array([50, 50]), 100, "two")
        with pytest.raises(DataError, match="usable bins"):
            chi_squared(density, density.density, "lin", 1)

    def test_poisson_weights(self):
        edges = np.linspace(-1, 1, 5)
        density = EmpiricalDensity(edges, np.full(4, 0.5), np.full(4, 100), 400, "flat")
        sigma = math.sqrt(100) / (400 * 0.5)
        curve = density.density + sigma
        chi2 = chi_squared(density, curve, "lin", 1, FitConfig(weighted=True))
        assert chi2 == pytest.approx(4 / 3)


class TestFitEpoch:
    @pytest.mark.parametrize("scale", ["log", "lin"])
    def test_recovers_shape(self, scale):
        density = _noise_free(build_model("algebraic", 3.0), np.linspace(-10, 10, 202))
        result = fit_epoch(density, scale, dt="1s")
        assert result.family == "A"
        assert result.parameters["l"] == pytest.approx(3.0, rel=1e-4)
        assert not result.any_at_bound
        assert result.chi2 == (result.chi2_ln if scale == "log" else result.chi2_lin)
        assert result.dt == "1s"

    def test_gaussian_data_hits_upper_bound(self):
        density = _noise_free(build_model("gaussian"))
        result = fit_epoch(density, FitScale.LOG, FitConfig(l_bounds=(1.6, 20.0)))
        assert result.parameters["l"] == pytest.approx(20.0)
        assert result.at_bound == {"l": True}

    def test_shape_in_edge_cell_is_refined(self):
        """l = 19 lies in the last grid cell below the bound 20; it is found, not clamped."""
        density = _noise_free(build_model("algebraic", 19.0))
        result = fit_epoch(density, FitScale.LOG, FitConfig(l_bounds=(1.6, 20.0)))
        assert result.parameters["l"] == pytest.approx(19.0, rel=1e-3)
        assert result.at_bound == {"l": False}

    @pytest.mark.parametrize("l", [2.2, 3.0, 8.0])
    def test_lin_and_log_agree_on_exact_data(self, l):
        density = _noise_free(build_model("algebraic", l), np.linspace(-10, 10, 202))
        lin = fit_epoch(density, "lin").parameters["l"]
        log = fit_epoch(density, "log").parameters["l"]
        assert lin == pytest.approx(log, abs=1e-6)

    def test_invalid_bounds(self):
        with pytest.raises(ParameterError):
            FitConfig(l_bounds=(1.2, 10.0))
        with pytest.raises(ParameterError):
            FitConfig(n_bounds=(5.0, 1.0))


class TestFitInterval:
    def test_gg_recovers_n(self):
        density = _noise_free(build_model("gaussian", None, "gaussian", 5.0))
        result = fit_interval(density, "GG", None, "log")
        assert result.parameters == pytest.approx({"N": 5.0}, rel=1e-4)
        assert result.at_bound == {"N": False}

    @pytest.mark.parametrize("n", [2.0, 5.0, 40.0])
    def test_gg_lin_and_log_agree_on_exact_data(self, n):
        density = _noise_free(build_model("gaussian", None, "gaussian", n))
        lin = fit_interval(density, "GG", None, "lin").parameters["N"]
        log = fit_interval(density, "GG", None, "log").parameters["N"]
        assert lin == pytest.approx(log, rel=1e-6)
        assert log == pytest.approx(n, rel=1e-6)

    @pytest.mark.slow
    def test_ag_recovers_n_with_fixed_shape(self):
        edges = np.linspace(-6.0, 6.0, 41)
        density = _noise_free(build_model("algebraic", 3.0, "gaussian", 4.0), edges)
        result = fit_interval(density, "AG", 3.0, "log")
        assert result.parameters["N"] == pytest.approx(4.0, rel=1e-3)
        assert result.parameters["l"] == 3.0

    @pytest.mark.slow
    def test_aa_recovered_from_sampled_data(self):
        """10^6 draws of AA(l=2.6, N=6, L=12), fitted with the epoch shape held at 2.6."""
        model = build_model("algebraic", 2.6, "algebraic", 6.0, 12.0)
        samples = model.sample(1_000_000, seed=20)
        density = estimate_density(samples, BinningRule(bins=97, limit=12.0), "aa")
        result = fit_interval(density, "AA", 2.6, "log", FitConfig(budget=200))
        assert 5.0 <= result.parameters["N"] <= 7.5
        assert 9.0 <= result.parameters["L"] <= 16.0
        assert result.parameters["N"] == pytest.approx(6.0, rel=0.15)
        assert result.parameters["L"] == pytest.approx(12.0, rel=0.15)
        assert not result.any_at_bound
        gaussian = fit_interval(density, "GG", None, "log")
        assert gaussian.chi2_ln > result.chi2_ln

    def test_algebraic_kernel_needs_shape(self):
        density = _noise_free(build_model("gaussian", None, "gaussian", 5.0))
        with pytest.raises(ParameterError, match="fixed epoch shape"):
            fit_interval(density, "AG", None, "log")

    def test_unknown_family(self):
        density = _noise_free(build_model("gaussian", None, "gaussian", 5.0))
        with pytest.raises(ParameterError):
            fit_interval(density, "XX", None, "log")


class TestAverages:
    def test_epoch_average(self):
        results = [_epoch_result(l) for l in (2.769, 2.933, 2.679)]
        avg = average_epoch_params(results)
        assert avg.mean_l == pytest.approx(2.7937, abs=1e-4)
        assert avg.epochs == 3
        assert avg.dt == "1s"

    def test_mixed_settings_rejected(self):
        with pytest.raises(DataError, match="mixed scales"):
            average_epoch_params([_epoch_result(3.0), _epoch_result(3.0, FitScale.LIN)])
        with pytest.raises(DataError, match="mixed dt"):
            average_epoch_params([_epoch_result(3.0), _epoch_result(3.0, dt="1d")])
        with pytest.raises(DataError):
            average_epoch_params([])

    def test_interval_average_keys(self):
        fits = [
            FitResult("GG", FitScale.LOG, {"N": 4.0}, 0.1, 0.1, 0.1, 50),
            FitResult("GG", FitScale.LOG, {"N": 6.0}, 0.1, 0.1, 0.1, 50),
            FitResult("AA", FitScale.LOG, {"l": 3.0, "N": 2.0, "L": 5.0}, 0.1, 0.1, 0.1, 50),
        ]
        assert average_interval_params(fits) == {"GG_N": 5.0, "AA_N": 2.0, "AA_L": 5.0}


class TestFitRecord:
    def test_record_survives_json(self):
        result = FitResult("AA", FitScale.LIN, {"l": 3.0, "N": 2.0, "L": 5.0}, 0.2, 0.2, math.nan, 80, {"N": False, "L": True})
        restored = FitResult.from_record(json.loads(dumps(result.to_record())))
        assert restored.parameters == result.parameters
        assert math.isnan(restored.chi2_ln)
        assert restored.at_bound == {"N": False, "L": True}
        assert restored.model().family == "AA"

    def test_malformed(self):
        with pytest.raises(DataError):
            FitResult.from_record({"family": "GG"})

    def test_family_model(self):
        assert family_model("A", {"l": 4.0}).parameters() == {"l": 4.0}
        assert family_model("GA", {"N": 4.0, "L": 6.0}).family == "GA"


class TestTailExponent:
    def test_pareto_tail(self):
        """|x| Pareto with index 3 has density ~ |x|^-4."""
        rng = np.random.default_rng(0)
        magnitude = (1.0 - rng.random(1_000_000)) ** (-1.0 / 3.0)
        samples = magnitude * rng.choice([-1.0, 1.0], magnitude.size)
        tails = tail_exponent(samples)
        assert tails.positive == pytest.approx(-4.0, abs=0.15)
        assert tails.negative == pytest.approx(-4.0, abs=0.15)
        assert tails.mean == pytest.approx(-4.0, abs=0.15)
        assert tails.region[0] < tails.region[1]

    def test_gaussian_tail_falls_faster_than_power_laws(self):
        samples = np.random.default_rng(2).standard_normal(1_000_000)
        assert tail_exponent(samples).mean < -6.0

    def test_algebraic_kernel_with_l_2_has_inverse_cubic_tail(self):
        """(1 + x^2)^-2 decays like |x|^-4; far quantiles keep the fit out of the shoulder."""
        samples = EpochKernel.algebraic(2.0).sample(np.random.default_rng(3), 4_000_000)
        tails = tail_exponent(samples, region=(0.99, 0.9999))
        assert tails.mean == pytest.approx(-4.0, abs=0.3)

    def test_one_sided_samples(self):
        samples = np.random.default_rng(1).exponential(size=10_000)
        with pytest.raises(DataError, match="negative tail"):
            tail_exponent(samples)

    def test_bad_region(self):
        with pytest.raises(ParameterError):
            tail_exponent(np.arange(100.0), region=(0.9, 0.5))
