"""Comparative experiments on top of the rotate/fit pipeline.

Each study returns a StudyReport: per-condition summary statistics plus the
densities and curves they were computed from, so every number can be
recomputed from the exported data.
"""

from __future__ import annotations

import datetime
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .epochs import (
    NormalizedPanel,
    Normalization,
    ReturnPanel,
    mean_only_normalize,
    normalize_time_series,
    partition,
)
from .errors import DataError, RankError
from .fitting import FitResult, TailExponent, average_interval_params, family_model, tail_exponent
from .ingest import PriceGrid, TradingCalendar, grid_times, log_returns
from .models import equicorrelation
from .rotate import BinningRule, EmpiricalDensity, SamplePool, aggregate, estimate_density, rotate_returns
from .runtime import map_ordered, rng_for
from .spectra import (
    covariance,
    eigendecompose,
    ledoit_wolf_shrink,
    time_correlation,
    to_correlation,
)

logger = logging.getLogger(__name__)

REFERENCE_X = (5.0, 8.0)
EPOCH_LENGTHS = (10, 25, 55, 100, 500, 1000, 2000)
DEFAULT_MAX_PAIRS = 500 * 499 // 2


@dataclass
class StudyReport:
    kind: str
    summary: dict[str, object]
    densities: dict[str, EmpiricalDensity] = field(default_factory=dict)
    curves: dict[str, pd.DataFrame] = field(default_factory=dict)
    config: dict[str, object] = field(default_factory=dict)

    def to_record(self) -> dict[str, object]:
        return {
            "kind": self.kind,
            "summary": self.summary,
            "config": self.config,
            "densities": sorted(self.densities),
            "curves": sorted(self.curves),
        }


def excess_kurtosis(values: np.ndarray) -> float:
    """Unbiased sample excess kurtosis."""
    return float(stats.kurtosis(values, fisher=True, bias=False))


def _tails(values: np.ndarray) -> TailExponent | None:
    try:
        return tail_exponent(values)
    except DataError as exc:
        logger.warning("tail slope unavailable: %s", exc)
        return None


def _pool_stats(values: np.ndarray) -> dict[str, float]:
    tails = _tails(values)
    return {
        "samples": int(values.size),
        "excess_kurtosis": excess_kurtosis(values),
        "ks_normal": float(stats.kstest(values, "norm").statistic),
        "tail_slope_pos": tails.positive if tails else math.nan,
        "tail_slope_neg": tails.negative if tails else math.nan,
    }


def _same_setting(fits: Sequence[FitResult], what: str) -> None:
    if not fits:
        raise DataError(f"no {what} fits")
    if len({(f.scale, f.dt) for f in fits}) > 1:
        raise DataError(f"{what} fits mix scales or dt labels")


def epoch_vs_interval_overlay(
    epoch_fits: Sequence[FitResult],
    interval_fit: FitResult,
    grid: np.ndarray | None = None,
    reference: Sequence[float] = REFERENCE_X,
) -> StudyReport:
    """Epoch model curves against the interval curve on one grid.

    At each reference |x| the report gives the fraction of epoch curves the
    interval curve strictly exceeds (ties do not count) and the reverse.
    """
    _same_setting(epoch_fits, "epoch")
    if grid is None:
        grid = np.linspace(-10.0, 10.0, 401)
    grid = np.asarray(grid, dtype=float)
    for x in reference:
        if not np.isclose(grid, x).any():
            raise DataError(f"overlay grid does not contain the reference abscissa {x:g}")

    interval_model = interval_fit.model()
    interval_curve = np.asarray(interval_model.pdf(grid), dtype=float)
    epoch_curves = np.array([np.asarray(f.model().pdf(grid), dtype=float) for f in epoch_fits])

    summary: dict[str, object] = {"epochs": len(epoch_fits), "interval_family": interval_fit.family}
    for x in reference:
        j = int(np.argmin(np.abs(grid - x)))
        summary[f"x={x:g}"] = {
            "interval_pdf": float(interval_curve[j]),
            "interval_exceeds_fraction": float(np.mean(interval_curve[j] > epoch_curves[:, j])),
            "epoch_exceeds_fraction": float(np.mean(epoch_curves[:, j] > interval_curve[j])),
        }
    curves = {"interval": pd.DataFrame({"x": grid, "pdf": interval_curve})}
    for i, (fit, curve) in enumerate(zip(epoch_fits, epoch_curves), start=1):
        curves[f"epoch:{fit.label or i}"] = pd.DataFrame({"x": grid, "pdf": curve})
    return StudyReport("overlay", summary, curves=curves, config={"reference": list(reference)})


def interval_length_comparison(
    fits_short: Sequence[FitResult],
    fits_long: Sequence[FitResult],
    x_ref: float = 8.0,
) -> StudyReport:
    """Mean fitted parameters per interval length and the tail-density ratio long/short."""
    _same_setting(fits_short, "short-interval")
    _same_setting(fits_long, "long-interval")
    families = {f.family for f in (*fits_short, *fits_long)}
    if len(families) > 1:
        raise DataError(f"interval length comparison needs one family, got {sorted(families)}")
    if (fits_short[0].scale, fits_short[0].dt) != (fits_long[0].scale, fits_long[0].dt):
        raise DataError("short and long interval fits differ in scale or dt")

    family = families.pop()
    short, long = average_interval_params(fits_short), average_interval_params(fits_long)

    def tail(means: dict[str, float], fits: Sequence[FitResult]) -> float:
        params = {key.split("_", 1)[1]: value for key, value in means.items()}
        if "l" in fits[0].parameters:
            params["l"] = float(np.mean([f.parameters["l"] for f in fits]))
        return float(family_model(family, params).pdf(x_ref))

    tail_short, tail_long = tail(short, fits_short), tail(long, fits_long)
    summary = {
        "family": family,
        "short": {"intervals": len(fits_short), **short, "tail_pdf": tail_short},
        "long": {"intervals": len(fits_long), **long, "tail_pdf": tail_long},
        "tail_ratio": tail_long / tail_short,
        "N_difference": long[f"{family}_N"] - short[f"{family}_N"],
    }
    return StudyReport("interval-length", summary, config={"x_ref": x_ref})


def _epoch_pools(panel: ReturnPanel, workers: int | None) -> tuple[list[np.ndarray], list[np.ndarray], int]:
    """Normalized original and aggregated values per day-aligned epoch."""
    epochs = partition(panel).epochs

    def run(epoch: ReturnPanel) -> tuple[np.ndarray, np.ndarray | None]:
        normalized = normalize_time_series(epoch)
        spec = eigendecompose(time_correlation(normalized))
        if not spec.full_rank:
            return normalized.values.reshape(-1), None
        return normalized.values.reshape(-1), aggregate(rotate_returns(normalized, spec)).values

    results = map_ordered(run, epochs, workers)
    skipped = sum(1 for _, a in results if a is None)
    if skipped:
        logger.warning("%d of %d epochs of %s are rank deficient, not aggregated", skipped, len(epochs), panel.slice_id)
    return [o for o, _ in results], [a for _, a in results if a is not None], skipped


def overnight_study(
    grid: PriceGrid,
    binning: BinningRule | None = None,
    workers: int | None = None,
) -> StudyReport:
    """Densities with and without the returns straddling day boundaries."""
    if grid.daily:
        raise DataError("overnight study needs an intraday grid")
    if grid.n_days < 2:
        raise DataError(f"overnight study needs at least two trading days, grid has {grid.n_days}")

    summary: dict[str, object] = {}
    densities: dict[str, EmpiricalDensity] = {}
    for include in (False, True):
        condition = "include" if include else "exclude"
        panel = log_returns(grid, include_overnight=include)
        originals, aggregated, skipped = _epoch_pools(panel, workers)
        orig = np.concatenate(originals)
        entry: dict[str, object] = {
            "boundary_returns": int(panel.boundary_flags.sum()) * panel.n_tickers,
            "skipped_epochs": skipped,
            "orig": _pool_stats(orig),
        }
        densities[f"{condition}/orig"] = estimate_density(orig, binning, f"orig:{condition}")
        if aggregated:
            aggr = np.concatenate(aggregated)
            entry["aggr"] = _pool_stats(aggr)
            densities[f"{condition}/aggr"] = estimate_density(aggr, binning, f"aggr:{condition}")
        summary[condition] = entry
    summary["kurtosis_increase"] = summary["include"]["orig"]["excess_kurtosis"] - summary["exclude"]["orig"]["excess_kurtosis"]
    return StudyReport("overnight", summary, densities=densities, config={"days": grid.n_days, "dt": grid.dt})


def synthesize_overnight_grid(
    k: int,
    days: int,
    dt_seconds: float,
    seed: int,
    overnight_scale: float = 5.0,
    sigma: float = 1e-3,
    rho: float = 0.2,
    start: datetime.date = datetime.date(2014, 1, 2),
) -> PriceGrid:
    """Intraday Gaussian prices whose day-opening returns have ``overnight_scale`` times the intraday std."""
    if days < 1:
        raise DataError(f"need at least one day, got {days}")
    trading_days = [d.date() for d in pd.bdate_range(start, periods=days)]
    times = grid_times(TradingCalendar.default(trading_days), dt_seconds)
    sizes = [t.size for t in times]
    total = sum(sizes)
    rng = rng_for(seed, "overnight-grid")
    root = np.linalg.cholesky(equicorrelation(k, rho))
    increments = sigma * (root @ rng.standard_normal((k, total - 1)))
    day_starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    increments[:, day_starts[1:] - 1] *= overnight_scale
    log_prices = np.concatenate([np.zeros((k, 1)), np.cumsum(increments, axis=1)], axis=1)
    return PriceGrid(
        tickers=tuple(f"S{i:03d}" for i in range(k)),
        times=np.concatenate(times),
        prices=100.0 * np.exp(log_prices),
        dt=float(dt_seconds),
        day_starts=day_starts,
    )


@dataclass(frozen=True, eq=False)
class PairwisePool:
    pool: SamplePool
    pairs_used: int
    pairs_skipped: int


def pairwise_aggregate(
    panel: NormalizedPanel,
    max_pairs: int | None = DEFAULT_MAX_PAIRS,
    seed: int | None = None,
) -> PairwisePool:
    """Aggregate every ticker pair in its own 2 x 2 correlation eigenbasis.

    For rows M_i, M_j with correlation rho the rescaled returns are
    (M_i - M_j) / sqrt(2(1 - rho)) and (M_i + M_j) / sqrt(2(1 + rho)).
    Works for T < K. Above ``max_pairs`` a seeded subset of pairs is used.
    """
    if panel.mode is not Normalization.TIME_SERIES:
        raise DataError(f"pairwise aggregation needs time-series normalized returns, got {panel.mode.value}")
    if panel.n_tickers < 2:
        raise DataError("pairwise aggregation needs K >= 2")
    first, second = np.triu_indices(panel.n_tickers, k=1)
    if max_pairs is not None and first.size > max_pairs:
        if seed is None:
            raise DataError(f"{first.size} pairs exceed max_pairs={max_pairs}; subsampling needs a seed")
        chosen = np.sort(rng_for(seed, "pairs").choice(first.size, size=max_pairs, replace=False))
        first, second = first[chosen], second[chosen]

    m = panel.values
    rho = np.einsum("pt,pt->p", m[first], m[second]) / panel.n_times
    keep = 1.0 - np.abs(rho) >= 1e-12
    skipped = int((~keep).sum())
    if skipped:
        logger.warning("%s: skipped %d singular pairs with |rho| = 1", panel.slice_id, skipped)
    first, second, rho = first[keep], second[keep], rho[keep]
    if first.size == 0:
        raise RankError(f"{panel.slice_id}: every pair is singular")

    diff = (m[first] - m[second]) / np.sqrt(2.0 * (1.0 - rho))[:, None]
    total = (m[first] + m[second]) / np.sqrt(2.0 * (1.0 + rho))[:, None]
    values = np.stack([diff, total], axis=1).reshape(-1)
    values.setflags(write=False)
    return PairwisePool(SamplePool(values, panel.slice_id, label="aggr-pairwise"), int(first.size), skipped)


def epoch_length_study(
    panel: ReturnPanel,
    lengths: Sequence[int] = EPOCH_LENGTHS,
    pairwise: bool | None = None,
    max_pairs: int | None = DEFAULT_MAX_PAIRS,
    pair_budget: int | None = 2_000_000,
    seed: int | None = None,
    binning: BinningRule | None = None,
    workers: int | None = None,
) -> StudyReport:
    """Pooled per-epoch z-scores for several epoch lengths.

    With ``pairwise=None`` pairwise aggregation runs whenever T < K.
    ``pair_budget`` caps the pairwise samples per length by subsampling pairs.
    """
    for length in lengths:
        if panel.n_times < length:
            raise DataError(f"epoch length {length} exceeds the {panel.n_times} columns of {panel.slice_id}")
    summary: dict[str, object] = {}
    densities: dict[str, EmpiricalDensity] = {}
    for length in lengths:
        epochs = partition(panel, epoch_columns=length, allow_remainder=True).epochs
        normalized = map_ordered(normalize_time_series, epochs, workers)
        orig = np.concatenate([n.values.reshape(-1) for n in normalized])
        entry: dict[str, object] = {"epochs": len(epochs), "orig": _pool_stats(orig)}
        densities[f"T={length}/orig"] = estimate_density(orig, binning, f"orig:T={length}")

        use_pairs = length < panel.n_tickers if pairwise is None else pairwise
        if use_pairs:
            pairs = max_pairs
            if pair_budget is not None:
                per_epoch = max(1, pair_budget // (2 * length * len(epochs)))
                pairs = per_epoch if pairs is None else min(pairs, per_epoch)
            pools = map_ordered(lambda n: pairwise_aggregate(n, pairs, seed), normalized, workers)
            values = SamplePool.concat([p.pool for p in pools], panel.slice_id).values
            entry["pairwise"] = {
                **_pool_stats(values),
                "pairs_per_epoch": pools[0].pairs_used,
                "pairs_skipped": sum(p.pairs_skipped for p in pools),
            }
            densities[f"T={length}/pairwise"] = estimate_density(values, binning, f"aggr-pairwise:T={length}")
        summary[f"T={length}"] = entry
    return StudyReport(
        "epoch-length",
        summary,
        densities=densities,
        config={"lengths": list(lengths), "K": panel.n_tickers, "max_pairs": max_pairs, "pair_budget": pair_budget},
    )


def shrinkage_study(
    panel: ReturnPanel,
    epoch_columns: int | None = None,
    shrinkage: float | None = None,
    workers: int | None = None,
) -> StudyReport:
    """Aggregated pools from raw vs Ledoit-Wolf-shrunk covariance correlations, per epoch.

    Both bases come from covariances rescaled to unit diagonal; the same
    time-series normalized returns are rotated in each.
    """
    epochs = partition(panel, epoch_columns=epoch_columns, allow_remainder=True).epochs

    def run(epoch: ReturnPanel) -> dict[str, float] | None:
        centred = mean_only_normalize(epoch)
        raw = eigendecompose(to_correlation(covariance(centred)))
        if not raw.full_rank:
            logger.warning("skipping rank-deficient epoch %s (K = %d, T = %d)", epoch.slice_id, epoch.n_tickers, epoch.n_times)
            return None
        shrunk_matrix = ledoit_wolf_shrink(centred, shrinkage)
        shrunk = eigendecompose(to_correlation(shrunk_matrix))
        normalized = normalize_time_series(epoch)
        a = aggregate(rotate_returns(normalized, raw)).values
        b = aggregate(rotate_returns(normalized, shrunk)).values
        return {"ks": float(stats.ks_2samp(a, b).statistic), "shrinkage": shrunk_matrix.shrinkage}

    results = map_ordered(run, epochs, workers)
    kept = [r for r in results if r is not None]
    if not kept:
        raise RankError(f"every epoch of {panel.slice_id} is rank deficient")
    ks = np.array([r["ks"] for r in kept])
    summary = {
        "epochs": len(epochs),
        "skipped_epochs": len(epochs) - len(kept),
        "median_ks": float(np.median(ks)),
        "max_ks": float(ks.max()),
        "mean_shrinkage": float(np.mean([r["shrinkage"] for r in kept])),
        "per_epoch": kept,
    }
    return StudyReport("shrinkage", summary, config={"epoch_columns": epoch_columns, "shrinkage": shrinkage})


def tail_slope_comparison(
    original: SamplePool | np.ndarray,
    aggregated: SamplePool | np.ndarray,
    region: tuple[float, float] = (0.95, 0.999),
) -> StudyReport:
    """Tail slopes of normalized original vs aggregated returns against the inverse cubic law (-4)."""
    summary = {}
    for name, samples in (("orig", original), ("aggr", aggregated)):
        tails = tail_exponent(samples, region)
        summary[name] = {
            "slope_pos": tails.positive,
            "slope_neg": tails.negative,
            "region": list(tails.region),
            "offset_from_cubic": tails.mean + 4.0,
        }
    return StudyReport("tails", summary, config={"region": list(region)})
