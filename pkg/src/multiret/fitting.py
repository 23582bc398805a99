"""Least-squares fits of model families to histograms, normalized chi^2, tail slopes.

Objectives compare a histogram with the model averaged over each bin
(Simpson's rule on the bin edges and centre):

    lin  sum_b (p_b - <p>_b)^2 / sigma_b^2         over all bins
    log  sum_b n_b (ln p_b - ln <p>_b)^2          over bins with >= min_count samples

sigma_b is the Poisson error of bin b, floored at one count; with
``count_weights`` off both sums are unweighted. The reported chi^2 is
unweighted unless ``weighted`` is set.

Fits are deterministic: a coarse grid over transformed parameters brackets
the minimum, then golden-section (one parameter) or bounded Nelder-Mead from
the best grid points (two parameters) refines it. A minimum that ends on an
edge of the search range is reported as the bound with its flag set.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize, stats

from .errors import DataError, NumericalError, ParameterError
from .models import EnsembleScaleLaw, EpochKernel, ModelDistribution
from .rotate import EmpiricalDensity, SamplePool

logger = logging.getLogger(__name__)

FAMILIES = ("GG", "GA", "AG", "AA")
L_MARGIN = 1.01
_L_FLOOR = 0.01
_GAP_FLOOR = 1e-3
_BOUND_TOL = 1e-6
_SIMPLEX_STARTS = 3


class FitScale(str, Enum):
    LIN = "lin"
    LOG = "log"


@dataclass(frozen=True)
class FitConfig:
    l_bounds: tuple[float, float] = (1.5, 50.0)
    n_bounds: tuple[float, float] = (0.1, 1000.0)
    l_interval_max: float = 1000.0
    min_count: int = 10
    budget: int = 400
    grid_points: int = 40
    simplex_grid: int = 7
    weighted: bool = False
    count_weights: bool = True

    def __post_init__(self) -> None:
        for name in ("l_bounds", "n_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ParameterError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.l_bounds[0] < 1.5:
            raise ParameterError(f"l must stay above 3/2, lower bound {self.l_bounds[0]}")
        if self.n_bounds[0] <= 0:
            raise ParameterError(f"N must stay positive, lower bound {self.n_bounds[0]}")
        if self.budget <= 0 or self.grid_points < 3 or self.simplex_grid < 3:
            raise ParameterError("fit budget and grid sizes must be positive (grids >= 3)")
        if self.min_count < 1:
            raise ParameterError(f"min_count must be >= 1, got {self.min_count}")


@dataclass(frozen=True)
class FitResult:
    """One fitted family. ``family`` is "A" for epoch fits of the algebraic kernel."""

    family: str
    scale: FitScale
    parameters: dict[str, float]
    chi2: float
    chi2_lin: float
    chi2_ln: float
    bins_used: int
    at_bound: dict[str, bool] = field(default_factory=dict)
    dt: str = ""
    label: str = ""

    @property
    def any_at_bound(self) -> bool:
        return any(self.at_bound.values())

    def model(self) -> ModelDistribution:
        return family_model(self.family, self.parameters)

    def to_record(self) -> dict[str, object]:
        return {
            "family": self.family,
            "scale": self.scale.value,
            "parameters": dict(self.parameters),
            "chi2": self.chi2,
            "chi2_lin": self.chi2_lin,
            "chi2_ln": self.chi2_ln,
            "bins_used": self.bins_used,
            "at_bound": dict(self.at_bound),
            "dt": self.dt,
            "label": self.label,
        }

    @classmethod
    def from_record(cls, record: dict) -> FitResult:
        try:
            return cls(
                family=record["family"],
                scale=FitScale(record["scale"]),
                parameters={k: float(v) for k, v in record["parameters"].items()},
                chi2=_float(record["chi2"]),
                chi2_lin=_float(record["chi2_lin"]),
                chi2_ln=_float(record["chi2_ln"]),
                bins_used=int(record["bins_used"]),
                at_bound=dict(record.get("at_bound", {})),
                dt=record.get("dt", ""),
                label=record.get("label", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fit record: {exc!r}") from None


def _float(value) -> float:
    return math.nan if value is None else float(value)


def family_model(family: str, parameters: dict[str, float]) -> ModelDistribution:
    """Model for a family code: A (epoch kernel) or GG, GA, AG, AA."""
    if family == "A":
        return ModelDistribution(EpochKernel.algebraic(parameters["l"]))
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}, expected one of {FAMILIES}")
    kernel = EpochKernel.gaussian() if family[0] == "G" else EpochKernel.algebraic(parameters["l"])
    if family[1] == "G":
        ensemble = EnsembleScaleLaw.gaussian(parameters["N"])
    else:
        ensemble = EnsembleScaleLaw.algebraic(parameters["N"], parameters["L"])
    return ModelDistribution(kernel, ensemble)


def binned_curve(model: ModelDistribution, edges: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Mean model density over each bin; bins outside ``mask`` are left at 0.

    Bins touching a divergent edge (the peak at 0 for N <= 1) fall back to
    the centre value.
    """
    edges = np.asarray(edges, dtype=float)
    n_bins = edges.size - 1
    mask = np.ones(n_bins, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    needed = np.zeros(edges.size, dtype=bool)
    needed[:-1] |= mask
    needed[1:] |= mask
    at_edges = np.zeros(edges.size)
    at_edges[needed] = model.pdf(edges[needed])
    centers = (edges[:-1] + edges[1:]) / 2.0
    mid = np.asarray(model.pdf(centers[mask]), dtype=float)
    left, right = at_edges[:-1][mask], at_edges[1:][mask]
    with np.errstate(invalid="ignore"):
        simpson = (left + 4.0 * mid + right) / 6.0
    values = np.zeros(n_bins)
    values[mask] = np.where(np.isfinite(left) & np.isfinite(right), simpson, mid)
    return values


def _usable(density: EmpiricalDensity, scale: FitScale, min_count: int) -> np.ndarray:
    if scale is FitScale.LIN:
        return np.ones(density.density.size, dtype=bool)
    return (density.counts >= min_count) & (density.density > 0)


def _residuals(
    density: EmpiricalDensity,
    curve: np.ndarray,
    scale: FitScale,
    min_count: int,
    weighted: bool,
) -> np.ndarray:
    mask = _usable(density, scale, min_count)
    observed, model = density.density[mask], curve[mask]
    if scale is FitScale.LIN:
        residual = observed - model
        if weighted:
            # Poisson error of a bin density, floored at one count
            sigma = np.sqrt(np.maximum(density.counts[mask], 1)) / (density.sample_count * density.widths[mask])
            residual = residual / sigma
        return residual
    with np.errstate(divide="ignore", invalid="ignore"):
        residual = np.log(observed) - np.log(model)
    if weighted:
        residual = residual * np.sqrt(density.counts[mask])
    return residual


def chi_squared(
    density: EmpiricalDensity,
    curve: np.ndarray,
    scale: FitScale | str,
    n_params: int,
    config: FitConfig | None = None,
) -> float:
    """Sum of squared residuals over the usable bins divided by B - n_params."""
    config = config or FitConfig()
    scale = FitScale(scale)
    curve = np.asarray(curve, dtype=float)
    if curve.shape != density.density.shape:
        raise DataError(f"model curve has {curve.size} values for {density.density.size} bins")
    usable = int(_usable(density, scale, config.min_count).sum())
    if usable < n_params + 2:
        raise DataError(
            f"{density.label}: {usable} usable bins on the {scale.value} scale, need >= {n_params + 2}"
        )
    residual = _residuals(density, curve, scale, config.min_count, config.weighted)
    if not np.isfinite(residual).all():
        return math.inf
    return float(np.sum(residual**2) / (usable - n_params))


def _both_chi2(density: EmpiricalDensity, curve: np.ndarray, n_params: int, config: FitConfig) -> tuple[float, float]:
    values = []
    for scale in (FitScale.LIN, FitScale.LOG):
        try:
            values.append(chi_squared(density, curve, scale, n_params, config))
        except DataError:
            values.append(math.nan)
    return values[0], values[1]


class _Objective:
    """Counts evaluations of a scale's objective for one parameter mapping."""

    def __init__(
        self,
        density: EmpiricalDensity,
        scale: FitScale,
        config: FitConfig,
        build: Callable[[np.ndarray], ModelDistribution],
    ) -> None:
        self.density = density
        self.scale = scale
        self.config = config
        self.build = build
        self.evaluations = 0
        self.mask = _usable(density, scale, config.min_count)

    def curve(self, theta: np.ndarray) -> np.ndarray:
        return binned_curve(self.build(np.atleast_1d(theta)), self.density.edges, self.mask)

    def __call__(self, theta: np.ndarray) -> float:
        self.evaluations += 1
        try:
            curve = self.curve(theta)
        except (ParameterError, NumericalError) as exc:
            logger.debug("objective undefined at %s: %s", theta, exc)
            return math.inf
        residual = _residuals(self.density, curve, self.scale, self.config.min_count, self.config.count_weights)
        if not np.isfinite(residual).all():
            return math.inf
        return float(np.sum(residual**2))


def _check_bins(density: EmpiricalDensity, scale: FitScale, n_params: int, config: FitConfig) -> int:
    usable = int(_usable(density, scale, config.min_count).sum())
    if usable < n_params + 2:
        raise DataError(
            f"{density.label}: {usable} usable bins on the {scale.value} scale, need >= {n_params + 2}"
        )
    return usable


def _minimize_1d(objective: _Objective, lo: float, hi: float, config: FitConfig) -> tuple[float, bool, bool]:
    """Grid then golden-section on [lo, hi]; returns (t, at_lower, at_upper).

    An edge cell of the grid is refined with bounded Brent instead; a
    refined value within tolerance of a bound snaps to it.
    """
    grid = np.linspace(lo, hi, config.grid_points)
    values = np.array([objective(t) for t in grid])
    if not np.isfinite(values).any():
        raise NumericalError(f"objective is undefined on the whole grid for {objective.density.label}")
    best = int(np.argmin(values))
    if best in (0, grid.size - 1):
        cell = (grid[0], grid[1]) if best == 0 else (grid[-2], grid[-1])
        result = optimize.minimize_scalar(
            objective, bounds=cell, method="bounded", options={"xatol": 1e-10, "maxiter": config.budget}
        )
        t = float(result.x) if result.fun <= values[best] else float(grid[best])
    else:
        result = optimize.minimize_scalar(
            objective,
            bracket=(grid[best - 1], grid[best], grid[best + 1]),
            method="golden",
            options={"xtol": 1e-10, "maxiter": config.budget},
        )
        t = float(np.clip(result.x, lo, hi))
    tol = _BOUND_TOL * (hi - lo)
    if t <= lo + tol:
        return lo, True, False
    if t >= hi - tol:
        return hi, False, True
    return t, False, False


def fit_epoch(
    density: EmpiricalDensity,
    scale: FitScale | str,
    config: FitConfig | None = None,
    dt: str = "",
) -> FitResult:
    """Fit the algebraic kernel shape l to an aggregated epoch density."""
    config = config or FitConfig()
    scale = FitScale(scale)
    bins = _check_bins(density, scale, 1, config)
    l_lo, l_hi = config.l_bounds
    # t = ln(l - 3/2) keeps l above the pole at 3/2
    lo, hi = math.log(max(l_lo - 1.5, _L_FLOOR)), math.log(l_hi - 1.5)
    objective = _Objective(density, scale, config, lambda t: ModelDistribution(EpochKernel.algebraic(1.5 + math.exp(t[0]))))
    t, at_lo, at_hi = _minimize_1d(objective, lo, hi, config)
    l = 1.5 + math.exp(t)
    if at_lo or at_hi:
        logger.info("%s: l fit stopped at bound %.4g", density.label, l)
    curve = binned_curve(ModelDistribution(EpochKernel.algebraic(l)), density.edges)
    chi2_lin, chi2_ln = _both_chi2(density, curve, 1, config)
    return FitResult(
        family="A",
        scale=scale,
        parameters={"l": l},
        chi2=chi2_lin if scale is FitScale.LIN else chi2_ln,
        chi2_lin=chi2_lin,
        chi2_ln=chi2_ln,
        bins_used=bins,
        at_bound={"l": at_lo or at_hi},
        dt=dt,
        label=density.label,
    )


@dataclass(frozen=True)
class EpochAverage:
    scale: FitScale
    dt: str
    mean_l: float
    mean_chi2_ln: float
    mean_chi2_lin: float
    epochs: int


def average_epoch_params(results: Sequence[FitResult]) -> EpochAverage:
    """Arithmetic means of l and both chi^2 over epoch fits of one scale and dt."""
    if not results:
        raise DataError("no epoch fits to average")
    scales = {r.scale for r in results}
    dts = {r.dt for r in results}
    if len(scales) > 1:
        raise DataError(f"cannot average fits on mixed scales {sorted(s.value for s in scales)}")
    if len(dts) > 1:
        raise DataError(f"cannot average fits with mixed dt labels {sorted(dts)}")
    return EpochAverage(
        scale=results[0].scale,
        dt=results[0].dt,
        mean_l=float(np.mean([r.parameters["l"] for r in results])),
        mean_chi2_ln=float(np.nanmean([r.chi2_ln for r in results])),
        mean_chi2_lin=float(np.nanmean([r.chi2_lin for r in results])),
        epochs=len(results),
    )


def _interval_builder(family: str, l_fixed: float | None, config: FitConfig) -> Callable[[np.ndarray], ModelDistribution]:
    def build(theta: np.ndarray) -> ModelDistribution:
        n = math.exp(theta[0])
        params = {"N": n}
        if l_fixed is not None:
            params["l"] = l_fixed
        if family[1] == "A":
            params["L"] = min(n / 2.0 + L_MARGIN + math.exp(theta[1]), config.l_interval_max)
        return family_model(family, params)

    return build


def fit_interval(
    density: EmpiricalDensity,
    family: str,
    l_fixed: float | None,
    scale: FitScale | str,
    config: FitConfig | None = None,
    dt: str = "",
) -> FitResult:
    """Fit N (GG, AG) or (N, L) (GA, AA) of a long-interval family.

    AG and AA need the epoch shape ``l_fixed``; GG and GA ignore it.
    """
    config = config or FitConfig()
    scale = FitScale(scale)
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}, expected one of {FAMILIES}")
    if family[0] == "A":
        if l_fixed is None:
            raise ParameterError(f"family {family} needs a fixed epoch shape l")
        EpochKernel.algebraic(l_fixed)
    else:
        l_fixed = None
    two_d = family[1] == "A"
    n_params = 2 if two_d else 1
    bins = _check_bins(density, scale, n_params, config)
    objective = _Objective(density, scale, config, _interval_builder(family, l_fixed, config))
    n_lo, n_hi = (math.log(b) for b in config.n_bounds)

    if not two_d:
        t, at_lo, at_hi = _minimize_1d(objective, n_lo, n_hi, config)
        theta = np.array([t])
        at_bound = {"N": at_lo or at_hi}
    else:
        theta, at_bound = _minimize_2d(objective, n_lo, n_hi, config)

    model = objective.build(theta)
    params = model.parameters()
    if at_bound.get("L") is False and params["L"] >= config.l_interval_max * (1 - 1e-9):
        at_bound["L"] = True
    if any(at_bound.values()):
        logger.info("%s %s: parameters at bound %s", density.label, family, [k for k, v in at_bound.items() if v])
    curve = binned_curve(model, density.edges)
    chi2_lin, chi2_ln = _both_chi2(density, curve, n_params, config)
    logger.debug("%s %s %s fit: %s after %d evaluations", density.label, family, scale.value, params, objective.evaluations)
    return FitResult(
        family=family,
        scale=scale,
        parameters=params,
        chi2=chi2_lin if scale is FitScale.LIN else chi2_ln,
        chi2_lin=chi2_lin,
        chi2_ln=chi2_ln,
        bins_used=bins,
        at_bound=at_bound,
        dt=dt,
        label=density.label,
    )


def _minimize_2d(objective: _Objective, n_lo: float, n_hi: float, config: FitConfig) -> tuple[np.ndarray, dict[str, bool]]:
    """Grid over (ln N, ln(L - N/2 - 1.01)), then bounded Nelder-Mead from the best grid points."""
    gap_lo = math.log(_GAP_FLOOR)

    def gap_hi(a: float) -> float:
        return math.log(max(config.l_interval_max - math.exp(a) / 2.0 - L_MARGIN, 2 * _GAP_FLOOR))

    grid_a = np.linspace(n_lo, n_hi, config.simplex_grid)
    scored = []
    for a in grid_a:
        for b in np.linspace(gap_lo, gap_hi(a), config.simplex_grid):
            value = objective(np.array([a, b]))
            if math.isfinite(value):
                scored.append((value, a, b))
    if not scored:
        raise NumericalError(f"objective is undefined on the whole grid for {objective.density.label}")
    scored.sort()

    # the (N, L) valley is shallow: refine from the best few grid points
    b_max = max(gap_hi(a) for a in grid_a)
    best_value, a0, b0 = scored[0]
    best = np.array([a0, b0])
    for _, a, b in scored[:_SIMPLEX_STARTS]:
        result = optimize.minimize(
            objective,
            np.array([a, b]),
            method="Nelder-Mead",
            bounds=[(n_lo, n_hi), (gap_lo, b_max)],
            options={"maxfev": config.budget, "xatol": 1e-9, "fatol": 1e-16},
        )
        if result.fun < best_value:
            best, best_value = result.x, float(result.fun)
    a, b = float(best[0]), float(best[1])
    at_bound = {
        "N": a <= n_lo + _BOUND_TOL or a >= n_hi - _BOUND_TOL,
        "L": b <= gap_lo + _BOUND_TOL or b >= gap_hi(a) - _BOUND_TOL,
    }
    return np.array([a, min(b, gap_hi(a))]), at_bound


def average_interval_params(results: Sequence[FitResult]) -> dict[str, float]:
    """Mean fitted parameters per family, keyed like the interval tables (GG_N, GA_L, ...)."""
    columns: dict[str, list[float]] = {}
    for result in results:
        for name in ("L", "N"):
            if name in result.parameters:
                columns.setdefault(f"{result.family}_{name}", []).append(result.parameters[name])
    return {key: float(np.mean(values)) for key, values in columns.items()}


@dataclass(frozen=True)
class TailExponent:
    """Log-log slopes of the positive and negative tail densities."""

    positive: float
    negative: float
    region: tuple[float, float]
    bins_positive: int
    bins_negative: int

    @property
    def mean(self) -> float:
        return (self.positive + self.negative) / 2.0


def _tail_slope(magnitudes: np.ndarray, lo: float, hi: float, bins: int, total: int, sign: str) -> tuple[float, int]:
    edges = np.geomspace(lo, hi, bins + 1)
    counts, _ = np.histogram(magnitudes, bins=edges)
    keep = counts > 0
    if keep.sum() < 5:
        raise DataError(f"{sign} tail has {int(keep.sum())} populated bins in [{lo:.3g}, {hi:.3g}], need >= 5")
    centers = np.sqrt(edges[:-1] * edges[1:])
    density = counts / (total * np.diff(edges))
    fit = stats.linregress(np.log(centers[keep]), np.log(density[keep]))
    return float(fit.slope), int(keep.sum())


def tail_exponent(
    samples: SamplePool | np.ndarray,
    region: tuple[float, float] = (0.95, 0.999),
    bins: int = 25,
) -> TailExponent:
    """Slope of ln p against ln|x| between two quantiles of |samples|, per sign.

    Bins are logarithmic inside the region; a |x|^-a tail gives slope -a.
    """
    values = samples.values if isinstance(samples, SamplePool) else np.asarray(samples, dtype=float).ravel()
    q_lo, q_hi = region
    if not 0.0 < q_lo < q_hi < 1.0:
        raise ParameterError(f"tail region must satisfy 0 < lo < hi < 1, got {region}")
    if values.size == 0:
        raise DataError("no samples for the tail exponent")
    lo, hi = np.quantile(np.abs(values), [q_lo, q_hi])
    if not 0 < lo < hi:
        raise DataError(f"degenerate tail region [{lo:g}, {hi:g}]")
    positive, n_pos = _tail_slope(values[values > 0], lo, hi, bins, values.size, "positive")
    negative, n_neg = _tail_slope(-values[values < 0], lo, hi, bins, values.size, "negative")
    return TailExponent(positive, negative, (float(lo), float(hi)), n_pos, n_neg)
