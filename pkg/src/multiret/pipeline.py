"""End-to-end run: panel -> epochs -> rotate/aggregate -> fits -> tables and reports.

Artifact tree under the output directory:

    panel/                          return panel container
    densities/epochs/epoch-NNNN.csv aggregated epoch densities
    densities/intervals/...         aggregated interval densities and log-log dumps
    spectra/...                     interval eigenvalue spectra
    curves/...                      fitted interval model curves
    tables/*.csv                    epoch, average and interval tables
    reports/*.json                  overlay and tail reports
    manifest.json                   config hash, library versions, artifact hashes
"""

from __future__ import annotations

import contextlib
import datetime
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import sklearn
import yaml

from . import __version__
from .config import RunConfig
from .epochs import NormalizedPanel, ReturnPanel, concatenate_epochs, normalize_time_series, partition
from .errors import ConfigError, DataError, MultiretError
from .fitting import FitResult, FitScale, average_epoch_params, average_interval_params, fit_epoch, fit_interval
from .ingest import (
    TradingCalendar,
    build_midpoints,
    load_daily_panel,
    log_returns,
    parse_quotes,
    resample_grid,
)
from .models import equicorrelation, model_curve_frame, synthesize_panel
from .rotate import SamplePool, aggregate, estimate_density, loglog_frame, pool_original, rotate_returns
from .runtime import map_ordered
from .spectra import eigendecompose, time_correlation
from .storage import artifact_hashes, read_json, save_panel, spectrum_frame, write_csv, write_density, write_json
from .studies import epoch_vs_interval_overlay, tail_slope_comparison

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "fit", "dt", "l_rot", "chi2_ln", "chi2_lin", "l_at_bound"]
AVERAGE_COLUMNS = ["fit", "dt", "mean_l_rot", "mean_chi2_ln", "mean_chi2_lin", "epochs"]
PARAM_COLUMNS = ["GG_N", "GA_L", "GA_N", "AG_N", "AA_L", "AA_N"]
INTERVAL_COLUMNS = ["interval", "fit", "dt", "length", *PARAM_COLUMNS]
CHI2_COLUMNS = ["length", "fit", "dt", "interval", "GG", "GA", "AG", "AA"]
INTERVAL_AVERAGE_COLUMNS = ["length", "fit", "dt", *PARAM_COLUMNS]


@contextlib.contextmanager
def stage(name: str):
    """Tags errors raised inside with the stage name."""
    logger.info("stage %s", name)
    try:
        yield
    except MultiretError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


@dataclass
class EpochOutcome:
    index: int
    normalized: NormalizedPanel
    pool: SamplePool | None
    fits: dict[FitScale, FitResult] = field(default_factory=dict)


@dataclass
class PipelineResult:
    output: Path
    epoch_table: pd.DataFrame
    average_table: pd.DataFrame
    interval_table: pd.DataFrame
    chi2_table: pd.DataFrame
    interval_average_table: pd.DataFrame
    manifest: dict


def build_panel(config: RunConfig) -> ReturnPanel:
    """Return panel for the configured source."""
    if config.source == "synthetic":
        syn = config.synthetic
        model = syn.model()
        panel = synthesize_panel(
            equicorrelation(syn.k, syn.rho),
            model.kernel,
            model.ensemble,
            syn.epochs,
            syn.t_ep,
            config.seed,
        )
    elif config.source == "daily":
        panel = log_returns(load_daily_panel(config.daily))
    else:
        date = datetime.date.fromisoformat(config.session_date) if config.session_date else None
        quotes = parse_quotes(config.quotes, date=date)
        midpoints = build_midpoints(quotes)
        if config.calendar is not None:
            calendar = TradingCalendar.from_file(config.calendar)
        else:
            days = sorted({ts.date() for series in midpoints.values() for ts in series.index})
            calendar = TradingCalendar.default(days, *config.session_window)
        grid = resample_grid(midpoints, calendar, config.dt, config.workers)
        panel = log_returns(grid, include_overnight=config.include_overnight)
    if panel.n_tickers < 2:
        raise DataError(f"rotation needs K >= 2 tickers, panel has {panel.n_tickers}")
    return panel


def _epoch_outcome(index: int, epoch: ReturnPanel, config: RunConfig) -> EpochOutcome:
    normalized = normalize_time_series(epoch)
    spec = eigendecompose(time_correlation(normalized))
    if not spec.full_rank:
        logger.warning("epoch %s is rank deficient (K = %d, T = %d), not fitted", epoch.slice_id, epoch.n_tickers, epoch.n_times)
        return EpochOutcome(index, normalized, None)
    pool = aggregate(rotate_returns(normalized, spec))
    density = estimate_density(pool, config.binning, f"epoch-{index:04d}")
    outcome = EpochOutcome(index, normalized, pool)
    for scale in config.scales:
        outcome.fits[scale] = fit_epoch(density, scale, config.fit, dt=config.dt_label)
    write_density(density, config.output / "densities" / "epochs" / f"epoch-{index:04d}.csv")
    return outcome


def _interval_fits(
    index: int,
    length: int,
    slice_id: str,
    members: list[EpochOutcome],
    l_fixed: dict[FitScale, float],
    config: RunConfig,
) -> dict[FitScale, dict[str, FitResult]]:
    name = f"length-{length:03d}/interval-{index:03d}"
    normalized = concatenate_epochs([m.normalized for m in members], slice_id=slice_id)
    spec = eigendecompose(time_correlation(normalized))
    spec.require_full_rank()
    pool = aggregate(rotate_returns(normalized, spec))
    density = estimate_density(pool, config.binning, f"interval-{index:03d}")
    root = config.output
    write_density(density, root / "densities" / "intervals" / f"{name}.csv")
    write_csv(loglog_frame(density), root / "densities" / "intervals" / f"{name}-loglog.csv")
    write_csv(spectrum_frame(spec), root / "spectra" / f"{name}.csv")

    fits: dict[FitScale, dict[str, FitResult]] = {}
    for scale in config.scales:
        fits[scale] = {}
        for family in config.families:
            fit = fit_interval(density, family, l_fixed.get(scale), scale, config.fit, dt=config.dt_label)
            fits[scale][family] = fit
            write_csv(model_curve_frame(fit.model(), density.centers), root / "curves" / f"{name}-{family}-{scale.value}.csv")
    return fits


def _param_row(fits: dict[str, FitResult]) -> dict[str, float]:
    row = {c: np.nan for c in PARAM_COLUMNS}
    for family, fit in fits.items():
        for param in ("L", "N"):
            if param in fit.parameters:
                row[f"{family}_{param}"] = fit.parameters[param]
    return row


def versions() -> dict[str, str]:
    return {
        "multiret": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "PyYAML": yaml.__version__,
    }


def prepare_output(out: Path) -> None:
    """Create the output directory, or clear the artifacts of an earlier run in it.

    Any other content makes the directory unusable: the manifest must list
    exactly the files of one run.
    """
    if not out.exists():
        out.mkdir(parents=True)
        return
    if not out.is_dir():
        raise ConfigError(f"output {out} is not a directory")
    if not any(out.iterdir()):
        return
    manifest = out / "manifest.json"
    if not manifest.is_file():
        raise ConfigError(f"output directory {out} is not empty and holds no manifest.json of an earlier run")
    try:
        artifacts = [Path(rel) for rel in read_json(manifest)["artifacts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"unreadable manifest {manifest}: {exc!r}") from None
    outside = [rel for rel in artifacts if rel.is_absolute() or ".." in rel.parts]
    if outside:
        raise ConfigError(f"manifest {manifest} lists paths outside the output directory, e.g. {outside[0]}")
    listed = {out / rel for rel in artifacts} | {manifest}
    foreign = sorted(p for p in out.rglob("*") if p.is_file() and p not in listed)
    if foreign:
        raise ConfigError(
            f"output directory {out} holds {len(foreign)} files no earlier run wrote, e.g. {foreign[0].relative_to(out)}"
        )
    for path in listed:
        path.unlink(missing_ok=True)
    for folder in sorted((p for p in out.rglob("*") if p.is_dir()), key=lambda p: len(p.parts), reverse=True):
        if not any(folder.iterdir()):
            folder.rmdir()
    logger.info("cleared %d artifacts of the earlier run in %s", len(listed), out)


def run_pipeline(config: RunConfig) -> PipelineResult:
    """Run every stage and write the artifact tree; raises MultiretError tagged with its stage."""
    with stage("config"):
        config.validate()
    out = config.output
    with stage("output"):
        prepare_output(out)

    with stage("returns"):
        panel = build_panel(config)
        save_panel(panel, out / "panel")
        logger.info("panel %s: K = %d, T = %d", panel.slice_id, panel.n_tickers, panel.n_times)

    with stage("epochs"):
        epochs = partition(panel, config.epoch_columns, allow_remainder=True).epochs
        if config.source == "daily" and config.epoch_columns is None and len(epochs) == 1:
            logger.warning(
                "daily panel %s forms a single epoch of %d returns; set epoch_columns to split it",
                panel.slice_id,
                panel.n_times,
            )
        outcomes = map_ordered(lambda item: _epoch_outcome(item[0] + 1, item[1], config), list(enumerate(epochs)), config.workers)
        fitted = [o for o in outcomes if o.fits]
        if not fitted:
            raise DataError("no epoch could be rotated and fitted")

    with stage("epoch-tables"):
        rows, averages = [], []
        l_fixed: dict[FitScale, float] = {}
        for scale in config.scales:
            results = [o.fits[scale] for o in fitted]
            for o, r in zip(fitted, results):
                rows.append([o.index, scale.value, config.dt_label, r.parameters["l"], r.chi2_ln, r.chi2_lin, r.at_bound["l"]])
            avg = average_epoch_params(results)
            l_fixed[scale] = avg.mean_l
            averages.append([scale.value, avg.dt, avg.mean_l, avg.mean_chi2_ln, avg.mean_chi2_lin, avg.epochs])
        epoch_table = pd.DataFrame(rows, columns=EPOCH_COLUMNS)
        average_table = pd.DataFrame(averages, columns=AVERAGE_COLUMNS)
        write_csv(epoch_table, out / "tables" / "epoch_fits.csv")
        write_csv(average_table, out / "tables" / "epoch_averages.csv")

    interval_rows, chi2_rows, interval_avg_rows = [], [], []
    with stage("intervals"):
        by_slice = {o.normalized.slice_id: o for o in outcomes}
        for length in config.interval_epochs:
            part = partition(panel, config.epoch_columns, interval_epochs=length, allow_remainder=True)
            groups = [[by_slice[e.slice_id] for e in interval] for interval in part.intervals()]
            spare = len(part.epochs) - part.n_intervals * length
            if spare:
                logger.warning("%d trailing epochs do not fill an interval of %d", spare, length)
            if not groups:
                logger.warning("no complete interval of %d epochs in %d epochs", length, len(part.epochs))
                continue
            results = map_ordered(
                lambda item: _interval_fits(item[0] + 1, length, part.interval_id(item[0] + 1), item[1], l_fixed, config),
                list(enumerate(groups)),
                config.workers,
            )
            for scale in config.scales:
                for i, fits in enumerate(results, start=1):
                    interval_rows.append({"interval": i, "fit": scale.value, "dt": config.dt_label, "length": length, **_param_row(fits[scale])})
                    chi2 = {f: fits[scale][f].chi2 if f in fits[scale] else np.nan for f in ("GG", "GA", "AG", "AA")}
                    chi2_rows.append({"length": length, "fit": scale.value, "dt": config.dt_label, "interval": i, **chi2})
                means = average_interval_params([fit for fits in results for fit in fits[scale].values()])
                interval_avg_rows.append({"length": length, "fit": scale.value, "dt": config.dt_label, **{c: means.get(c, np.nan) for c in PARAM_COLUMNS}})

            with stage("overlay"):
                scale = config.scales[0]
                family = "AA" if "AA" in config.families else config.families[-1]
                for i, (group, fits) in enumerate(zip(groups, results), start=1):
                    members = [m.fits[scale] for m in group if m.fits]
                    if not members:
                        continue
                    report = epoch_vs_interval_overlay(members, fits[scale][family])
                    write_json(report.to_record(), out / "reports" / f"overlay-length-{length:03d}-interval-{i:03d}.json")

    interval_table = pd.DataFrame(interval_rows, columns=INTERVAL_COLUMNS)
    chi2_table = pd.DataFrame(chi2_rows, columns=CHI2_COLUMNS)
    interval_average_table = pd.DataFrame(interval_avg_rows, columns=INTERVAL_AVERAGE_COLUMNS)
    write_csv(interval_table, out / "tables" / "interval_fits.csv")
    write_csv(chi2_table, out / "tables" / "interval_chi2.csv")
    write_csv(interval_average_table, out / "tables" / "interval_averages.csv")

    with stage("tails"):
        original = pool_original([o.normalized for o in fitted])
        aggregated = SamplePool.concat([o.pool for o in fitted], panel.slice_id)
        try:
            report = tail_slope_comparison(original, aggregated)
            write_json(report.to_record(), out / "reports" / "tails.json")
        except DataError as exc:
            logger.warning("tail comparison skipped: %s", exc)

    manifest = {
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "versions": versions(),
        "artifacts": artifact_hashes(out),
    }
    write_json(manifest, out / "manifest.json")
    logger.info("wrote %d artifacts to %s", len(manifest["artifacts"]), out)
    return PipelineResult(out, epoch_table, average_table, interval_table, chi2_table, interval_average_table, manifest)
