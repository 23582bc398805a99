"""CLI entry point: python -m multiret <command>"""

from __future__ import annotations

import argparse
import datetime
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .epochs import ReturnPanel, mean_only_normalize, normalize_positions, normalize_time_series, partition
from .errors import ConfigError, MultiretError
from .fitting import FitConfig, FitResult, FitScale, fit_epoch, fit_interval, tail_exponent
from .ingest import (
    TradingCalendar,
    build_midpoints,
    load_daily_panel,
    log_returns,
    parse_clock,
    parse_quotes,
    resample_grid,
)
from .models import build_model, equicorrelation, model_curve_frame, synthesize_panel
from .pipeline import run_pipeline
from .rotate import (
    BinningKind,
    BinningRule,
    aggregate,
    estimate_density,
    loglog_frame,
    original_densities,
    per_eigenvector_densities,
    rotate_returns,
)
from .spectra import (
    MatrixKind,
    covariance,
    eigendecompose,
    ledoit_wolf_shrink,
    position_correlation,
    time_correlation,
    to_correlation,
)
from .storage import (
    dumps,
    load_grid,
    load_panel,
    load_pool,
    load_rotated,
    load_spectrum,
    read_density,
    read_json,
    save_grid,
    save_matrix,
    save_panel,
    save_pool,
    save_rotated,
    save_spectrum,
    spectrum_frame,
    write_csv,
    write_density,
    write_json,
)
from .studies import (
    EPOCH_LENGTHS,
    epoch_length_study,
    epoch_vs_interval_overlay,
    overnight_study,
    shrinkage_study,
    synthesize_overnight_grid,
)

logger = logging.getLogger("multiret")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def _emit(record, output: str | None) -> None:
    """JSON to a file, or to stdout."""
    if output:
        write_json(record, output)
        print(f"Result written to {output}", file=sys.stderr)
    else:
        sys.stdout.write(dumps(record))


def _select(panel: ReturnPanel, epoch: int | None, epoch_columns: int | None) -> ReturnPanel:
    """The whole panel, or one epoch of it (1-based)."""
    if epoch is None:
        return panel
    epochs = partition(panel, epoch_columns, allow_remainder=True).epochs
    if not 1 <= epoch <= len(epochs):
        raise ConfigError(f"epoch {epoch} outside 1..{len(epochs)}")
    return epochs[epoch - 1]


def _binning(args: argparse.Namespace) -> BinningRule:
    return BinningRule(BinningKind(args.binning), args.bins, args.limit, args.clip)


def cmd_ingest(args: argparse.Namespace) -> None:
    if args.daily:
        grid = load_daily_panel(args.daily)
    else:
        date = datetime.date.fromisoformat(args.date) if args.date else None
        midpoints = build_midpoints(parse_quotes(args.quotes, date=date))
        if args.calendar and args.session:
            raise ConfigError("give --session or --calendar, not both")
        if args.calendar:
            calendar = TradingCalendar.from_file(args.calendar)
        else:
            days = sorted({t.date() for s in midpoints.values() for t in s.index})
            try:
                window = [parse_clock(v) for v in args.session] if args.session else []
            except ValueError as exc:
                raise ConfigError(f"bad --session: {exc}") from None
            calendar = TradingCalendar.default(days, *window)
        grid = resample_grid(midpoints, calendar, args.dt, args.workers)
    save_grid(grid, args.output)
    logger.info("grid: %d tickers x %d times, diagnostics %s", len(grid.tickers), grid.times.size, grid.diagnostics)


def cmd_returns(args: argparse.Namespace) -> None:
    panel = log_returns(load_grid(args.grid), include_overnight=args.include_overnight)
    save_panel(panel, args.output)


def cmd_correlate(args: argparse.Namespace) -> None:
    panel = _select(load_panel(args.panel), args.epoch, args.epoch_columns)
    if args.kind == "C":
        matrix = time_correlation(normalize_time_series(panel))
    elif args.kind == "D":
        matrix = position_correlation(normalize_positions(panel))
    elif args.shrink:
        matrix = to_correlation(ledoit_wolf_shrink(mean_only_normalize(panel), args.shrinkage))
    else:
        matrix = covariance(mean_only_normalize(panel))
    spec = eigendecompose(matrix)
    out = Path(args.output)
    save_matrix(matrix, out / "matrix")
    save_spectrum(spec, out / "spectrum")
    write_csv(spectrum_frame(spec), out / "spectrum.csv")


def cmd_rotate(args: argparse.Namespace) -> None:
    panel = _select(load_panel(args.panel), args.epoch, args.epoch_columns)
    spec = load_spectrum(args.spectrum)
    if spec.kind is MatrixKind.COVARIANCE:
        normalized = mean_only_normalize(panel)
    else:
        normalized = normalize_time_series(panel)
    rotated = rotate_returns(normalized, spec)
    out = Path(args.output)
    save_rotated(rotated, out)
    if args.per_direction:
        binning = _binning(args)
        densities = per_eigenvector_densities(rotated, binning, args.workers)
        originals = original_densities(normalize_time_series(panel), binning)
        for density in (*densities.rotated, *densities.rescaled, *originals):
            if density is not None:
                write_density(density, out / "directions" / f"{density.label.replace(',', '-')}.csv")


def cmd_aggregate(args: argparse.Namespace) -> None:
    pool = aggregate(load_rotated(args.rotated))
    out = Path(args.output)
    save_pool(pool, out / "pool")
    density = estimate_density(pool, _binning(args))
    write_density(density, out / "density.csv")
    write_csv(loglog_frame(density), out / "loglog.csv")


def cmd_fit_epoch(args: argparse.Namespace) -> None:
    result = fit_epoch(read_density(args.density), args.scale, FitConfig(), dt=args.dt_label)
    _emit(result.to_record(), args.output)


def cmd_fit_interval(args: argparse.Namespace) -> None:
    density = read_density(args.density)
    result = fit_interval(density, args.family, args.l, args.scale, FitConfig(), dt=args.dt_label)
    if args.curve:
        write_csv(model_curve_frame(result.model(), density.centers), args.curve)
    _emit(result.to_record(), args.output)


def cmd_tails(args: argparse.Namespace) -> None:
    q = args.quantiles
    if len(q) != 2:
        raise ConfigError(f"--quantiles needs two values, got {q}")
    tails = tail_exponent(load_pool(args.pool), (q[0], q[1]), args.tail_bins)
    record = {
        "positive": tails.positive,
        "negative": tails.negative,
        "region": list(tails.region),
        "bins_positive": tails.bins_positive,
        "bins_negative": tails.bins_negative,
    }
    _emit(record, args.output)


def _study_output(report, output: str | None) -> None:
    if output:
        out = Path(output)
        for name, density in report.densities.items():
            write_density(density, out / "densities" / f"{name.replace('=', '').replace('/', '-')}.csv")
        for i, (name, curve) in enumerate(report.curves.items()):
            write_csv(curve, out / "curves" / f"{i:03d}-{name.replace(':', '-').replace('/', '-')}.csv")
        write_json(report.to_record(), out / "report.json")
    else:
        sys.stdout.write(dumps(report.to_record()))


def cmd_study_overnight(args: argparse.Namespace) -> None:
    if args.grid:
        grid = load_grid(args.grid)
    else:
        if args.seed is None:
            raise ConfigError("a synthetic overnight grid needs --seed")
        grid = synthesize_overnight_grid(args.k, args.days, args.dt, args.seed, args.overnight_scale)
    _study_output(overnight_study(grid, _binning(args), args.workers), args.output)


def cmd_study_epoch_length(args: argparse.Namespace) -> None:
    report = epoch_length_study(load_panel(args.panel), args.lengths, seed=args.seed, binning=_binning(args), workers=args.workers)
    _study_output(report, args.output)


def cmd_study_shrinkage(args: argparse.Namespace) -> None:
    report = shrinkage_study(load_panel(args.panel), args.epoch_columns, args.shrinkage, args.workers)
    _study_output(report, args.output)


def cmd_study_overlay(args: argparse.Namespace) -> None:
    epoch_fits = []
    for path in args.epoch_fits:
        doc = read_json(path)
        records = doc if isinstance(doc, list) else [doc]
        epoch_fits.extend(FitResult.from_record(r) for r in records)
    interval_fit = FitResult.from_record(read_json(args.interval_fit))
    _study_output(epoch_vs_interval_overlay(epoch_fits, interval_fit), args.output)


def cmd_synth(args: argparse.Namespace) -> None:
    model = build_model(args.kernel, args.l, args.ensemble, args.N, args.L)
    panel = synthesize_panel(equicorrelation(args.k, args.rho), model.kernel, model.ensemble, args.epochs, args.t_ep, args.seed)
    save_panel(panel, args.output)
    logger.info("synthetic %s panel: K = %d, T = %d", model.family, panel.n_tickers, panel.n_times)


def cmd_run(args: argparse.Namespace) -> None:
    config = RunConfig.from_file(args.config) if args.config else RunConfig.from_env()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output:
        overrides["output"] = args.output
    if args.workers is not None:
        overrides["workers"] = args.workers
    config = config.merge(overrides)
    result = run_pipeline(config)
    print(f"Artifacts written to {result.output}", file=sys.stderr)


def _add_binning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--binning", choices=[k.value for k in BinningKind], default="uniform")
    p.add_argument("--bins", type=int, default=201, help="Bin count for uniform binning")
    p.add_argument("--limit", type=float, default=None, help="Uniform range [-limit, limit] (default min(1.05 max|x|, 50))")
    p.add_argument("--clip", type=float, default=None, help="Clip range for Freedman-Diaconis binning")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    common.add_argument("--workers", type=int, default=None, help="Worker threads (overrides MULTIRET_WORKERS)")

    parser = argparse.ArgumentParser(
        prog="multiret",
        description="Rotation, aggregation and model fitting of non-stationary multivariate return distributions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Quotes or daily prices to a price grid")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--quotes", help="Quote CSV (timestamp,ticker,bid,ask)")
    src.add_argument("--daily", help="Daily CSV (date,ticker,adj_close)")
    p.add_argument("--calendar", help="Trading calendar YAML")
    p.add_argument("--session", nargs=2, metavar=("OPEN", "CLOSE"), help="Session window without a calendar file (HH:MM)")
    p.add_argument("--date", help="Session date for time-only timestamps (YYYY-MM-DD)")
    p.add_argument("--dt", type=float, default=1.0, help="Grid step in seconds")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("returns", parents=[common], help="Price grid to log-return panel")
    p.add_argument("--grid", required=True)
    p.add_argument("--include-overnight", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_returns)

    for name, func, helptext in (
        ("correlate", cmd_correlate, "Correlation matrix and spectrum of a panel or epoch"),
        ("rotate", cmd_rotate, "Rotate normalized returns into a spectrum's eigenbasis"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--panel", required=True)
        p.add_argument("--epoch", type=int, default=None, help="1-based epoch index (default: whole panel)")
        p.add_argument("--epoch-columns", type=int, default=None, help="Epoch length (default: panel's own epochs)")
        p.add_argument("-o", "--output", required=True)
        p.set_defaults(func=func)
        if name == "correlate":
            p.add_argument("--kind", choices=["C", "D", "cov"], default="C")
            p.add_argument("--shrink", action="store_true", help="Ledoit-Wolf shrink the covariance (kind cov)")
            p.add_argument("--shrinkage", type=float, default=None, help="Fixed shrinkage intensity")
        else:
            p.add_argument("--spectrum", required=True)
            p.add_argument("--per-direction", action="store_true", help="Also write per-eigenvector and per-ticker densities")
            _add_binning(p)

    p = sub.add_parser("aggregate", parents=[common], help="Pool rescaled returns and estimate their density")
    p.add_argument("--rotated", required=True)
    p.add_argument("-o", "--output", required=True)
    _add_binning(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("fit-epoch", parents=[common], help="Fit the algebraic epoch kernel to a density CSV")
    p.add_argument("--density", required=True)
    p.add_argument("--scale", choices=[s.value for s in FitScale], default="log")
    p.add_argument("--dt-label", default="")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_fit_epoch)

    p = sub.add_parser("fit-interval", parents=[common], help="Fit a long-interval family to a density CSV")
    p.add_argument("--density", required=True)
    p.add_argument("--family", choices=["GG", "GA", "AG", "AA"], required=True)
    p.add_argument("--l", type=float, default=None, help="Fixed epoch shape for AG and AA")
    p.add_argument("--scale", choices=[s.value for s in FitScale], default="log")
    p.add_argument("--dt-label", default="")
    p.add_argument("--curve", default=None, help="Write the fitted x,pdf curve here")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_fit_interval)

    p = sub.add_parser("tails", parents=[common], help="Tail slopes of a sample pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--quantiles", type=_floats, default=[0.95, 0.999])
    p.add_argument("--tail-bins", type=int, default=25)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_tails)

    p = sub.add_parser("study-overnight", parents=[common], help="Densities with and without overnight returns")
    p.add_argument("--grid", default=None, help="Intraday price grid (default: synthetic grid)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--dt", type=float, default=10.0)
    p.add_argument("--overnight-scale", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", default=None)
    _add_binning(p)
    p.set_defaults(func=cmd_study_overnight)

    p = sub.add_parser("study-epoch-length", parents=[common], help="Pooled z-scores for several epoch lengths")
    p.add_argument("--panel", required=True)
    p.add_argument("--lengths", type=_ints, default=list(EPOCH_LENGTHS))
    p.add_argument("--seed", type=int, default=None, help="Seed for pair subsampling")
    p.add_argument("-o", "--output", default=None)
    _add_binning(p)
    p.set_defaults(func=cmd_study_epoch_length)

    p = sub.add_parser("study-shrinkage", parents=[common], help="Raw vs Ledoit-Wolf aggregated pools")
    p.add_argument("--panel", required=True)
    p.add_argument("--epoch-columns", type=int, default=None)
    p.add_argument("--shrinkage", type=float, default=None)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_study_shrinkage)

    p = sub.add_parser("study-overlay", parents=[common], help="Epoch model curves against an interval curve")
    p.add_argument("--epoch-fits", nargs="+", required=True, help="FitResult JSON files (objects or lists)")
    p.add_argument("--interval-fit", required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_study_overlay)

    p = sub.add_parser("synth", parents=[common], help="Synthetic non-stationary return panel")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--t-ep", type=int, default=500)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--kernel", choices=["gaussian", "algebraic"], default="gaussian")
    p.add_argument("--l", type=float, default=None)
    p.add_argument("--ensemble", choices=["none", "gaussian", "algebraic"], default="none")
    p.add_argument("--N", type=float, default=None)
    p.add_argument("--L", type=float, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="Full pipeline from a YAML config")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="Master seed (overrides config and MULTIRET_SEED)")
    p.add_argument("--output", default=None, help="Output directory (overrides MULTIRET_OUTPUT_ROOT)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="  [%(name)s] %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except MultiretError as exc:
        print(f"[{exc.stage or args.command}] error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
