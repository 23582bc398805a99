"""Quote parsing, midpoint prices, previous-tick grids and log returns.

Quote CSV header: ``timestamp,ticker,bid,ask`` where timestamp is ISO-8601 or
``HH:MM:SS`` (then the session date is supplied separately). Daily CSV header:
``date,ticker,adj_close``.
"""

from __future__ import annotations

import datetime
import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import IO

import numpy as np
import pandas as pd
import yaml

from .epochs import ReturnPanel
from .errors import ConfigError, DataError, SchemaError
from .runtime import map_ordered

logger = logging.getLogger(__name__)

SESSION_OPEN = datetime.time(9, 40)
SESSION_CLOSE = datetime.time(15, 50)

# NYSE closed early on these days; only the morning is regular trading.
HALF_DAYS_2014 = (datetime.date(2014, 7, 3), datetime.date(2014, 11, 28), datetime.date(2014, 12, 24))
EARLY_CLOSE = datetime.time(13, 0)

_TIME_ONLY = r"\d{1,2}:\d{2}:\d{2}(?:\.\d+)?"


@dataclass(frozen=True)
class QuoteTick:
    timestamp: pd.Timestamp
    ticker: str
    bid: float
    ask: float

    @property
    def midpoint(self) -> float:
        return (self.ask + self.bid) / 2.0


@dataclass(frozen=True)
class QuoteSchema:
    """Maps the logical quote fields to CSV column names."""

    timestamp: str = "timestamp"
    ticker: str = "ticker"
    bid: str = "bid"
    ask: str = "ask"

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> QuoteSchema:
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise SchemaError(f"unknown quote schema fields: {sorted(unknown)}")
        return cls(**mapping)

    def columns(self) -> list[str]:
        return [self.timestamp, self.ticker, self.bid, self.ask]


@dataclass(frozen=True)
class DailySchema:
    date: str = "date"
    ticker: str = "ticker"
    price: str = "adj_close"

    def columns(self) -> list[str]:
        return [self.date, self.ticker, self.price]


@dataclass(frozen=True, eq=False)
class ParsedQuotes:
    """Valid quotes sorted by (ticker, timestamp) with reject/duplicate counts."""

    frame: pd.DataFrame
    rejected: int = 0
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[QuoteTick]:
        for row in self.frame.itertuples(index=False):
            yield QuoteTick(row.timestamp, row.ticker, float(row.bid), float(row.ask))


@dataclass(frozen=True)
class ExcludedSegment:
    day: datetime.date
    start: datetime.time
    end: datetime.time


@dataclass(frozen=True)
class TradingCalendar:
    trading_days: tuple[datetime.date, ...]
    session_open: datetime.time = SESSION_OPEN
    session_close: datetime.time = SESSION_CLOSE
    excluded: tuple[ExcludedSegment, ...] = ()

    def __post_init__(self) -> None:
        days = tuple(sorted(set(self.trading_days)))
        object.__setattr__(self, "trading_days", days)
        if self.session_open >= self.session_close:
            raise ConfigError(
                f"session window {self.session_open}-{self.session_close} is empty"
            )
        for seg in self.excluded:
            if seg.start >= seg.end:
                raise ConfigError(f"excluded segment on {seg.day} has start >= end")
            if seg.start < self.session_open or seg.end > self.session_close:
                raise ConfigError(f"excluded segment on {seg.day} lies outside the session")

    @property
    def session_seconds(self) -> float:
        today = datetime.date.min
        span = datetime.datetime.combine(today, self.session_close) - datetime.datetime.combine(
            today, self.session_open
        )
        return span.total_seconds()

    @classmethod
    def default(
        cls,
        days: list[datetime.date] | tuple[datetime.date, ...],
        session_open: datetime.time = SESSION_OPEN,
        session_close: datetime.time = SESSION_CLOSE,
    ) -> TradingCalendar:
        """09:40-15:50 sessions unless told otherwise; the 2014 half-days keep only their morning."""
        half_days = [day for day in HALF_DAYS_2014 if day in days]
        excluded: tuple[ExcludedSegment, ...] = ()
        if session_open < EARLY_CLOSE < session_close:
            excluded = tuple(ExcludedSegment(day, EARLY_CLOSE, session_close) for day in half_days)
        elif half_days and session_open >= EARLY_CLOSE:
            logger.warning(
                "dropping half-days %s: closed during the %s-%s session", half_days, session_open, session_close
            )
            days = [day for day in days if day not in half_days]
        return cls(trading_days=tuple(days), session_open=session_open, session_close=session_close, excluded=excluded)

    @classmethod
    def from_file(cls, path: str | Path) -> TradingCalendar:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        try:
            days = [_parse_day(d) for d in doc["trading_days"]]
        except KeyError:
            raise ConfigError(f"calendar {path} lists no trading_days") from None
        session = doc.get("session", {})
        excluded = tuple(
            ExcludedSegment(_parse_day(seg["date"]), parse_clock(seg["start"]), parse_clock(seg["end"]))
            for seg in doc.get("excluded", [])
        )
        return cls(
            trading_days=tuple(days),
            session_open=parse_clock(session.get("open", SESSION_OPEN)),
            session_close=parse_clock(session.get("close", SESSION_CLOSE)),
            excluded=excluded,
        )


def _parse_day(value: object) -> datetime.date:
    if isinstance(value, datetime.datetime):
        return value.date()
    if isinstance(value, datetime.date):
        return value
    return datetime.date.fromisoformat(str(value))


def parse_clock(value: object) -> datetime.time:
    if isinstance(value, datetime.time):
        return value
    if isinstance(value, int):
        # YAML 1.1 reads unquoted 15:50 as the sexagesimal integer 950
        return datetime.time(value // 60, value % 60)
    return datetime.time.fromisoformat(str(value))


@dataclass(frozen=True, eq=False)
class PriceGrid:
    """K x T_g prices on a regular grid; ``day_starts`` marks each day's first point."""

    tickers: tuple[str, ...]
    times: np.ndarray
    prices: np.ndarray
    dt: float
    day_starts: np.ndarray
    dt_unit: str = "s"
    diagnostics: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        prices = np.array(self.prices, dtype=float)
        times = np.array(self.times, dtype="datetime64[ns]")
        starts = np.array(self.day_starts, dtype=np.int64)
        if prices.ndim != 2 or prices.shape != (len(self.tickers), times.size):
            raise DataError(
                f"price matrix {prices.shape} does not match {len(self.tickers)} tickers x {times.size} times"
            )
        if not (np.isfinite(prices).all() and (prices > 0).all()):
            raise DataError("grid prices must be finite and strictly positive")
        if times.size > 1 and not (np.diff(times) > np.timedelta64(0, "ns")).all():
            raise DataError("grid times must be strictly increasing")
        if times.size and (starts.size == 0 or starts[0] != 0 or (np.diff(starts) <= 0).any()
                           or starts[-1] >= times.size):
            raise DataError("day starts must begin at 0 and increase within the grid")
        for name, value in (("prices", prices), ("times", times), ("day_starts", starts)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "tickers", tuple(self.tickers))

    @property
    def daily(self) -> bool:
        return self.dt_unit == "d"

    @property
    def n_days(self) -> int:
        return int(self.day_starts.size)


def parse_quotes(
    stream: str | Path | IO[str],
    schema: QuoteSchema | None = None,
    date: datetime.date | None = None,
) -> ParsedQuotes:
    """Read a quote CSV; rows with unparseable fields or ask < bid are rejected."""
    schema = schema or QuoteSchema()
    try:
        raw = pd.read_csv(stream, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return ParsedQuotes(_empty_quotes())
    missing = [c for c in schema.columns() if c not in raw.columns]
    if missing:
        raise SchemaError(f"quote header {list(raw.columns)} lacks columns {missing}")
    if raw.empty:
        return ParsedQuotes(_empty_quotes())

    stamps = raw[schema.timestamp].astype(str).str.strip()
    time_only = stamps.str.fullmatch(_TIME_ONLY)
    if time_only.any():
        if date is None:
            raise SchemaError("quote timestamps carry no date; supply the session date")
        stamps = stamps.where(~time_only, date.isoformat() + " " + stamps)
    timestamps = pd.to_datetime(stamps, errors="coerce", format="ISO8601")
    bid = pd.to_numeric(raw[schema.bid], errors="coerce")
    ask = pd.to_numeric(raw[schema.ask], errors="coerce")
    ticker = raw[schema.ticker].str.strip()

    valid = timestamps.notna() & ticker.notna() & bid.notna() & ask.notna() & (bid > 0) & (ask >= bid)
    rejected = int((~valid).sum())
    if rejected:
        logger.warning("rejected %d of %d quote rows (unparseable or ask < bid)", rejected, len(raw))

    frame = pd.DataFrame(
        {"timestamp": timestamps, "ticker": ticker, "bid": bid, "ask": ask, "_row": np.arange(len(raw))}
    )[valid]
    frame = frame.sort_values(["ticker", "timestamp", "_row"])
    deduped = frame.drop_duplicates(["ticker", "timestamp"], keep="last")
    duplicates = len(frame) - len(deduped)
    if duplicates:
        logger.warning("resolved %d duplicate quote timestamps (last row wins)", duplicates)
    return ParsedQuotes(
        deduped.drop(columns="_row").reset_index(drop=True),
        rejected=rejected,
        duplicates=duplicates,
    )


def _empty_quotes() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "timestamp": pd.Series(dtype="datetime64[ns]"),
            "ticker": pd.Series(dtype=str),
            "bid": pd.Series(dtype=float),
            "ask": pd.Series(dtype=float),
        }
    )


def build_midpoints(quotes: ParsedQuotes) -> dict[str, pd.Series]:
    """Midpoint m = (a + b) / 2 per quote, one timestamp-indexed series per ticker."""
    frame = quotes.frame
    mid = (frame["ask"] + frame["bid"]) / 2.0
    series = {}
    for ticker, index in frame.groupby("ticker", sort=True).groups.items():
        series[ticker] = pd.Series(
            mid.loc[index].to_numpy(),
            index=pd.DatetimeIndex(frame.loc[index, "timestamp"]),
            name=ticker,
        )
    return series


def grid_times(calendar: TradingCalendar, dt_seconds: float) -> list[np.ndarray]:
    """Per-day grid timestamps: session open + i * dt, minus excluded segments."""
    session = calendar.session_seconds
    points = session / dt_seconds if dt_seconds > 0 else 0.5
    if dt_seconds <= 0 or abs(points - round(points)) > 1e-9:
        raise ConfigError(f"dt = {dt_seconds} s does not divide the {session:.0f} s session")
    offsets = pd.to_timedelta(np.arange(int(round(points))) * dt_seconds, unit="s")
    excluded: dict[datetime.date, list[ExcludedSegment]] = {}
    for seg in calendar.excluded:
        excluded.setdefault(seg.day, []).append(seg)

    days = []
    for day in calendar.trading_days:
        times = pd.Timestamp(datetime.datetime.combine(day, calendar.session_open)) + offsets
        keep = np.ones(times.size, dtype=bool)
        for seg in excluded.get(day, []):
            start = pd.Timestamp(datetime.datetime.combine(day, seg.start))
            end = pd.Timestamp(datetime.datetime.combine(day, seg.end))
            keep &= ~((times >= start) & (times < end))
        if keep.any():
            days.append(times[keep].to_numpy(dtype="datetime64[ns]"))
    return days


def resample_grid(
    midpoints: Mapping[str, pd.Series],
    calendar: TradingCalendar,
    dt_seconds: float,
    workers: int | None = None,
) -> PriceGrid:
    """Previous-tick sampling: each grid time takes the last midpoint at or before it.

    Only quotes from the same trading day count; a ticker without a quote by
    some day's first grid time is dropped from the whole run.
    """
    days = grid_times(calendar, dt_seconds)
    if not days:
        raise DataError("calendar yields no grid points")
    midnights = [d[0].astype("datetime64[D]").astype("datetime64[ns]") for d in days]

    def sample(ticker: str) -> np.ndarray | None:
        series = midpoints[ticker].sort_index()
        stamps = series.index.to_numpy(dtype="datetime64[ns]")
        values = series.to_numpy(dtype=float)
        rows = []
        for midnight, times in zip(midnights, days):
            first_of_day = np.searchsorted(stamps, midnight, side="left")
            idx = np.searchsorted(stamps, times, side="right") - 1
            if idx[0] < first_of_day:
                logger.warning("dropping %s: no quote by %s", ticker, times[0])
                return None
            rows.append(values[idx])
        return np.concatenate(rows)

    tickers = sorted(midpoints)
    sampled = map_ordered(sample, tickers, workers)
    kept = [(t, row) for t, row in zip(tickers, sampled) if row is not None]
    if not kept:
        raise DataError("no ticker has quotes covering every trading day")

    sizes = [d.size for d in days]
    step = np.timedelta64(int(round(dt_seconds * 1e9)), "ns")
    gaps = sum(int((np.diff(d) > step).sum()) for d in days)
    return PriceGrid(
        tickers=tuple(t for t, _ in kept),
        times=np.concatenate(days),
        prices=np.vstack([row for _, row in kept]),
        dt=float(dt_seconds),
        day_starts=np.concatenate([[0], np.cumsum(sizes)[:-1]]),
        diagnostics={"dropped_tickers": len(tickers) - len(kept), "gap_returns": gaps},
    )


def log_return_matrix(prices: np.ndarray) -> np.ndarray:
    """ln(m(t + dt) / m(t)) between consecutive columns."""
    prices = np.asarray(prices, dtype=float)
    return np.log(prices[:, 1:] / prices[:, :-1])


def _straddles(grid: PriceGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per return pair: crosses a day boundary; crosses an excluded segment inside a day."""
    n_pairs = grid.times.size - 1
    overnight = np.zeros(n_pairs, dtype=bool)
    overnight[grid.day_starts[1:] - 1] = True
    step = np.timedelta64(int(round(grid.dt * 1e9)), "ns")
    gap = (np.diff(grid.times) > step) & ~overnight
    return overnight, gap


def log_returns(grid: PriceGrid, include_overnight: bool = False) -> ReturnPanel:
    """Log returns of a grid; each trading day becomes one epoch range.

    Returns that straddle a day boundary or an excluded segment inside a day
    are skipped. With ``include_overnight`` they are kept and flagged in
    ``boundary_flags``; the overnight return opens the following day's range.
    """
    returns = log_return_matrix(grid.prices)

    if grid.daily:
        return ReturnPanel(grid.tickers, returns, dt=grid.dt, dt_unit=grid.dt_unit)

    overnight, gap = _straddles(grid)
    straddle = overnight | gap
    if gap.any():
        logger.info("%d returns span excluded segments inside a day", int(gap.sum()))
    starts = list(grid.day_starts) + [grid.prices.shape[1]]

    if include_overnight:
        ranges = [(max(a - 1, 0), b - 1) for a, b in zip(starts[:-1], starts[1:])]
        return ReturnPanel(
            grid.tickers,
            returns,
            dt=grid.dt,
            dt_unit=grid.dt_unit,
            epoch_ranges=tuple((a, b) for a, b in ranges if b > a),
            boundary_flags=straddle,
        )

    keep = ~straddle
    counts = [int(keep[a : b - 1].sum()) for a, b in zip(starts[:-1], starts[1:])]
    edges = np.concatenate([[0], np.cumsum(counts)])
    ranges = tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a)
    return ReturnPanel(
        grid.tickers,
        returns[:, keep],
        dt=grid.dt,
        dt_unit=grid.dt_unit,
        epoch_ranges=ranges,
    )


def load_daily_panel(
    stream: str | Path | IO[str],
    schema: DailySchema | None = None,
) -> PriceGrid:
    """Daily adjusted closes as a grid with dt = 1 trading day.

    Duplicate (date, ticker) rows keep the last value; tickers missing any
    date that others have are dropped.
    """
    schema = schema or DailySchema()
    try:
        raw = pd.read_csv(stream, dtype={schema.ticker: str}, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise SchemaError("daily price file is empty") from None
    missing = [c for c in schema.columns() if c not in raw.columns]
    if missing:
        raise SchemaError(f"daily header {list(raw.columns)} lacks columns {missing}")

    frame = pd.DataFrame(
        {
            "date": pd.to_datetime(raw[schema.date], errors="coerce"),
            "ticker": raw[schema.ticker].str.strip(),
            "price": pd.to_numeric(raw[schema.price], errors="coerce"),
        }
    )
    valid = frame["date"].notna() & frame["ticker"].notna() & (frame["price"] > 0)
    rejected = int((~valid).sum())
    if rejected:
        logger.warning("rejected %d daily rows", rejected)
    frame = frame[valid]
    deduped = frame.drop_duplicates(["date", "ticker"], keep="last")
    duplicates = len(frame) - len(deduped)
    if duplicates:
        logger.warning("resolved %d duplicate (date, ticker) rows (last row wins)", duplicates)

    wide = deduped.pivot(index="date", columns="ticker", values="price").sort_index()
    incomplete = wide.isna().any(axis=0)
    for ticker in wide.columns[incomplete]:
        logger.warning("dropping %s: missing %d dates", ticker, int(wide[ticker].isna().sum()))
    wide = wide.loc[:, ~incomplete]
    if wide.shape[1] == 0:
        raise DataError("no ticker covers every date")

    n_dates = wide.shape[0]
    return PriceGrid(
        tickers=tuple(str(c) for c in wide.columns),
        times=wide.index.to_numpy(dtype="datetime64[ns]"),
        prices=wide.to_numpy(dtype=float).T,
        dt=1.0,
        day_starts=np.arange(n_dates),
        dt_unit="d",
        diagnostics={
            "rejected": rejected,
            "duplicates": duplicates,
            "dropped_tickers": int(incomplete.sum()),
        },
    )
