"""Return panels, epoch/long-interval partitioning and the two normalizations.

A long interval is never normalized as a whole: it is the concatenation of
epochs that were normalized one by one.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)


class Normalization(str, Enum):
    TIME_SERIES = "time-series"
    POSITION_SERIES = "position-series"
    MEAN_ONLY = "mean-only"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    """K x T log returns with epoch ranges and per-column day-boundary flags."""

    tickers: tuple[str, ...]
    returns: np.ndarray
    dt: float = 1.0
    dt_unit: str = "s"
    epoch_ranges: tuple[tuple[int, int], ...] = ()
    boundary_flags: np.ndarray | None = None
    slice_id: str = "panel"

    def __post_init__(self) -> None:
        returns = np.array(self.returns, dtype=float)
        if returns.ndim != 2:
            raise DataError(f"returns must be a K x T matrix, got shape {returns.shape}")
        n_tickers, n_times = returns.shape
        if len(self.tickers) != n_tickers:
            raise DataError(f"{len(self.tickers)} tickers for {n_tickers} return rows")
        if n_tickers < 1 or n_times < 2:
            raise DataError(f"panel {self.slice_id} needs K >= 1 and T >= 2, got {returns.shape}")
        if not np.isfinite(returns).all():
            raise DataError(f"panel {self.slice_id} contains non-finite returns")

        ranges = tuple((int(a), int(b)) for a, b in self.epoch_ranges) or ((0, n_times),)
        position = 0
        for start, stop in ranges:
            if start != position or stop <= start:
                raise DataError(f"epoch ranges {ranges} do not tile columns 0..{n_times}")
            position = stop
        if position != n_times:
            raise DataError(f"epoch ranges end at {position}, panel has {n_times} columns")

        if self.boundary_flags is None:
            flags = np.zeros(n_times, dtype=bool)
        else:
            flags = np.array(self.boundary_flags, dtype=bool)
            if flags.shape != (n_times,):
                raise DataError(f"boundary flags shape {flags.shape} != ({n_times},)")

        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "returns", _frozen(returns))
        object.__setattr__(self, "epoch_ranges", ranges)
        object.__setattr__(self, "boundary_flags", _frozen(flags))

    @property
    def n_tickers(self) -> int:
        return self.returns.shape[0]

    @property
    def n_times(self) -> int:
        return self.returns.shape[1]

    def columns(self, start: int, stop: int, slice_id: str) -> ReturnPanel:
        return ReturnPanel(
            tickers=self.tickers,
            returns=self.returns[:, start:stop],
            dt=self.dt,
            dt_unit=self.dt_unit,
            boundary_flags=self.boundary_flags[start:stop],
            slice_id=slice_id,
        )


@dataclass(frozen=True, eq=False)
class NormalizedPanel:
    """Normalized values of a panel slice plus the moments used, kept for audit.

    ``means``/``stds`` are per row (shape (K,), or (K, n_epochs) after
    concatenation) for time-series and mean-only modes, per column (T,) for
    position series. ``stds`` is None in mean-only mode.
    """

    base: ReturnPanel
    values: np.ndarray
    mode: Normalization
    means: np.ndarray
    stds: np.ndarray | None = None

    @property
    def slice_id(self) -> str:
        return self.base.slice_id

    @property
    def tickers(self) -> tuple[str, ...]:
        return self.base.tickers

    @property
    def n_tickers(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EpochPartition:
    epochs: tuple[ReturnPanel, ...]
    interval_epochs: int
    epoch_columns: int | None
    root_id: str = "panel"

    @property
    def n_intervals(self) -> int:
        return len(self.epochs) // self.interval_epochs

    def interval_id(self, index: int) -> str:
        return f"{self.root_id}/interval-{index:03d}"

    def intervals(self) -> list[tuple[ReturnPanel, ...]]:
        size = self.interval_epochs
        return [tuple(self.epochs[i * size : (i + 1) * size]) for i in range(self.n_intervals)]


def partition(
    panel: ReturnPanel,
    epoch_columns: int | None = None,
    interval_epochs: int = 1,
    allow_remainder: bool = False,
) -> EpochPartition:
    """Cut a panel into epochs and group consecutive epochs into long intervals.

    With ``epoch_columns=None`` the panel's own epoch ranges (one per trading
    day for intraday panels) become the epochs, which keeps half-days intact.
    """
    if interval_epochs < 1:
        raise DataError(f"interval_epochs must be >= 1, got {interval_epochs}")

    if epoch_columns is None:
        bounds = list(panel.epoch_ranges)
    else:
        if epoch_columns < 2:
            raise DataError(f"epoch_columns must be >= 2, got {epoch_columns}")
        count, remainder = divmod(panel.n_times, epoch_columns)
        if count == 0:
            raise DataError(
                f"panel has {panel.n_times} columns, fewer than one epoch of {epoch_columns}"
            )
        if remainder and not allow_remainder:
            raise DataError(
                f"{panel.n_times} columns = {count} x {epoch_columns} + {remainder}: "
                f"{epoch_columns - remainder} columns short of another epoch "
                "(pass allow_remainder to drop the trailing columns)"
            )
        if remainder:
            logger.warning("dropping %d trailing columns of %s", remainder, panel.slice_id)
        bounds = [(i * epoch_columns, (i + 1) * epoch_columns) for i in range(count)]

    spare = len(bounds) % interval_epochs
    if spare and not allow_remainder:
        raise DataError(
            f"{len(bounds)} epochs do not group into intervals of {interval_epochs}: "
            f"{interval_epochs - spare} epochs short of another interval"
        )

    epochs = tuple(
        panel.columns(start, stop, f"{panel.slice_id}/epoch-{i:04d}")
        for i, (start, stop) in enumerate(bounds)
    )
    return EpochPartition(
        epochs=epochs,
        interval_epochs=interval_epochs,
        epoch_columns=epoch_columns,
        root_id=panel.slice_id,
    )


def normalize_time_series(panel: ReturnPanel) -> NormalizedPanel:
    """Each row to zero mean and unit population standard deviation (divisor T)."""
    x = panel.returns
    constant = np.ptp(x, axis=1) == 0
    if constant.any():
        names = [panel.tickers[i] for i in np.flatnonzero(constant)]
        raise DataError(f"zero standard deviation for {names} on {panel.slice_id}")
    means = x.mean(axis=1)
    centered = x - means[:, None]
    stds = np.sqrt((centered**2).mean(axis=1))
    return NormalizedPanel(
        base=panel,
        values=_frozen(centered / stds[:, None]),
        mode=Normalization.TIME_SERIES,
        means=_frozen(means),
        stds=_frozen(stds),
    )


def normalize_positions(panel: ReturnPanel) -> NormalizedPanel:
    """Each column to zero mean and unit population standard deviation (divisor K)."""
    x = panel.returns
    constant = np.ptp(x, axis=0) == 0
    if constant.any():
        raise DataError(
            f"zero cross-sectional deviation in columns {np.flatnonzero(constant).tolist()} "
            f"of {panel.slice_id}"
        )
    means = x.mean(axis=0)
    centered = x - means[None, :]
    stds = np.sqrt((centered**2).mean(axis=0))
    return NormalizedPanel(
        base=panel,
        values=_frozen(centered / stds[None, :]),
        mode=Normalization.POSITION_SERIES,
        means=_frozen(means),
        stds=_frozen(stds),
    )


def mean_only_normalize(panel: ReturnPanel) -> NormalizedPanel:
    means = panel.returns.mean(axis=1)
    return NormalizedPanel(
        base=panel,
        values=_frozen(panel.returns - means[:, None]),
        mode=Normalization.MEAN_ONLY,
        means=_frozen(means),
    )


def concatenate_epochs(
    epochs: Sequence[NormalizedPanel],
    slice_id: str | None = None,
) -> NormalizedPanel:
    """Append per-epoch normalized series column-wise, without renormalizing."""
    if not epochs:
        raise DataError("no epochs to concatenate")
    first = epochs[0]
    for epoch in epochs:
        if epoch.mode is not Normalization.TIME_SERIES:
            raise DataError(f"epoch {epoch.slice_id} is {epoch.mode.value}, expected time-series")
        if epoch.tickers != first.tickers:
            raise DataError(f"ticker mismatch between {first.slice_id} and {epoch.slice_id}")
    if len(epochs) == 1 and slice_id is None:
        return first

    ranges = []
    position = 0
    for epoch in epochs:
        ranges.append((position, position + epoch.n_times))
        position += epoch.n_times

    base = ReturnPanel(
        tickers=first.tickers,
        returns=np.hstack([e.base.returns for e in epochs]),
        dt=first.base.dt,
        dt_unit=first.base.dt_unit,
        epoch_ranges=tuple(ranges),
        boundary_flags=np.concatenate([e.base.boundary_flags for e in epochs]),
        slice_id=slice_id or f"{first.slice_id}..{epochs[-1].slice_id}",
    )
    return NormalizedPanel(
        base=base,
        values=_frozen(np.hstack([e.values for e in epochs])),
        mode=Normalization.TIME_SERIES,
        means=_frozen(np.column_stack([np.reshape(e.means, (len(first.tickers), -1)) for e in epochs])),
        stds=_frozen(np.column_stack([np.reshape(e.stds, (len(first.tickers), -1)) for e in epochs])),
    )
