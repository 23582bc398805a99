"""Rotation into the eigenbasis, eigenvalue rescaling, aggregation and histograms."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from .epochs import NormalizedPanel, Normalization
from .errors import DataError, RankError
from .runtime import map_ordered
from .spectra import MatrixKind, SpectralDecomposition

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100
DEFAULT_BINS = 201
LIMIT_FACTOR = 1.05
LIMIT_CAP = 50.0

# normalization each basis kind expects of the returns it rotates
BASIS_MODES = {MatrixKind.TIME: Normalization.TIME_SERIES, MatrixKind.COVARIANCE: Normalization.MEAN_ONLY}


@dataclass(frozen=True, eq=False)
class RotatedPanel:
    """r-bar = U^T r per column; r-tilde = r-bar / sqrt(Lambda) row-wise.

    ``rescaled`` is None when the basis came from a rank-deficient matrix.
    """

    rotated: np.ndarray
    rescaled: np.ndarray | None
    eigenvalues: np.ndarray
    slice_id: str
    basis_id: str

    @property
    def n_directions(self) -> int:
        return self.rotated.shape[0]

    @property
    def n_times(self) -> int:
        return self.rotated.shape[1]


@dataclass(frozen=True, eq=False)
class SamplePool:
    """Flat pool of values; ``by_direction`` keeps the K x T layout when known."""

    values: np.ndarray
    slice_id: str
    label: str = "aggr"
    by_direction: np.ndarray | None = None

    def __len__(self) -> int:
        return self.values.size

    def direction(self, k: int) -> np.ndarray:
        if self.by_direction is None:
            raise DataError(f"pool {self.slice_id} has no per-direction layout")
        return self.by_direction[k]

    @classmethod
    def concat(cls, pools: Sequence[SamplePool], slice_id: str, label: str | None = None) -> SamplePool:
        if not pools:
            raise DataError(f"no pools to merge into {slice_id}")
        values = np.concatenate([p.values for p in pools])
        values.setflags(write=False)
        return cls(values, slice_id, label or pools[0].label)


def rotate_returns(
    panel: NormalizedPanel,
    spec: SpectralDecomposition,
    basis_id: str | None = None,
) -> RotatedPanel:
    if spec.kind is MatrixKind.POSITION:
        raise DataError("returns rotate in the basis of a K x K matrix, not the position matrix D")
    expected = BASIS_MODES[spec.kind]
    if panel.mode is not expected:
        raise DataError(
            f"a {spec.kind.value} basis rotates {expected.value} normalized returns, "
            f"got {panel.mode.value} returns of {panel.slice_id!r}"
        )
    if spec.slice_id != panel.slice_id:
        raise DataError(
            f"basis from {spec.slice_id!r} cannot rotate returns of {panel.slice_id!r}; "
            "decomposition and returns must come from the same slice"
        )
    if spec.eigenvectors.shape[0] != panel.n_tickers:
        raise DataError(f"basis is {spec.eigenvectors.shape[0]}-dimensional, panel has K = {panel.n_tickers}")

    rotated = spec.eigenvectors.T @ panel.values
    rotated.setflags(write=False)
    rescaled = None
    if spec.full_rank:
        rescaled = rotated / np.sqrt(spec.eigenvalues)[:, None]
        rescaled.setflags(write=False)
    else:
        logger.warning("basis of %s is rank deficient, returns are rotated but not rescaled", spec.slice_id)
    return RotatedPanel(
        rotated=rotated,
        rescaled=rescaled,
        eigenvalues=spec.eigenvalues,
        slice_id=panel.slice_id,
        basis_id=basis_id or f"{spec.kind.value}:{spec.slice_id}",
    )


def aggregate(rotated: RotatedPanel) -> SamplePool:
    """Pool all K x T rotated and rescaled returns into one univariate sample."""
    if rotated.rescaled is None:
        raise RankError(f"{rotated.slice_id} has no rescaled returns to aggregate (rank-deficient basis)")
    return SamplePool(
        values=rotated.rescaled.reshape(-1),
        slice_id=rotated.slice_id,
        label="aggr",
        by_direction=rotated.rescaled,
    )


class BinningKind(str, Enum):
    UNIFORM = "uniform"
    FREEDMAN_DIACONIS = "fd"


@dataclass(frozen=True)
class BinningRule:
    """Uniform bins on [-limit, limit], or Freedman-Diaconis bins inside [-clip, clip].

    Without a limit, uniform bins span Q = min(1.05 max|x|, 50).
    """

    kind: BinningKind = BinningKind.UNIFORM
    bins: int = DEFAULT_BINS
    limit: float | None = None
    clip: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BinningKind(self.kind))
        if self.bins < 2:
            raise DataError(f"need at least 2 bins, got {self.bins}")
        for name in ("limit", "clip"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise DataError(f"binning {name} must be positive, got {value}")

    def edges(self, samples: np.ndarray) -> np.ndarray:
        if self.kind is BinningKind.UNIFORM:
            q = self.limit
            if q is None:
                q = min(LIMIT_FACTOR * float(np.abs(samples).max()), LIMIT_CAP)
            return np.linspace(-q, q, self.bins + 1)
        lo, hi = float(samples.min()), float(samples.max())
        if self.clip is not None:
            lo, hi = max(lo, -self.clip), min(hi, self.clip)
        return np.histogram_bin_edges(samples, bins="fd", range=(lo, hi))


@dataclass(frozen=True, eq=False)
class EmpiricalDensity:
    """Histogram normalized to unit integral over the in-range samples.

    ``sample_count`` counts the samples inside the bins; ``outside`` the rest.
    """

    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    sample_count: int
    label: str
    outside: int = 0

    def __post_init__(self) -> None:
        if self.edges.size != self.density.size + 1 or self.density.shape != self.counts.shape:
            raise DataError(f"density {self.label}: {self.edges.size} edges for {self.density.size} bins")

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "bin_left": self.edges[:-1],
                "bin_right": self.edges[1:],
                "density": self.density,
                "count": self.counts,
            }
        )


def _as_samples(samples: SamplePool | np.ndarray) -> np.ndarray:
    if isinstance(samples, SamplePool):
        return samples.values
    return np.asarray(samples, dtype=float).ravel()


def estimate_density(
    samples: SamplePool | np.ndarray,
    binning: BinningRule | None = None,
    label: str | None = None,
) -> EmpiricalDensity:
    values = _as_samples(samples)
    if label is None:
        label = samples.label if isinstance(samples, SamplePool) else "aggr"
    if values.size < MIN_SAMPLES:
        raise DataError(f"density {label} needs >= {MIN_SAMPLES} samples, got {values.size}")
    if np.ptp(values) == 0:
        raise DataError(f"density {label}: all {values.size} samples are identical")

    edges = (binning or BinningRule()).edges(values)
    counts, _ = np.histogram(values, bins=edges)
    inside = int(counts.sum())
    if inside == 0:
        raise DataError(f"density {label}: no samples inside [{edges[0]:g}, {edges[-1]:g}]")
    outside = values.size - inside
    if outside:
        logger.debug("density %s: %d of %d samples outside the bins", label, outside, values.size)
    return EmpiricalDensity(
        edges=edges,
        density=counts / (inside * np.diff(edges)),
        counts=counts.astype(np.int64),
        sample_count=inside,
        label=label,
        outside=outside,
    )


@dataclass(frozen=True)
class EigenvectorDensities:
    """Per-direction densities rot,k and rot-scal,k; k counts from 1 at the smallest eigenvalue.

    Entries are None for flagged subpools. ``largest`` lists direction
    indices by descending eigenvalue.
    """

    rotated: tuple[EmpiricalDensity | None, ...]
    rescaled: tuple[EmpiricalDensity | None, ...]
    flagged: tuple[int, ...]
    largest: tuple[int, ...]


def _subpool_density(values: np.ndarray, binning: BinningRule | None, label: str) -> EmpiricalDensity | None:
    try:
        return estimate_density(values, binning, label)
    except DataError as exc:
        logger.warning("%s", exc)
        return None


def per_eigenvector_densities(
    rotated: RotatedPanel,
    binning: BinningRule | None = None,
    workers: int | None = None,
) -> EigenvectorDensities:
    k_all = range(rotated.n_directions)
    plain = map_ordered(lambda k: _subpool_density(rotated.rotated[k], binning, f"rot,{k + 1}"), k_all, workers)
    if rotated.rescaled is not None:
        scaled = map_ordered(
            lambda k: _subpool_density(rotated.rescaled[k], binning, f"rot-scal,{k + 1}"), k_all, workers
        )
    else:
        scaled = [None] * rotated.n_directions
    flagged = tuple(k for k in k_all if plain[k] is None)
    largest = tuple(int(k) for k in np.argsort(rotated.eigenvalues, kind="stable")[::-1])
    return EigenvectorDensities(tuple(plain), tuple(scaled), flagged, largest)


def original_densities(panel: NormalizedPanel, binning: BinningRule | None = None) -> list[EmpiricalDensity | None]:
    """Densities orig,k of each normalized ticker series."""
    if panel.mode is not Normalization.TIME_SERIES:
        raise DataError(f"original densities need time-series normalized returns, got {panel.mode.value}")
    return [_subpool_density(panel.values[k], binning, f"orig,{ticker}") for k, ticker in enumerate(panel.tickers)]


def pool_original(panels: Sequence[NormalizedPanel]) -> SamplePool:
    """All normalized original returns of the given slices in one pool."""
    if not panels:
        raise DataError("no panels to pool")
    values = np.concatenate([p.values.reshape(-1) for p in panels])
    values.setflags(write=False)
    slice_id = panels[0].slice_id if len(panels) == 1 else f"{panels[0].slice_id}..{panels[-1].slice_id}"
    return SamplePool(values, slice_id, label="orig")


def loglog_frame(density: EmpiricalDensity) -> pd.DataFrame:
    """Positive and mirrored negative tail of a density against |x| for log-log plots."""
    centers = density.centers
    positive = centers > 0
    abs_x = centers[positive]
    return pd.DataFrame(
        {
            "abs_x": abs_x,
            "density_pos": density.density[positive],
            "density_neg": np.interp(-abs_x, centers, density.density),
        }
    )
