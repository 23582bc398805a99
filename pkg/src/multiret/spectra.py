"""Correlation matrices C and D, covariances, eigendecomposition and shrinkage."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg
from sklearn.covariance import ledoit_wolf_shrinkage

from .epochs import NormalizedPanel, Normalization
from .errors import DataError, RankError

logger = logging.getLogger(__name__)

FULL_RANK_RATIO = 1e-10
_SYMMETRY_TOL = 1e-12


class MatrixKind(str, Enum):
    TIME = "C"
    POSITION = "D"
    COVARIANCE = "cov"


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    kind: MatrixKind
    values: np.ndarray
    slice_id: str
    shrinkage: float | None = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DataError(f"{self.kind.value} matrix must be square, got {values.shape}")
        scale = max(1.0, float(np.abs(values).max(initial=0.0)))
        if np.abs(values - values.T).max(initial=0.0) > _SYMMETRY_TOL * scale:
            raise DataError(f"{self.kind.value} matrix of {self.slice_id} is not symmetric")
        if self.kind is not MatrixKind.COVARIANCE and np.abs(np.diag(values) - 1.0).max() > _SYMMETRY_TOL:
            raise DataError(f"{self.kind.value} matrix of {self.slice_id} lacks a unit diagonal")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Ascending eigenvalues with orthonormal eigenvectors in the columns of U."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kind: MatrixKind
    slice_id: str
    full_rank: bool

    def require_full_rank(self) -> None:
        if not self.full_rank:
            raise RankError(
                f"{self.kind.value} matrix of {self.slice_id} is rank deficient: "
                f"min eigenvalue {self.eigenvalues[0]:.3e} <= {FULL_RANK_RATIO:g} x max "
                f"{self.eigenvalues[-1]:.3e}"
            )

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T

    def inverse(self) -> np.ndarray:
        self.require_full_rank()
        u = self.eigenvectors
        return (u / self.eigenvalues) @ u.T


def _symmetric(values: np.ndarray) -> np.ndarray:
    return (values + values.T) / 2.0


def _require_mode(panel: NormalizedPanel, mode: Normalization, what: str) -> None:
    if panel.mode is not mode:
        raise DataError(f"{what} needs a {mode.value} panel, {panel.slice_id} is {panel.mode.value}")


def time_correlation(panel: NormalizedPanel) -> CorrelationMatrix:
    """C = M M^T / T for time-series normalized rows."""
    _require_mode(panel, Normalization.TIME_SERIES, "time correlation")
    m = panel.values
    return CorrelationMatrix(MatrixKind.TIME, _symmetric(m @ m.T / m.shape[1]), panel.slice_id)


def position_correlation(panel: NormalizedPanel) -> CorrelationMatrix:
    """D = E^T E / K, a T x T matrix of dependencies in time."""
    _require_mode(panel, Normalization.POSITION_SERIES, "position correlation")
    e = panel.values
    return CorrelationMatrix(MatrixKind.POSITION, _symmetric(e.T @ e / e.shape[0]), panel.slice_id)


def covariance(panel: NormalizedPanel) -> CorrelationMatrix:
    """Sigma = G0 G0^T / T for de-meaned rows."""
    _require_mode(panel, Normalization.MEAN_ONLY, "covariance")
    g = panel.values
    return CorrelationMatrix(MatrixKind.COVARIANCE, _symmetric(g @ g.T / g.shape[1]), panel.slice_id)


def to_correlation(matrix: CorrelationMatrix) -> CorrelationMatrix:
    """Rescale a covariance-type matrix to unit diagonal."""
    if matrix.kind is not MatrixKind.COVARIANCE:
        return matrix
    scale = np.sqrt(np.diag(matrix.values))
    if (scale == 0).any():
        raise RankError(f"zero variance in covariance of {matrix.slice_id}")
    values = matrix.values / np.outer(scale, scale)
    np.fill_diagonal(values, 1.0)
    return CorrelationMatrix(MatrixKind.TIME, _symmetric(values), matrix.slice_id, matrix.shrinkage)


def eigendecompose(matrix: CorrelationMatrix) -> SpectralDecomposition:
    """Symmetric eigendecomposition with a deterministic basis.

    Eigenvalues ascend; each eigenvector has its largest-magnitude entry
    positive; columns sharing a degenerate eigenvalue are ordered
    lexicographically.
    """
    eigenvalues, eigenvectors = linalg.eigh(matrix.values)

    pivots = np.abs(eigenvectors).argmax(axis=0)
    signs = np.sign(eigenvectors[pivots, np.arange(eigenvectors.shape[1])])
    signs[signs == 0] = 1.0
    eigenvectors = eigenvectors * signs

    tol = 1e-12 * max(1.0, float(np.abs(eigenvalues).max(initial=0.0)))
    order = np.arange(eigenvalues.size)
    start = 0
    while start < eigenvalues.size:
        stop = start + 1
        while stop < eigenvalues.size and eigenvalues[stop] - eigenvalues[start] <= tol:
            stop += 1
        if stop - start > 1:
            block = eigenvectors[:, start:stop]
            # np.lexsort sorts by its last key first
            order[start:stop] = start + np.lexsort(block[::-1])
        start = stop
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]

    full_rank = bool(eigenvalues[0] > FULL_RANK_RATIO * eigenvalues[-1])
    if not full_rank:
        logger.debug("%s matrix of %s is rank deficient", matrix.kind.value, matrix.slice_id)
    for array in (eigenvalues, eigenvectors):
        array.setflags(write=False)
    return SpectralDecomposition(eigenvalues, eigenvectors, matrix.kind, matrix.slice_id, full_rank)


def mahalanobis(r: np.ndarray, spec: SpectralDecomposition) -> float | np.ndarray:
    """Squared Mahalanobis distance r^T C^-1 r as sum_k rbar_k^2 / Lambda_k.

    ``r`` may be one K-vector or a K x T matrix of column vectors.
    """
    spec.require_full_rank()
    rotated = spec.eigenvectors.T @ np.asarray(r, dtype=float)
    weights = 1.0 / spec.eigenvalues
    if rotated.ndim == 1:
        return float(np.dot(rotated**2, weights))
    return weights @ rotated**2


def ledoit_wolf_shrink(panel: NormalizedPanel, shrinkage: float | None = None) -> CorrelationMatrix:
    """Shrink the sample covariance towards mu * I, mu = trace(S) / K.

    The intensity is the Ledoit-Wolf optimum clipped to [0, 1] unless given.
    """
    _require_mode(panel, Normalization.MEAN_ONLY, "Ledoit-Wolf shrinkage")
    if panel.n_times < 2:
        raise DataError(f"shrinkage needs T >= 2, {panel.slice_id} has {panel.n_times}")
    sample = covariance(panel).values
    if shrinkage is None:
        shrinkage = float(ledoit_wolf_shrinkage(panel.values.T, assume_centered=True))
    shrinkage = float(np.clip(shrinkage, 0.0, 1.0))
    mu = np.trace(sample) / sample.shape[0]
    shrunk = (1.0 - shrinkage) * sample + shrinkage * mu * np.eye(sample.shape[0])
    return CorrelationMatrix(MatrixKind.COVARIANCE, _symmetric(shrunk), panel.slice_id, shrinkage)
