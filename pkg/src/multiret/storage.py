"""On-disk formats: array containers, CSV tables and JSON reports.

A container is a directory with ``meta.json`` and one ``<name>.npy`` per
array. Arrays are stored little-endian (``<f8``, ``<i8``, ``<M8[ns]``, ``|b1``)
and 2-D arrays in Fortran order, so files are byte-identical across runs and
platforms.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .epochs import ReturnPanel
from .errors import DataError, SchemaError
from .ingest import PriceGrid
from .rotate import EmpiricalDensity, RotatedPanel, SamplePool
from .spectra import CorrelationMatrix, MatrixKind, SpectralDecomposition

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
DENSITY_COLUMNS = ["bin_left", "bin_right", "density", "count"]
_META = "meta.json"


def _portable(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        array = array.astype("<f8")
    elif array.dtype.kind in "iu":
        array = array.astype("<i8")
    elif array.dtype.kind == "M":
        array = array.astype("<M8[ns]")
    elif array.dtype.kind != "b":
        raise DataError(f"cannot store arrays of dtype {array.dtype}")
    return np.asfortranarray(array) if array.ndim == 2 else array


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, non-finite floats as null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path: str | Path):
    with open(path) as f:
        return json.load(f)


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, array in sorted(arrays.items()):
        stored = _portable(array)
        np.save(path / f"{name}.npy", stored, allow_pickle=False)
        index[name] = {"dtype": stored.dtype.str, "shape": list(stored.shape)}
    write_json({**meta, "arrays": index}, path / _META)
    logger.debug("wrote container %s (%s)", path, ", ".join(index))
    return path


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    meta_path = path / _META
    if not meta_path.is_file():
        raise SchemaError(f"{path} is not a container: no {_META}")
    meta = read_json(meta_path)
    arrays = {}
    for name in meta.get("arrays", {}):
        try:
            arrays[name] = np.load(path / f"{name}.npy", allow_pickle=False)
        except FileNotFoundError:
            raise SchemaError(f"container {path} lacks {name}.npy") from None
    return meta, arrays


def _require(meta: dict, kind: str, path: Path) -> None:
    if meta.get("kind") != kind:
        raise SchemaError(f"{path} holds a {meta.get('kind')!r}, expected {kind!r}")


def save_grid(grid: PriceGrid, path: str | Path) -> Path:
    meta = {
        "kind": "price-grid",
        "tickers": list(grid.tickers),
        "dt": grid.dt,
        "dt_unit": grid.dt_unit,
        "diagnostics": grid.diagnostics,
    }
    return write_container(path, meta, {"times": grid.times, "prices": grid.prices, "day_starts": grid.day_starts})


def load_grid(path: str | Path) -> PriceGrid:
    meta, arrays = read_container(path)
    _require(meta, "price-grid", Path(path))
    return PriceGrid(
        tickers=tuple(meta["tickers"]),
        times=arrays["times"],
        prices=arrays["prices"],
        dt=meta["dt"],
        day_starts=arrays["day_starts"],
        dt_unit=meta["dt_unit"],
        diagnostics=meta.get("diagnostics", {}),
    )


def save_panel(panel: ReturnPanel, path: str | Path) -> Path:
    meta = {
        "kind": "return-panel",
        "tickers": list(panel.tickers),
        "dt": panel.dt,
        "dt_unit": panel.dt_unit,
        "slice_id": panel.slice_id,
    }
    arrays = {
        "returns": panel.returns,
        "epoch_ranges": np.array(panel.epoch_ranges, dtype=np.int64),
        "boundary_flags": panel.boundary_flags,
    }
    return write_container(path, meta, arrays)


def load_panel(path: str | Path) -> ReturnPanel:
    meta, arrays = read_container(path)
    _require(meta, "return-panel", Path(path))
    return ReturnPanel(
        tickers=tuple(meta["tickers"]),
        returns=arrays["returns"],
        dt=meta["dt"],
        dt_unit=meta["dt_unit"],
        epoch_ranges=tuple(map(tuple, arrays["epoch_ranges"].tolist())),
        boundary_flags=arrays["boundary_flags"],
        slice_id=meta["slice_id"],
    )


def save_matrix(matrix: CorrelationMatrix, path: str | Path) -> Path:
    meta = {"kind": "matrix", "matrix": matrix.kind.value, "slice_id": matrix.slice_id, "shrinkage": matrix.shrinkage}
    return write_container(path, meta, {"values": matrix.values})


def load_matrix(path: str | Path) -> CorrelationMatrix:
    meta, arrays = read_container(path)
    _require(meta, "matrix", Path(path))
    return CorrelationMatrix(MatrixKind(meta["matrix"]), arrays["values"], meta["slice_id"], meta.get("shrinkage"))


def save_spectrum(spec: SpectralDecomposition, path: str | Path) -> Path:
    meta = {"kind": "spectrum", "matrix": spec.kind.value, "slice_id": spec.slice_id, "full_rank": spec.full_rank}
    return write_container(path, meta, {"eigenvalues": spec.eigenvalues, "eigenvectors": spec.eigenvectors})


def load_spectrum(path: str | Path) -> SpectralDecomposition:
    meta, arrays = read_container(path)
    _require(meta, "spectrum", Path(path))
    return SpectralDecomposition(
        arrays["eigenvalues"], arrays["eigenvectors"], MatrixKind(meta["matrix"]), meta["slice_id"], meta["full_rank"]
    )


def spectrum_frame(spec: SpectralDecomposition) -> pd.DataFrame:
    return pd.DataFrame({"index": np.arange(1, spec.eigenvalues.size + 1), "eigenvalue": spec.eigenvalues})


def save_rotated(rotated: RotatedPanel, path: str | Path) -> Path:
    meta = {"kind": "rotated-panel", "slice_id": rotated.slice_id, "basis_id": rotated.basis_id}
    arrays = {"rotated": rotated.rotated, "eigenvalues": rotated.eigenvalues}
    if rotated.rescaled is not None:
        arrays["rescaled"] = rotated.rescaled
    return write_container(path, meta, arrays)


def load_rotated(path: str | Path) -> RotatedPanel:
    meta, arrays = read_container(path)
    _require(meta, "rotated-panel", Path(path))
    return RotatedPanel(
        arrays["rotated"], arrays.get("rescaled"), arrays["eigenvalues"], meta["slice_id"], meta["basis_id"]
    )


def save_pool(pool: SamplePool, path: str | Path) -> Path:
    meta = {"kind": "sample-pool", "slice_id": pool.slice_id, "label": pool.label}
    arrays = {"values": pool.values}
    if pool.by_direction is not None:
        arrays["by_direction"] = pool.by_direction
    return write_container(path, meta, arrays)


def load_pool(path: str | Path) -> SamplePool:
    meta, arrays = read_container(path)
    _require(meta, "sample-pool", Path(path))
    return SamplePool(arrays["values"], meta["slice_id"], meta["label"], arrays.get("by_direction"))


def write_density(density: EmpiricalDensity, path: str | Path) -> Path:
    return write_csv(density.to_frame(), path)


def read_density(path: str | Path, label: str | None = None) -> EmpiricalDensity:
    frame = pd.read_csv(path)
    missing = [c for c in DENSITY_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"density file {path} lacks columns {missing}")
    left = frame["bin_left"].to_numpy(dtype=float)
    right = frame["bin_right"].to_numpy(dtype=float)
    if left.size == 0 or not np.allclose(left[1:], right[:-1]):
        raise SchemaError(f"density file {path} has no contiguous bins")
    counts = frame["count"].to_numpy(dtype=np.int64)
    return EmpiricalDensity(
        edges=np.append(left, right[-1]),
        density=frame["density"].to_numpy(dtype=float),
        counts=counts,
        sample_count=int(counts.sum()),
        label=label or Path(path).stem,
    )


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def artifact_hashes(root: str | Path, exclude: tuple[str, ...] = ("manifest.json",)) -> dict[str, str]:
    """sha256 of every file under root, keyed by relative POSIX path."""
    root = Path(root)
    return {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in exclude
    }
