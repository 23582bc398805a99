"""Run configuration: environment, then YAML file, then command-line flags."""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, DataError, ParameterError
from .fitting import FAMILIES, FitConfig, FitScale
from .ingest import SESSION_CLOSE, SESSION_OPEN, parse_clock
from .models import ModelDistribution, build_model
from .rotate import BinningKind, BinningRule
from .storage import dumps

DEFAULT_OUTPUT_ROOT = "multiret-out"
SOURCES = ("quotes", "daily", "synthetic")


@dataclass(frozen=True)
class SyntheticConfig:
    k: int = 50
    epochs: int = 50
    t_ep: int = 500
    rho: float = 0.3
    kernel: str = "algebraic"
    l: float | None = 3.0
    ensemble: str = "algebraic"
    N: float | None = 60.0
    L: float | None = 40.0

    def model(self) -> ModelDistribution:
        return build_model(self.kernel, self.l if self.kernel == "algebraic" else None, self.ensemble, self.N, self.L)


@dataclass(frozen=True)
class RunConfig:
    source: str = "synthetic"
    quotes: Path | None = None
    daily: Path | None = None
    calendar: Path | None = None
    session_date: str | None = None
    session: tuple[str, str] | None = None
    dt: float = 1.0
    include_overnight: bool = False
    epoch_columns: int | None = None
    interval_epochs: tuple[int, ...] = (25,)
    families: tuple[str, ...] = FAMILIES
    scales: tuple[FitScale, ...] = (FitScale.LOG, FitScale.LIN)
    binning: BinningRule = field(default_factory=BinningRule)
    fit: FitConfig = field(default_factory=FitConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int | None = None
    output: Path = Path(DEFAULT_OUTPUT_ROOT)
    workers: int | None = None

    @classmethod
    def from_env(cls) -> RunConfig:
        seed = os.environ.get("MULTIRET_SEED")
        workers = os.environ.get("MULTIRET_WORKERS")
        try:
            return cls(
                output=Path(os.environ.get("MULTIRET_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT)),
                seed=int(seed) if seed else None,
                workers=int(workers) if workers else None,
            )
        except ValueError as exc:
            raise ConfigError(f"bad MULTIRET_* environment value: {exc}") from None

    @classmethod
    def from_file(cls, path: str | Path, base: RunConfig | None = None) -> RunConfig:
        path = Path(path)
        try:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return (base or cls.from_env()).merge(doc, relative_to=path.parent)

    def merge(self, doc: dict, relative_to: Path | None = None) -> RunConfig:
        """New config with the keys of ``doc`` applied; unknown keys are errors."""
        known = {f.name for f in dataclasses.fields(self)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        changes: dict[str, object] = {}
        try:
            for key, value in doc.items():
                if key in ("quotes", "daily", "calendar", "output"):
                    value = None if value is None else Path(value)
                    if value is not None and relative_to is not None and not value.is_absolute():
                        value = relative_to / value
                elif key == "binning":
                    value = _group(BinningRule, self.binning, value, "binning")
                elif key == "fit":
                    value = _group(FitConfig, self.fit, value, "fit", tuples=("l_bounds", "n_bounds"))
                elif key == "synthetic":
                    value = _group(SyntheticConfig, self.synthetic, value, "synthetic")
                elif key == "interval_epochs":
                    value = tuple(int(v) for v in (value if isinstance(value, list) else [value]))
                elif key == "session":
                    value = None if value is None else _session(value)
                elif key == "families":
                    value = tuple(value)
                elif key == "scales":
                    value = tuple(FitScale(v) for v in value)
                changes[key] = value
            return dataclasses.replace(self, **changes)
        except ConfigError:
            raise
        except (TypeError, ValueError, DataError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from None

    def validate(self) -> RunConfig:
        """Checks everything that can be checked before any work starts."""
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "synthetic":
            if self.seed is None:
                raise ConfigError("synthetic source needs a seed (config 'seed', --seed or MULTIRET_SEED)")
            try:
                self.synthetic.model()
            except ParameterError as exc:
                raise ConfigError(f"synthetic model: {exc}") from None
            if self.synthetic.k < 2:
                raise ConfigError(f"synthetic panel needs K >= 2, got {self.synthetic.k}")
        else:
            path = getattr(self, self.source)
            if path is None:
                raise ConfigError(f"source {self.source!r} needs the {self.source!r} path")
            if not path.is_file():
                raise ConfigError(f"{self.source} file {path} does not exist")
        if self.calendar is not None and not self.calendar.is_file():
            raise ConfigError(f"calendar file {self.calendar} does not exist")
        if self.session is not None:
            if self.source != "quotes":
                raise ConfigError(f"a session window applies to the quotes source, not {self.source!r}")
            if self.calendar is not None:
                raise ConfigError("give the session window either in the config or in the calendar file, not both")
            opening, closing = self.session_window
            if opening >= closing:
                raise ConfigError(f"session window {opening}-{closing} is empty")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.interval_epochs or min(self.interval_epochs) < 1:
            raise ConfigError(f"interval_epochs must be positive, got {self.interval_epochs}")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown families {bad}, expected a subset of {FAMILIES}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        return self

    @property
    def session_window(self) -> tuple[datetime.time, datetime.time]:
        if self.session is None:
            return SESSION_OPEN, SESSION_CLOSE
        return datetime.time.fromisoformat(self.session[0]), datetime.time.fromisoformat(self.session[1])

    @property
    def dt_label(self) -> str:
        if self.source == "daily":
            return "1d"
        if self.source == "synthetic":
            return "1step"
        return f"{self.dt:g}s"

    def to_dict(self) -> dict:
        """Settings that determine the artifacts; output location and worker count excluded."""
        doc = dataclasses.asdict(self)
        doc.pop("output")
        doc.pop("workers")
        return doc

    def hash(self) -> str:
        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()


def _group(cls, current, value, name: str, tuples: tuple[str, ...] = ()):
    if value is None:
        return current
    if not isinstance(value, dict):
        raise ConfigError(f"config group {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    value = {k: tuple(v) if k in tuples else v for k, v in value.items()}
    if cls is BinningRule and "kind" in value:
        value["kind"] = BinningKind(value["kind"])
    return dataclasses.replace(current, **value)


def _session(value) -> tuple[str, str]:
    if isinstance(value, dict):
        unknown = sorted(set(value) - {"open", "close"})
        if unknown:
            raise ConfigError(f"unknown keys in 'session': {unknown}")
        value = (value.get("open", SESSION_OPEN), value.get("close", SESSION_CLOSE))
    if isinstance(value, str) or len(value) != 2:
        raise ConfigError(f"session must be an open/close pair, got {value!r}")
    return parse_clock(value[0]).isoformat(), parse_clock(value[1]).isoformat()
