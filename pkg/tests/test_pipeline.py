"""End-to-end pipeline runs on small synthetic panels."""

from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from multiret.__main__ import main
from multiret.config import RunConfig
from multiret.errors import ConfigError, DataError
from multiret.pipeline import (
    AVERAGE_COLUMNS,
    CHI2_COLUMNS,
    EPOCH_COLUMNS,
    INTERVAL_AVERAGE_COLUMNS,
    INTERVAL_COLUMNS,
    run_pipeline,
)


def _config(tmp_path, name="run", **overrides) -> RunConfig:
    doc = {
        "synthetic": {"k": 5, "epochs": 4, "t_ep": 300, "ensemble": "gaussian", "N": 20.0, "L": None},
        "interval_epochs": [2],
        "families": ["GG"],
        "scales": ["log"],
        "binning": {"bins": 51},
        "seed": 1,
        "output": str(tmp_path / name),
        "workers": 2,
    }
    doc.update(overrides)
    return RunConfig().merge(doc)


def test_tables_and_manifest(tmp_path):
    result = run_pipeline(_config(tmp_path))
    out = result.output

    epochs = pd.read_csv(out / "tables" / "epoch_fits.csv")
    assert list(epochs.columns) == EPOCH_COLUMNS
    assert list(epochs["epoch"]) == [1, 2, 3, 4]
    assert set(epochs["dt"]) == {"1step"}
    assert list(pd.read_csv(out / "tables" / "epoch_averages.csv").columns) == AVERAGE_COLUMNS

    intervals = pd.read_csv(out / "tables" / "interval_fits.csv")
    assert list(intervals.columns) == INTERVAL_COLUMNS
    assert list(intervals["interval"]) == [1, 2]
    assert intervals["GG_N"].notna().all()
    assert intervals["AA_N"].isna().all()
    assert list(pd.read_csv(out / "tables" / "interval_chi2.csv").columns) == CHI2_COLUMNS
    assert list(pd.read_csv(out / "tables" / "interval_averages.csv").columns) == INTERVAL_AVERAGE_COLUMNS

    assert (out / "panel" / "meta.json").is_file()
    assert (out / "densities" / "epochs" / "epoch-0001.csv").is_file()
    assert (out / "spectra" / "length-002" / "interval-002.csv").is_file()
    assert (out / "curves" / "length-002" / "interval-001-GG-log.csv").is_file()
    assert (out / "reports" / "overlay-length-002-interval-001.json").is_file()

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest == result.manifest
    assert manifest["config_hash"] == _config(tmp_path).hash()
    assert "tables/epoch_fits.csv" in manifest["artifacts"]
    assert "manifest.json" not in manifest["artifacts"]
    assert set(manifest["versions"]) >= {"multiret", "numpy", "scipy"}


def test_same_seed_same_artifacts(tmp_path):
    """Worker count and output location leave every artifact unchanged."""
    first = run_pipeline(_config(tmp_path, "a"))
    second = run_pipeline(_config(tmp_path, "b", workers=1))
    assert first.manifest["artifacts"] == second.manifest["artifacts"]
    assert first.manifest["config_hash"] == second.manifest["config_hash"]


def test_intervals_longer_than_run_are_skipped(tmp_path):
    result = run_pipeline(_config(tmp_path, interval_epochs=[8]))
    assert result.interval_table.empty
    assert list(result.interval_table.columns) == INTERVAL_COLUMNS
    assert len(result.epoch_table) == 4


@pytest.mark.slow
def test_algebraic_families_use_mean_epoch_shape(tmp_path):
    result = run_pipeline(_config(tmp_path, families=["GG", "AG"], scales=["log", "lin"]))
    assert len(result.interval_table) == 4
    assert result.interval_table["AG_N"].notna().all()
    assert set(result.average_table["fit"]) == {"log", "lin"}


def test_config_errors_are_tagged(tmp_path):
    with pytest.raises(ConfigError) as info:
        run_pipeline(_config(tmp_path, seed=None))
    assert info.value.stage == "config"
    assert not (tmp_path / "run").exists()


def test_data_errors_are_tagged(tmp_path):
    daily = tmp_path / "daily.csv"
    daily.write_text("date,ticker,adj_close\n2014-01-02,A,1\n2014-01-03,A,2\n2014-01-06,A,3\n")
    with pytest.raises(DataError) as info:
        run_pipeline(_config(tmp_path, source="daily", daily=str(daily)))
    assert info.value.stage == "returns"
    assert "K >= 2" in str(info.value)


def test_matches_stepwise_commands(tmp_path):
    """The first epoch density equals correlate -> rotate -> aggregate on the saved panel."""
    out = run_pipeline(_config(tmp_path)).output
    steps = tmp_path / "steps"
    common = ["--panel", str(out / "panel"), "--epoch", "1", "-q"]
    assert main(["correlate", *common, "-o", str(steps / "corr")]) == 0
    assert main(["rotate", *common, "--spectrum", str(steps / "corr" / "spectrum"), "-o", str(steps / "rot")]) == 0
    assert main(["aggregate", "--rotated", str(steps / "rot"), "--bins", "51", "-o", str(steps / "agg"), "-q"]) == 0
    expected = (out / "densities" / "epochs" / "epoch-0001.csv").read_bytes()
    assert (steps / "agg" / "density.csv").read_bytes() == expected


def test_rerun_replaces_earlier_artifacts(tmp_path):
    run_pipeline(_config(tmp_path, interval_epochs=[2]))
    result = run_pipeline(_config(tmp_path, interval_epochs=[4]))
    out = result.output
    assert not any("length-002" in name for name in result.manifest["artifacts"])
    assert not (out / "densities" / "intervals" / "length-002").exists()
    assert (out / "densities" / "intervals" / "length-004" / "interval-001.csv").is_file()
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert on_disk - {"manifest.json"} == set(result.manifest["artifacts"])


def test_foreign_output_directory_is_refused(tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "notes.txt").write_text("keep me\n")
    with pytest.raises(ConfigError, match="no manifest.json") as info:
        run_pipeline(_config(tmp_path))
    assert info.value.stage == "output"
    assert (tmp_path / "run" / "notes.txt").read_text() == "keep me\n"


def test_manifest_paths_outside_output_are_refused(tmp_path):
    (tmp_path / "victim.txt").write_text("keep me\n")
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "manifest.json").write_text(json.dumps({"artifacts": {"../victim.txt": "0" * 64}}))
    with pytest.raises(ConfigError, match="outside the output directory"):
        run_pipeline(_config(tmp_path))
    assert (tmp_path / "victim.txt").read_text() == "keep me\n"


@pytest.mark.slow
def test_interval_tails_exceed_epoch_tails(tmp_path):
    """K = 50, 50 epochs of fluctuating Wishart correlations (N = 60) around one average."""
    config = _config(
        tmp_path,
        synthetic={"k": 50, "epochs": 50, "t_ep": 100, "ensemble": "gaussian", "N": 60.0, "L": None},
        interval_epochs=[25, 50],
        families=["AG"],
        binning={"bins": 101},
    )
    result = run_pipeline(config)
    report = json.loads((result.output / "reports" / "overlay-length-050-interval-001.json").read_text())
    assert report["summary"]["epochs"] == 50
    assert report["summary"]["x=8"]["interval_exceeds_fraction"] >= 0.9

    means = result.interval_average_table.set_index("length")["AG_N"]
    assert len(result.interval_table.query("length == 25")) == 2
    assert means[50] < means[25]


def test_daily_panel_without_epoch_columns_warns(tmp_path, caplog):
    rng = np.random.default_rng(5)
    dates = pd.bdate_range("2014-01-02", periods=61)
    prices = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal((61, 4)), axis=0))
    rows = [(d.date().isoformat(), t, prices[i, j]) for i, d in enumerate(dates) for j, t in enumerate("ABCD")]
    daily = tmp_path / "daily.csv"
    pd.DataFrame(rows, columns=["date", "ticker", "adj_close"]).to_csv(daily, index=False)

    with caplog.at_level("WARNING", logger="multiret.pipeline"):
        result = run_pipeline(
            _config(tmp_path, source="daily", daily=str(daily), interval_epochs=[1], binning={"bins": 21})
        )
    assert "forms a single epoch of 60 returns" in caplog.text
    assert list(result.epoch_table["epoch"]) == [1]

    caplog.clear()
    with caplog.at_level("WARNING", logger="multiret.pipeline"):
        split = dict(source="daily", daily=str(daily), epoch_columns=30, interval_epochs=[2], binning={"bins": 21})
        run_pipeline(_config(tmp_path, name="split", **split))
    assert "single epoch" not in caplog.text
