import json
import shutil
import subprocess
import sys

import pandas as pd
import pytest

from dmacast import cli, pipeline

TINY = [
    "data.synthetic.weeks=40",
    "split.test_weeks=4",
    "profiles.window_weeks=8",
    "encoder.max_epochs=2",
    "encoder.blocks=3",
    "encoder.hidden_dim=16",
    "wavelet.n_windows=8",
    "forecast.models=[cross_attention, wavelet_cnn, seasonal_naive]",
    "forecast.max_epochs=1",
    "forecast.train_stride=48",
]


def _args(run_dir, *extra):
    out = []
    for item in TINY:
        out += ["--set", item]
    return ["--run-dir", str(run_dir), *out, *extra]


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    assert cli.main(["run", *_args(run_dir)]) == 0
    return run_dir


def test_full_pipeline_writes_comparison(full_run):
    table = pd.read_csv(full_run / "comparison.csv", index_col=0)
    assert set(table.index) == {"cross_attention", "wavelet_cnn", "seasonal_naive"}
    assert table.loc["wavelet_cnn", "mape_gain_pts"] == 0.0
    assert (table["mape_pct"] > 0).all()
    for rel in ("config.yaml", "manifest.json", "repr/encoder.pt", "repr/embeddings.csv",
                "clusters/clusters.csv", "clusters/summary.json", "models/cross_attention.pt",
                "forecasts/cross_attention.csv", "figures/cluster_demand.png"):
        assert (full_run / rel).exists(), rel


def test_reports_embed_hash_seed_and_exclusions(full_run):
    manifest = json.loads((full_run / "manifest.json").read_text())
    report = json.loads((full_run / "reports" / "cross_attention.json").read_text())
    assert report["config_hash"] == manifest["config_hash"]
    assert report["seed"] == 0 and "excluded_hours" in report
    assert report["n_parameters"] > 0


def test_reports_match_csv_recomputation(full_run):
    from dmacast.evaluation import metric_report, read_forecast_csv
    for name in ("cross_attention", "seasonal_naive"):
        report = json.loads((full_run / "reports" / f"{name}.json").read_text())
        again = metric_report(name, read_forecast_csv(full_run / "forecasts" / f"{name}.csv"))
        assert again.mape == pytest.approx(report["mape_pct"], abs=1e-6)
        assert again.mae_lh == pytest.approx(report["mae_lh"], abs=1e-6)


def test_partition_recorded(full_run):
    summary = json.loads((full_run / "clusters" / "summary.json").read_text())
    assert summary["partition_max_abs_error"] <= 1e-9 * 100


def test_rerun_is_byte_identical(full_run, tmp_path):
    other = tmp_path / "again"
    assert cli.main(["run", "--no-plots", *_args(other)]) == 0
    for rel in ("comparison.csv", "comparison.txt", "reports/cross_attention.json",
                "forecasts/wavelet_cnn.csv", "clusters/clusters.csv"):
        assert (other / rel).read_bytes() == (full_run / rel).read_bytes(), rel


def test_evaluate_without_model_names_missing_artifact(full_run, tmp_path, capsys):
    code = cli.main(["evaluate", *_args(tmp_path / "empty"), "--models", "cross_attention"])
    assert code == cli.EXIT_MISSING
    assert "missing artifact" in capsys.readouterr().err
    run_dir = tmp_path / "partial"
    shutil.copytree(full_run, run_dir)
    (run_dir / "models" / "cross_attention.pt").unlink()
    assert cli.main(["evaluate", *_args(run_dir), "--models", "cross_attention"]) == cli.EXIT_MISSING
    err = capsys.readouterr().err
    assert "cross_attention.pt" in err and "train-forecast" in err


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    assert cli.main(["ingest", "--run-dir", str(tmp_path), "--set", "bogus.key=1"]) == cli.EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err


def test_unknown_subcommand_exits_nonzero():
    proc = subprocess.run([sys.executable, "-m", "dmacast", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode != 0 and "invalid choice" in proc.stderr


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("name: demo\nforecast:\n  max_epochs: 7\n")
    cfg = pipeline.load_config(path, ["forecast.lr=0.01"])
    assert cfg["name"] == "demo" and cfg["forecast"]["max_epochs"] == 7 and cfg["forecast"]["lr"] == 0.01
    assert pipeline.config_hash(cfg) != pipeline.config_hash(pipeline.load_config(path))
    cfg["output"]["root"] = "elsewhere"
    assert pipeline.config_hash(cfg) == pipeline.config_hash(pipeline.load_config(path, ["forecast.lr=0.01"]))
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(tmp_path / "missing.yaml")


def test_bundled_config_loads():
    cfg = pipeline.load_config(pipeline.bundled_config_path())
    assert cfg["data"]["source"] == "synthetic"
