"""Config handling, run directories and the stages of the two-stage pipeline.

Every stage reads its inputs from, and writes its outputs to, a run
directory named after the hash of the resolved configuration, so stages can
be run one at a time from the command line or all at once with ``run``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import pickle
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import synth
from .baselines import ArimaForecaster, LSTMForecaster, SeasonalNaiveForecaster, WaveletCNNForecaster
from .clustering import ClusterResult, cluster_demands, select_k
from .data import (DemandSeries, DmaDataset, HolidayCalendar, WeatherSeries, aggregate_dma, align_meters,
                   chronological_split, demand_frame, load_holidays, load_meter_csv,
                   load_weather_csv, prepare_meters, write_demand_csv, write_holidays,
                   write_meter_csv, write_weather_csv)
from .evaluation import (compare_models, format_table, metric_report, read_forecast_csv,
                         rolling_evaluate, write_forecast_csv, write_report_json)
from .forecaster import CrossAttentionForecaster, frame_split
from .profiles import ProfileSampler
from .repr_learning import ContrastiveEmbedder, embed_all, load_encoder, save_encoder
from .wavelets import DEFAULT_CANDIDATES, select_wavelet, wavelet_scores

logger = logging.getLogger(__name__)

MODELS = {
    "cross_attention": CrossAttentionForecaster,
    "wavelet_cnn": WaveletCNNForecaster,
    "lstm": LSTMForecaster,
    "arima": ArimaForecaster,
    "seasonal_naive": SeasonalNaiveForecaster,
}
NEURAL = {"cross_attention", "wavelet_cnn", "lstm"}
WAVELET_MODELS = {"cross_attention", "wavelet_cnn"}

DEFAULT_CONFIG = {
    "name": "dma",
    "seed": 0,
    "deterministic": True,
    "data": {
        "source": "synthetic",            # synthetic | csv
        "synthetic": {"dma": "bundled", "weeks": 80, "seed": 0, "specs": None},
        "meters_csv": None,
        "weather_csv": None,
        "holidays": None,
        "gap_policy": "interpolate_short",
        "max_gap_hours": 6,
        "utc_offset_hours": 0,
    },
    "split": {"test_weeks": 26, "val_fraction": 0.10},
    "profiles": {"window_weeks": 12, "stride_weeks": 4, "span": "pre_test"},
    "encoder": {"hidden_dim": 64, "output_dim": 16, "kernel_size": 3, "blocks": 10, "alpha": 0.5,
                "batch_size": 64, "max_epochs": 15, "lr": 1e-3, "patience": 10, "min_delta": 1e-4,
                "mask_prob": 0.5},
    "clustering": {"k_max": 4, "restarts": 10, "max_iter": 300},
    "wavelet": {"name": "auto", "candidates": list(DEFAULT_CANDIDATES), "criterion": "min",
                "n_windows": 64},
    "forecast": {
        "models": ["cross_attention", "wavelet_cnn", "lstm", "arima", "seasonal_naive"],
        "lr": 1e-3, "batch_size": 256, "max_epochs": 100, "patience": 15, "train_stride": 3,
        "arima": {"order": "auto", "max_train_hours": 2016},
        "lstm": {"hidden": 64},
    },
    "evaluation": {"stride": 24, "hour": 0, "pooling": "hours", "baseline": "wavelet_cnn"},
    "output": {"root": "runs"},
}


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path} (run the '{producer}' step first)")
        self.path = path
        self.producer = producer


# --------------------------------------------------------------------------- config


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def bundled_config_path(name: str = "synthetic") -> Path:
    return Path(str(resources.files("dmacast") / "configs" / f"{name}.yaml"))


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML/JSON file, then ``key.sub=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = {}
        cursor = node
        parts = key.strip().split(".")
        for p in parts[:-1]:
            cursor[p] = {}
            cursor = cursor[p]
        cursor[parts[-1]] = yaml.safe_load(value)
        cfg = _merge(cfg, node)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    data = cfg["data"]
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError("data.source must be 'synthetic' or 'csv'")
    if data["source"] == "csv" and not (data["meters_csv"] and data["weather_csv"]):
        raise ConfigError("data.source=csv needs data.meters_csv and data.weather_csv")
    if data["source"] == "synthetic" and data["synthetic"]["dma"] not in ("bundled", "control", "custom"):
        raise ConfigError("data.synthetic.dma must be bundled, control or custom")
    unknown = [m for m in cfg["forecast"]["models"] if m not in MODELS]
    if unknown:
        raise ConfigError(f"unknown forecast models {unknown}; choose from {sorted(MODELS)}")
    if cfg["evaluation"]["pooling"] not in ("hours", "days"):
        raise ConfigError("evaluation.pooling must be 'hours' or 'days'")
    if cfg["profiles"]["span"] not in ("pre_test", "all"):
        raise ConfigError("profiles.span must be 'pre_test' or 'all'")


def config_hash(cfg: dict) -> str:
    """Hash of everything except where the outputs go."""
    core = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------- run directory


class Run:
    """Paths and artifact I/O for one resolved configuration."""

    def __init__(self, cfg: dict, run_dir=None):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        root = Path(cfg["output"]["root"])
        self.dir = Path(run_dir) if run_dir is not None else root / f"{cfg['name']}-{self.hash}"

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def require(self, rel: str, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifactError(p, producer)
        return p

    def init(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.yaml").write_text(yaml.safe_dump(self.cfg, sort_keys=True))

    def record(self, stage: str, outputs) -> None:
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {
            "config_hash": self.hash, "seed": self.cfg["seed"], "stages": {}}
        manifest["stages"][stage] = sorted(str(Path(o).relative_to(self.dir)) for o in outputs)
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- stages


def synth_generate(run: Run) -> list[Path]:
    scfg = run.cfg["data"]["synthetic"]
    if scfg["dma"] == "custom":
        if not scfg["specs"]:
            raise ConfigError("data.synthetic.dma=custom needs data.synthetic.specs")
        dma = synth.generate_dma(scfg["specs"], scfg["weeks"], scfg["seed"])
    else:
        builder = synth.bundled_dma if scfg["dma"] == "bundled" else synth.control_dma
        dma = builder(scfg["seed"], scfg["weeks"])
    out = run.path("raw")
    out.mkdir(parents=True, exist_ok=True)
    ds = dma.dataset
    write_meter_csv(out / "meters.csv", ds.meters)
    write_weather_csv(out / "weather.csv", ds.weather)
    write_holidays(out / "holidays.txt", ds.holidays)
    synth.write_labels_csv(out / "labels.csv", dma.labels)
    paths = [out / f for f in ("meters.csv", "weather.csv", "holidays.txt", "labels.csv")]
    run.record("synth-generate", paths)
    return paths


def _raw_paths(run: Run):
    d = run.cfg["data"]
    if d["source"] == "csv":
        return Path(d["meters_csv"]), Path(d["weather_csv"]), d["holidays"] and Path(d["holidays"])
    return (run.require("raw/meters.csv", "synth-generate"), run.require("raw/weather.csv", "synth-generate"),
            run.require("raw/holidays.txt", "synth-generate"))


def ingest(run: Run) -> list[Path]:
    d = run.cfg["data"]
    meters_csv, weather_csv, holidays_path = _raw_paths(run)
    for p in (meters_csv, weather_csv):
        if not p.exists():
            raise MissingArtifactError(p, "synth-generate")
    raw = align_meters(load_meter_csv(meters_csv))
    weather = load_weather_csv(weather_csv)
    holidays = load_holidays(holidays_path) if holidays_path else HolidayCalendar()
    clean, for_total = prepare_meters(raw, d["gap_policy"], d["max_gap_hours"])
    if not clean:
        raise ValueError("every meter was rejected by the gap policy")
    start = clean[0].start
    n = len(clean[0])
    offset = int((start - weather.start) / pd.Timedelta(hours=1))
    if offset < 0 or offset + n > len(weather):
        raise ValueError("weather does not cover the meter period")
    weather = WeatherSeries(start, weather.temperature_max[offset:offset + n],
                            weather.humidity[offset:offset + n])
    split = chronological_split(n, run.cfg["split"]["test_weeks"], run.cfg["split"]["val_fraction"])
    out = run.path("dataset")
    out.mkdir(parents=True, exist_ok=True)
    write_meter_csv(out / "meters.csv", clean)
    write_weather_csv(out / "weather.csv", weather)
    write_holidays(out / "holidays.txt", holidays)
    write_demand_csv(out / "total_demand.csv", [aggregate_dma(for_total, skipna=True)])
    meta = {"train": [split.train.start, split.train.stop], "val": [split.val.start, split.val.stop],
            "test": [split.test.start, split.test.stop], "n_meters": len(clean),
            "dropped_meters": sorted({m.meter_id for m in raw} - {m.meter_id for m in clean}),
            "utc_offset_hours": d["utc_offset_hours"]}
    (out / "split.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths = [out / f for f in ("meters.csv", "weather.csv", "holidays.txt", "total_demand.csv", "split.json")]
    run.record("ingest", paths)
    return paths


def load_dataset(run: Run) -> tuple[DmaDataset, DemandSeries]:
    meta = json.loads(run.require("dataset/split.json", "ingest").read_text())
    meters = load_meter_csv(run.require("dataset/meters.csv", "ingest"))
    weather = load_weather_csv(run.require("dataset/weather.csv", "ingest"))
    holidays = load_holidays(run.require("dataset/holidays.txt", "ingest"))
    total_m = load_meter_csv(run.require("dataset/total_demand.csv", "ingest"))[0]
    start = meters[0].start
    hour = pd.Timedelta(hours=1)
    split = tuple(start + hour * meta[k][1] for k in ("train", "val", "test"))
    ds = DmaDataset(tuple(meters), weather, holidays, split, meta["utc_offset_hours"])
    return ds, DemandSeries(total_m.meter_id, total_m.start, total_m.values)


def _profile_span(run: Run, ds: DmaDataset):
    if run.cfg["profiles"]["span"] == "all":
        return None
    return (0, ds.split_ranges().val.stop)


def _sampler(run: Run, ds: DmaDataset) -> ProfileSampler:
    p = run.cfg["profiles"]
    return ProfileSampler(_profile_span(run, ds), p["window_weeks"], p["stride_weeks"], ds.utc_offset_hours)


def train_repr(run: Run) -> list[Path]:
    ds, _ = load_dataset(run)
    X = _sampler(run, ds).fit_transform(list(ds.meters))
    emb = ContrastiveEmbedder(**run.cfg["encoder"], random_state=run.cfg["seed"],
                              deterministic=run.cfg["deterministic"]).fit(X)
    out = run.path("repr")
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(out / "encoder.pt", emb.encoder_, {"config_hash": run.hash, "seed": run.cfg["seed"]})
    pd.DataFrame({"epoch": np.arange(len(emb.loss_history_)), "loss": emb.loss_history_}).to_csv(
        out / "loss_history.csv", index=False, float_format="%.8g")
    paths = [out / "encoder.pt", out / "loss_history.csv"]
    run.record("train-repr", paths)
    return paths


def embed(run: Run) -> list[Path]:
    ds, _ = load_dataset(run)
    encoder = load_encoder(run.require("repr/encoder.pt", "train-repr"))
    X = _sampler(run, ds).fit_transform(list(ds.meters))
    E = embed_all(X, encoder)
    df = pd.DataFrame(E, columns=[f"e{i}" for i in range(E.shape[1])])
    df.insert(0, "meter_id", ds.meter_ids)
    path = run.path("repr", "embeddings.csv")
    df.to_csv(path, index=False, float_format="%.8g")
    run.record("embed", [path])
    return [path]


def cluster(run: Run) -> list[Path]:
    ds, total = load_dataset(run)
    emb = pd.read_csv(run.require("repr/embeddings.csv", "embed"))
    c = run.cfg["clustering"]
    res = select_k(emb.drop(columns="meter_id").to_numpy(float), c["k_max"], run.cfg["seed"],
                   c["restarts"], c["max_iter"]).with_ids(emb.meter_id.astype(str))
    out = run.path("clusters")
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"meter_id": list(res.meter_ids), "cluster": res.labels}).to_csv(
        out / "clusters.csv", index=False)
    demands = cluster_demands(res, ds.meters)
    write_demand_csv(out / "cluster_demand.csv", demands)
    check = np.sum([d.values for d in demands], axis=0)
    summary = {"k": res.k, "silhouette": round(res.silhouette, 8),
               "scores": {str(k): round(v, 8) for k, v in res.scores.items()},
               "sizes": np.bincount(res.labels, minlength=res.k).tolist(),
               "partition_max_abs_error": float(np.max(np.abs(check - total.values))),
               "config_hash": run.hash, "seed": run.cfg["seed"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths = [out / "clusters.csv", out / "cluster_demand.csv", out / "summary.json"]
    run.record("cluster", paths)
    return paths


def load_clusters(run: Run, ds: DmaDataset) -> ClusterResult:
    df = pd.read_csv(run.require("clusters/clusters.csv", "cluster"), dtype={"meter_id": str})
    labels = df.cluster.to_numpy(int)
    k = int(labels.max()) + 1
    return ClusterResult(k, labels, np.zeros((k, 0)), float("nan"), run.cfg["seed"],
                         meter_ids=tuple(df.meter_id))


def build_frame(run: Run) -> pd.DataFrame:
    ds, total = load_dataset(run)
    demands = cluster_demands(load_clusters(run, ds), ds.meters)
    return demand_frame(ds, demands, total)


def choose_wavelet(run: Run, frame: pd.DataFrame) -> tuple[str, dict]:
    w = run.cfg["wavelet"]
    if w["name"] != "auto":
        return w["name"], {}
    train, _, _ = frame_split(frame)
    x = frame["total"].to_numpy(float)[train.start:train.stop]
    n_days = len(x) // 24
    picks = np.linspace(0, n_days - 1, min(w["n_windows"], n_days)).astype(int)
    windows = [x[d * 24:(d + 1) * 24] for d in picks]
    name = select_wavelet(w["candidates"], windows, w["criterion"])
    return name, wavelet_scores(w["candidates"], windows)


def make_model(run: Run, name: str, wavelet: str):
    f = run.cfg["forecast"]
    seed, det = run.cfg["seed"], run.cfg["deterministic"]
    common = dict(lr=f["lr"], batch_size=f["batch_size"], max_epochs=f["max_epochs"], patience=f["patience"],
                  train_stride=f["train_stride"], val_fraction=run.cfg["split"]["val_fraction"],
                  random_state=seed, deterministic=det)
    if name in WAVELET_MODELS:
        return MODELS[name](wavelet=wavelet, **common)
    if name == "lstm":
        return LSTMForecaster(hidden=f["lstm"]["hidden"], **common)
    if name == "arima":
        return ArimaForecaster(**f["arima"])
    return SeasonalNaiveForecaster()


def _model_path(run: Run, name: str) -> Path:
    return run.path("models", f"{name}.pt" if name in NEURAL else f"{name}.pkl")


def train_forecast(run: Run, models=None) -> list[Path]:
    frame = build_frame(run)
    wavelet, scores = choose_wavelet(run, frame)
    out = run.path("models")
    out.mkdir(parents=True, exist_ok=True)
    (out / "wavelet.json").write_text(json.dumps(
        {"wavelet": wavelet, "scores": {k: round(v, 10) for k, v in scores.items()}}, indent=2,
        sort_keys=True) + "\n")
    paths = [out / "wavelet.json"]
    counts = {}
    for name in models or run.cfg["forecast"]["models"]:
        logger.info("training %s", name)
        model = make_model(run, name, wavelet).fit(frame)
        path = _model_path(run, name)
        if name in NEURAL:
            model.save(path)
        else:
            path.write_bytes(pickle.dumps(model))
        counts[name] = int(getattr(model, "n_parameters_", 0))
        paths.append(path)
    (out / "parameters.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    paths.append(out / "parameters.json")
    run.record("train-forecast", paths)
    return paths


def load_model(run: Run, name: str):
    path = run.require(str(_model_path(run, name).relative_to(run.dir)), "train-forecast")
    if name in NEURAL:
        return MODELS[name].load(path)
    return pickle.loads(path.read_bytes())


def evaluate(run: Run, models=None) -> list[Path]:
    frame = build_frame(run)
    e = run.cfg["evaluation"]
    params_path = run.path("models", "parameters.json")
    params = json.loads(params_path.read_text()) if params_path.exists() else {}
    (run.path("forecasts")).mkdir(parents=True, exist_ok=True)
    (run.path("reports")).mkdir(parents=True, exist_ok=True)
    paths = []
    for name in models or run.cfg["forecast"]["models"]:
        model = load_model(run, name)
        meta = {"config_hash": run.hash, "seed": run.cfg["seed"], "n_parameters": params.get(name)}
        report = rolling_evaluate(model, frame, e["stride"], e["hour"], e["pooling"], name, meta)
        fpath = run.path("forecasts", f"{name}.csv")
        rpath = run.path("reports", f"{name}.json")
        write_forecast_csv(fpath, report)
        write_report_json(rpath, report)
        paths += [fpath, rpath]
    run.record("evaluate", paths)
    return paths


def load_reports(run: Run, models=None):
    out = []
    for name in models or run.cfg["forecast"]["models"]:
        fpath = run.require(f"forecasts/{name}.csv", "evaluate")
        out.append(metric_report(name, read_forecast_csv(fpath), run.cfg["evaluation"]["pooling"]))
    return out


def compare(run: Run) -> list[Path]:
    table = compare_models(load_reports(run), run.cfg["evaluation"]["baseline"])
    params_path = run.path("models", "parameters.json")
    if params_path.exists():
        params = json.loads(params_path.read_text())
        table["n_parameters"] = [params.get(m, 0) for m in table.index]
    csv_path, txt_path = run.path("comparison.csv"), run.path("comparison.txt")
    table.to_csv(csv_path, float_format="%.6f")
    txt_path.write_text(format_table(table) + "\n")
    run.record("compare", [csv_path, txt_path])
    return [csv_path, txt_path]


def plot(run: Run, days: int = 14) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame = build_frame(run)
    out = run.path("figures")
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    clusters = [c for c in frame.columns if c.startswith("cluster_")]
    fig, axes = plt.subplots(len(clusters), 1, figsize=(10, 2.2 * len(clusters)), sharex=True, squeeze=False)
    span = frame.iloc[-4 * 168:]
    for ax, col in zip(axes[:, 0], clusters):
        ax.plot(span.index, span[col], lw=0.8)
        ax.set_ylabel(f"{col} [m³/h]")
    axes[-1, 0].set_xlabel("time (UTC)")
    fig.tight_layout()
    fig.savefig(out / "cluster_demand.png", dpi=100)
    plt.close(fig)
    paths.append(out / "cluster_demand.png")

    for name in run.cfg["forecast"]["models"]:
        fpath = run.require(f"forecasts/{name}.csv", "evaluate")
        recs = read_forecast_csv(fpath)[:days]
        t = np.concatenate([pd.date_range(r.origin, periods=len(r.forecast), freq="h") for r in recs])
        fig, ax = plt.subplots(figsize=(10, 3))
        ax.plot(t, np.concatenate([r.actual for r in recs]), lw=0.9, label="actual")
        ax.plot(t, np.concatenate([r.forecast for r in recs]), lw=0.9, label=name)
        ax.set_ylabel("DMA demand [m³/h]")
        ax.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(out / f"forecast_{name}.png", dpi=100)
        plt.close(fig)
        paths.append(out / f"forecast_{name}.png")
    run.record("plot", paths)
    return paths


STAGES = {
    "synth-generate": synth_generate,
    "ingest": ingest,
    "train-repr": train_repr,
    "embed": embed,
    "cluster": cluster,
    "train-forecast": train_forecast,
    "evaluate": evaluate,
    "compare": compare,
    "plot": plot,
}


def run_all(run: Run, with_plots: bool = True) -> list[Path]:
    paths = []
    for stage, fn in STAGES.items():
        if stage == "synth-generate" and run.cfg["data"]["source"] != "synthetic":
            continue
        if stage == "plot" and not with_plots:
            continue
        logger.info("stage %s", stage)
        paths += fn(run)
    return paths
