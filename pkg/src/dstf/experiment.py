"""End-to-end run: windows, split, scaler, model, training, test metrics and the HA baseline."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import SplitSpec, TrafficDataset, compute_time_features, fit_scaler, make_windows, split_windows
from .evaluation import MetricReport, evaluate, historical_average
from .model import DecoupledSTGNN, ModelConfig
from .training import ModelPredictor, TrainConfig, Trainer, TrainState, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

# ablation variant -> (section, {key: value}) flips
ABLATIONS = {
    "switch": ("model", {"block_order": "inherent-first"}),
    "w/o-gate": ("model", {"use_gate": False}),
    "w/o-res": ("model", {"use_residual": False}),
    "w/o-decouple": ("model", {"use_gate": False, "use_residual": False}),
    "w/o-dg": ("model", {"use_dynamic_graph": False}),
    "w/o-apt": ("model", {"use_adaptive": False}),
    "w/o-gru": ("model", {"use_gru": False}),
    "w/o-msa": ("model", {"use_attention": False}),
    "w/o-ar": ("model", {"autoregressive": False}),
    "w/o-cl": ("train", {"use_curriculum": False}),
}


@dataclass
class DataConfig:
    history: int = 12
    horizon: int = 12
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    target_channels: tuple[int, ...] = (0,)
    adjacency: str | None = None

    def __post_init__(self):
        self.split = tuple(self.split)
        self.target_channels = tuple(self.target_channels)
        SplitSpec(*self.split)


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides, minus data-derived keys
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        d = {"model": dict(self.model), "train": self.train.to_dict(), "data": asdict(self.data)}
        d["data"]["split"] = list(self.data.split)
        d["data"]["target_channels"] = list(self.data.target_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> ExperimentConfig:
        d = dict(d or {})
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model") or {})
        known = {f.name for f in fields(ModelConfig)}
        bad = set(model) - known
        if bad:
            raise ValueError(f"unknown model config keys: {sorted(bad)}")
        data_keys = {f.name for f in fields(DataConfig)}
        data = dict(d.get("data") or {})
        if set(data) - data_keys:
            raise ValueError(f"unknown data config keys: {sorted(set(data) - data_keys)}")
        return cls(model, TrainConfig.from_dict(dict(d.get("train") or {})), DataConfig(**data))

    def model_config(self, ds: TrafficDataset) -> ModelConfig:
        from .data import steps_per_day

        derived = {
            "num_nodes": ds.num_nodes,
            "steps_per_day": steps_per_day(ds.interval_minutes),
            "in_channels": ds.num_channels,
            "out_channels": len(self.data.target_channels),
            "history": self.data.history,
            "horizon": self.data.horizon,
        }
        return ModelConfig(**{**self.model, **derived})


def ablate(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """A copy of ``cfg`` with exactly the flags of ``variant`` flipped; ``cfg`` is left untouched."""
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {sorted(ABLATIONS)}")
    section, flips = ABLATIONS[variant]
    d = cfg.to_dict()
    d[section].update(flips)
    return ExperimentConfig.from_dict(d)


def desk_scale_subset(ds: TrafficDataset, adjacency, num_nodes: int = 50, weeks: int = 4, seed_node: int = 0):
    """Connected ``num_nodes``-sensor subgraph over the first ``weeks`` weeks of ``ds``."""
    from .data import steps_per_day
    from .graph import connected_subgraph

    nodes = connected_subgraph(adjacency, num_nodes, seed_node)
    stop = weeks * 7 * steps_per_day(ds.interval_minutes)
    if ds.num_steps < stop:
        raise ValueError(f"dataset holds {ds.num_steps} steps, fewer than {weeks} weeks")
    return ds.subset(nodes, 0, stop), np.asarray(adjacency)[np.ix_(nodes, nodes)]


def desk_scale_config(**train_overrides) -> ExperimentConfig:
    """Default model with a CPU-sized budget: 6 epochs, the horizon grows every 50 steps."""
    train = {"max_epochs": 6, "patience": 6, "cl_growth_steps": 50, **train_overrides}
    return ExperimentConfig(model={}, train=TrainConfig(**train))


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return ExperimentConfig.from_dict(yaml.safe_load(f))


def dataset_checksum(ds: TrafficDataset, adjacency=None) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.readings, dtype=np.float64).tobytes())
    h.update(np.asarray(ds.timestamps.asi8).tobytes())
    if adjacency is not None:
        h.update(np.ascontiguousarray(adjacency, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class RunResult:
    model: DecoupledSTGNN
    state: TrainState
    val: MetricReport | None
    test: MetricReport
    baseline: MetricReport | None
    predictions: np.ndarray


def prepare(ds: TrafficDataset, cfg: ExperimentConfig):
    features = compute_time_features(ds)
    windows = make_windows(ds, cfg.data.history, cfg.data.horizon, features)
    windows.target_channels = cfg.data.target_channels
    train, val, test = split_windows(windows, SplitSpec(*cfg.data.split))
    return features, train, val, test


def build_model(ds: TrafficDataset, adjacency, cfg: ExperimentConfig, scaler=None, dtype=torch.float32) -> DecoupledSTGNN:
    seed_everything(cfg.train.seed)
    model = DecoupledSTGNN(cfg.model_config(ds), adjacency)
    if scaler is not None:
        model.set_scaler(scaler, cfg.data.target_channels)
    return model.to(dtype)


def run_experiment(ds: TrafficDataset, adjacency, cfg: ExperimentConfig, out_dir=None, with_baseline: bool = True) -> RunResult:
    """Train on the chronological split, restore the best epoch, and score the test split."""
    features, train, val, test = prepare(ds, cfg)
    scaler = fit_scaler(train)
    model = build_model(ds, adjacency, cfg, scaler)
    trainer = Trainer(model, cfg.train, train, val, out_dir)
    state = trainer.fit()
    model = trainer.restore_best()
    val_report = trainer.validate() if len(val) else None
    test_report, preds = evaluate(ModelPredictor(model), test, cfg.train.mask_zeros, cfg.train.eval_batch_size)
    baseline = None
    if with_baseline:
        history_stop = int(val.anchors.max()) + 1
        try:
            baseline, _ = historical_average(ds.readings, features, history_stop, test, cfg.train.mask_zeros)
        except ValueError as exc:
            log.warning("skipping Historical Average: %s", exc)
    if out_dir is not None:
        extra = {"scaler": scaler.to_dict(), "seed": cfg.train.seed, "experiment": cfg.to_dict()}
        save_checkpoint(Path(out_dir) / "best.pt", model, cfg.train, state, extra=extra)
    return RunResult(model, state, val_report, test_report, baseline, preds)
