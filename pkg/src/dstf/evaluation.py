"""Per-horizon masked MAE / RMSE / MAPE, the Historical Average baseline, and batched evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DAYS_PER_WEEK, TimeFeatures, Windows

HIGHLIGHT_HORIZONS = (3, 6, 12)


@dataclass
class HorizonMetrics:
    horizon: int
    mae: float
    rmse: float
    mape: float  # percent
    n_samples: int


@dataclass
class MetricReport:
    horizons: list[HorizonMetrics]
    overall: HorizonMetrics | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.horizons)

    def at(self, horizon: int) -> HorizonMetrics:
        return self.horizons[horizon - 1]

    def highlighted(self):
        return [self.at(h) for h in HIGHLIGHT_HORIZONS if h <= len(self.horizons)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["horizon", "mae", "rmse", "mape_pct", "n_samples"])
            for m in self.horizons:
                writer.writerow([m.horizon, f"{m.mae:.6f}", f"{m.rmse:.6f}", f"{m.mape:.6f}", m.n_samples])
        return path

    def table(self, title: str = "model") -> str:
        """Text table with the 15 / 30 / 60 minute horizons side by side."""
        cols = self.highlighted()
        head = f"{'Method':<14}" + "".join(f"| Horizon {m.horizon:<2} MAE    RMSE   MAPE  " for m in cols)
        row = f"{title:<14}" + "".join(f"| {m.mae:>10.2f} {m.rmse:>7.2f} {m.mape:>6.2f}% " for m in cols)
        lines = [head, row, "", "horizon    mae     rmse    mape%   n"]
        lines += [f"{m.horizon:>7} {m.mae:>8.4f} {m.rmse:>8.4f} {m.mape:>7.3f} {m.n_samples:>8}" for m in self.horizons]
        return "\n".join(lines)


def _errors(y_hat, y, mask_zeros: bool):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    mask = y != 0 if mask_zeros else np.ones(y.shape, dtype=bool)
    if not mask_zeros and (y == 0).any():
        raise ValueError("targets contain zeros, so MAPE is undefined; enable zero masking")
    return y_hat - y, y, mask


def _summarise(diff, y, mask, horizon) -> HorizonMetrics:
    n = int(mask.sum())
    if n == 0:
        return HorizonMetrics(horizon, float("nan"), float("nan"), float("nan"), 0)
    d = diff[mask]
    return HorizonMetrics(
        horizon,
        float(np.abs(d).mean()),
        float(np.sqrt(np.square(d).mean())),
        float((np.abs(d) / np.abs(y[mask])).mean() * 100.0),
        n,
    )


def metrics(y_hat, y, mask_zeros: bool = True) -> MetricReport:
    """Metrics per horizon for arrays shaped (W, T_f, N, C) (or (T_f, N, C))."""
    diff, y, mask = _errors(y_hat, y, mask_zeros)
    if diff.ndim == 3:
        diff, y, mask = diff[None], y[None], mask[None]
    rows = [_summarise(diff[:, h], y[:, h], mask[:, h], h + 1) for h in range(diff.shape[1])]
    return MetricReport(rows, _summarise(diff, y, mask, 0))


def masked_mae(y_hat, y, mask_zeros: bool = True) -> float:
    """Pooled MAE over every unmasked cell; 0 when nothing is left."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = y != 0 if mask_zeros else np.ones(y.shape, dtype=bool)
    return float(np.abs(y_hat - y)[mask].mean()) if mask.any() else 0.0


# ---------------------------------------------------------------------------
# Historical Average


class HistoricalAverage:
    """Mean reading per (node, channel, time-of-day, day-of-week) weekly slot.

    Slots never observed fall back to the node's overall mean.
    """

    def __init__(self, steps_per_day: int, mask_zeros: bool = True, target_channels=(0,)):
        self.steps_per_day = steps_per_day
        self.mask_zeros = mask_zeros
        self.target_channels = list(target_channels)
        self.table = None
        self.node_mean = None

    def slot(self, tod, dow):
        return np.asarray(dow) * self.steps_per_day + np.asarray(tod)

    def fit(self, readings, features: TimeFeatures, stop: int | None = None) -> HistoricalAverage:
        readings = np.asarray(readings[:stop], dtype=np.float64)
        slots = self.slot(features.tod_index[:stop], features.dow_index[:stop])
        n_slots = self.steps_per_day * DAYS_PER_WEEK
        valid = readings != 0 if self.mask_zeros else np.ones(readings.shape, dtype=bool)
        sums = np.zeros((n_slots,) + readings.shape[1:])
        counts = np.zeros_like(sums)
        np.add.at(sums, slots, np.where(valid, readings, 0.0))
        np.add.at(counts, slots, valid)
        node_counts = counts.sum(axis=0)
        self.node_mean = np.divide(sums.sum(axis=0), node_counts, out=np.zeros(readings.shape[1:]), where=node_counts > 0)
        self.table = np.where(counts > 0, sums / np.maximum(counts, 1), self.node_mean[None])
        return self

    def predict_times(self, tod, dow) -> np.ndarray:
        return self.table[self.slot(tod, dow)]

    def predict(self, windows: Windows) -> np.ndarray:
        """Forecasts (W, T_f, N, C_out) for the steps following each window."""
        future = windows.anchors[:, None] + np.arange(1, windows.t_f + 1)
        tod = windows.features.tod_index[future]
        dow = windows.features.dow_index[future]
        return self.predict_times(tod, dow)[..., list(windows.target_channels)]

    def __call__(self, x, tod, dow, horizon: int):
        """Predictor interface used by :func:`evaluate`: extrapolate the slot clock of the last input step."""
        tod = np.asarray(tod)[:, -1:] + np.arange(1, horizon + 1)
        dow = np.asarray(dow)[:, -1:] + tod // self.steps_per_day
        return self.predict_times(tod % self.steps_per_day, dow % DAYS_PER_WEEK)[..., self.target_channels]


def historical_average(readings, features: TimeFeatures, history_stop: int, test_windows: Windows, mask_zeros: bool = True):
    """Fit HA on ``readings[:history_stop]`` (train + val) and score it on ``test_windows``."""
    n_d = features.steps_per_day
    if history_stop < n_d * DAYS_PER_WEEK:
        raise ValueError("Historical Average needs at least one full week of history")
    ha = HistoricalAverage(n_d, mask_zeros, test_windows.target_channels).fit(readings, features, history_stop)
    _, y, _, _ = test_windows.arrays()
    return metrics(ha.predict(test_windows), y, mask_zeros), ha


# ---------------------------------------------------------------------------
# batched evaluation


def predict_windows(predictor, windows: Windows, batch_size: int = 64, order=None) -> np.ndarray:
    """Run ``predictor(x, tod, dow, horizon)`` over all windows; returns (W, T_f, N, C_out)."""
    order = np.arange(len(windows)) if order is None else np.asarray(order)
    out = np.empty((len(windows), windows.t_f, windows.dataset.num_nodes, len(windows.target_channels)))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x, _, tod, dow = windows.arrays(idx)
        out[idx] = predictor(x, tod, dow, windows.t_f)
    return out


def evaluate(predictor, windows: Windows, mask_zeros: bool = True, batch_size: int = 64, order=None):
    """Returns ``(MetricReport, predictions)``."""
    y_hat = predict_windows(predictor, windows, batch_size, order)
    _, y, _, _ = windows.arrays()
    return metrics(y_hat, y, mask_zeros), y_hat
