"""Dataset ingestion, time features, sliding windows, splits and scaling."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

MINUTES_PER_DAY = 1440
DAYS_PER_WEEK = 7

LAYOUTS = ("metr-la", "pems", "csv", "canonical")


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class TrafficDataset:
    """Sensor readings of shape (T, N, C) with a regular timestamp index."""

    readings: np.ndarray
    timestamps: pd.DatetimeIndex
    interval_minutes: int = 5
    node_ids: tuple[str, ...] | None = None
    channels: tuple[str, ...] | None = None

    def __post_init__(self):
        readings = np.asarray(self.readings)
        if readings.ndim == 2:
            readings = readings[:, :, None]
        if readings.ndim != 3 or min(readings.shape) < 1:
            raise DataError(f"readings must be a non-empty (T, N, C) array, got shape {readings.shape}")
        object.__setattr__(self, "readings", readings)
        timestamps = pd.DatetimeIndex(self.timestamps)
        object.__setattr__(self, "timestamps", timestamps)
        if len(timestamps) != readings.shape[0]:
            raise DataError(f"{len(timestamps)} timestamps for {readings.shape[0]} time steps")
        if self.interval_minutes < 1:
            raise DataError("interval_minutes must be positive")
        if len(timestamps) > 1:
            steps = np.diff(timestamps.asi8)
            expected = self.interval_minutes * 60 * 10**9
            bad = np.flatnonzero(steps != expected)
            if bad.size:
                i = int(bad[0])
                raise DataError(
                    f"timestamp spacing broken between rows {i} and {i + 1} "
                    f"({timestamps[i]} -> {timestamps[i + 1]}, expected {self.interval_minutes} min)"
                )
        finite = np.isfinite(readings)
        if not finite.all():
            t, n, c = (int(v) for v in np.argwhere(~finite)[0])
            raise DataError(f"non-finite reading at time {t} ({timestamps[t]}), node {n}, channel {c}")

    @property
    def num_steps(self) -> int:
        return self.readings.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.readings.shape[1]

    @property
    def num_channels(self) -> int:
        return self.readings.shape[2]

    def subset(self, nodes=None, start: int = 0, stop: int | None = None) -> TrafficDataset:
        """Restrict to a node subset and/or a contiguous time range."""
        nodes = np.arange(self.num_nodes) if nodes is None else np.asarray(nodes)
        ids = None if self.node_ids is None else tuple(self.node_ids[i] for i in nodes)
        return TrafficDataset(
            self.readings[start:stop][:, nodes],
            self.timestamps[start:stop],
            self.interval_minutes,
            ids,
            self.channels,
        )


@dataclass(frozen=True)
class TimeFeatures:
    tod_index: np.ndarray
    dow_index: np.ndarray
    steps_per_day: int
    days_per_week: int = DAYS_PER_WEEK


@dataclass(frozen=True)
class SampleWindow:
    x: np.ndarray
    y: np.ndarray
    x_tod: np.ndarray
    x_dow: np.ndarray
    anchor: int


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


# Conventional splits for the four benchmark datasets.
DEFAULT_SPLITS = {
    "metr-la": SplitSpec(0.7, 0.1, 0.2),
    "pems-bay": SplitSpec(0.7, 0.1, 0.2),
    "pems04": SplitSpec(0.6, 0.2, 0.2),
    "pems08": SplitSpec(0.6, 0.2, 0.2),
}


# ---------------------------------------------------------------------------
# loading


def _read_metr_la_h5(path: Path):
    # pandas "fixed" HDF5 format: one group holding axis0 (columns), axis1 (index), block0_values
    import h5py

    with h5py.File(path, "r") as f:
        key = next(iter(f.keys()))
        group = f[key]
        values = np.asarray(group["block0_values"][...], dtype=np.float32)
        columns = [c.decode() if isinstance(c, bytes) else str(c) for c in group["axis0"][...]]
        index = pd.to_datetime(np.asarray(group["axis1"][...]))
    return values, index, tuple(columns)


def _read_wide_csv(path: Path):
    frame = pd.read_csv(path)
    time_col = frame.columns[0]
    index = pd.DatetimeIndex(pd.to_datetime(frame[time_col]))
    values = frame.drop(columns=time_col).to_numpy(dtype=np.float32)
    return values, index, tuple(str(c) for c in frame.columns[1:])


def _infer_interval(index: pd.DatetimeIndex, default: int) -> int:
    if len(index) < 2:
        return default
    return int((index[1] - index[0]).total_seconds() // 60)


def load_readings(
    path,
    layout: str | None = None,
    *,
    start: str | None = None,
    interval_minutes: int | None = None,
    channel: int | None = None,
) -> TrafficDataset:
    """Load sensor readings into a :class:`TrafficDataset`.

    Supported layouts:

    * ``canonical``: directory holding ``readings.npy``, ``timestamps.txt`` and ``meta.json``
    * ``metr-la``: a pandas-style HDF5 archive (``metr-la.h5`` / ``pems-bay.h5``)
    * ``pems``: an ``.npz`` archive whose ``data`` array is (T, N, F); the archive
      carries no timestamps, so ``start`` gives the first instant
    * ``csv``: wide CSV with a leading timestamp column and one column per node

    ``layout`` is inferred from the path when omitted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset: {path}")
    if layout is None:
        layout = {".h5": "metr-la", ".hdf5": "metr-la", ".npz": "pems", ".csv": "csv"}.get(
            path.suffix.lower(), "canonical"
        )
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")

    if layout == "canonical":
        return load_canonical(path)

    node_ids = None
    channels = None
    if layout == "metr-la":
        values, index, node_ids = _read_metr_la_h5(path)
        interval = interval_minutes or _infer_interval(index, 5)
    elif layout == "csv":
        values, index, node_ids = _read_wide_csv(path)
        interval = interval_minutes or _infer_interval(index, 5)
    else:
        with np.load(path) as archive:
            values = np.asarray(archive["data"], dtype=np.float32)
        if values.ndim == 3 and channel is not None:
            values = values[:, :, channel : channel + 1]
        elif values.ndim == 3:
            # flow is the first feature of the PEMS archives
            values = values[:, :, :1]
        interval = interval_minutes or 5
        index = pd.date_range(start or "2018-01-01", periods=values.shape[0], freq=f"{interval}min")
        channels = ("flow",)
    return TrafficDataset(values, index, interval, node_ids, channels)


def save_canonical(ds: TrafficDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "readings.npy", ds.readings.astype(np.float32))
    (out / "timestamps.txt").write_text("\n".join(ts.isoformat() for ts in ds.timestamps) + "\n")
    meta = {
        "interval_minutes": ds.interval_minutes,
        "channels": list(ds.channels or [f"ch{c}" for c in range(ds.num_channels)]),
        "node_ids": list(ds.node_ids or [str(i) for i in range(ds.num_nodes)]),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def load_canonical(data_dir) -> TrafficDataset:
    data_dir = Path(data_dir)
    for name in ("readings.npy", "timestamps.txt", "meta.json"):
        if not (data_dir / name).exists():
            raise FileNotFoundError(f"{data_dir} is missing {name}")
    meta = json.loads((data_dir / "meta.json").read_text())
    readings = np.load(data_dir / "readings.npy")
    lines = (data_dir / "timestamps.txt").read_text().split()
    return TrafficDataset(
        readings,
        pd.DatetimeIndex(pd.to_datetime(lines)),
        int(meta["interval_minutes"]),
        tuple(meta["node_ids"]) if "node_ids" in meta else None,
        tuple(meta["channels"]) if "channels" in meta else None,
    )


# ---------------------------------------------------------------------------
# features and windows


def steps_per_day(interval_minutes: int) -> int:
    if MINUTES_PER_DAY % interval_minutes:
        raise ValueError(f"interval of {interval_minutes} min does not divide a day")
    return MINUTES_PER_DAY // interval_minutes


def compute_time_features(ds: TrafficDataset) -> TimeFeatures:
    """Time-of-day slot and day-of-week (Monday = 0) per step."""
    n_d = steps_per_day(ds.interval_minutes)
    ts = ds.timestamps
    minutes = ts.hour * 60 + ts.minute
    tod = np.asarray(minutes // ds.interval_minutes, dtype=np.int64)
    dow = np.asarray(ts.dayofweek, dtype=np.int64)
    return TimeFeatures(tod, dow, n_d)


class Windows(Sequence):
    """Stride-1 sliding windows over a dataset, addressed by anchor (last input step).

    Items are :class:`SampleWindow` views into the underlying readings. ``arrays``
    gathers a batch as stacked arrays without materialising every window.
    """

    def __init__(self, ds: TrafficDataset, features: TimeFeatures, t_h: int, t_f: int, anchors, target_channels=(0,)):
        self.dataset = ds
        self.features = features
        self.t_h = t_h
        self.t_f = t_f
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.target_channels = tuple(target_channels)

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self._with_anchors(self.anchors[i])
        a = int(self.anchors[i])
        r = self.dataset.readings
        lo = a - self.t_h + 1
        return SampleWindow(
            x=r[lo : a + 1],
            y=r[a + 1 : a + 1 + self.t_f][:, :, list(self.target_channels)],
            x_tod=self.features.tod_index[lo : a + 1],
            x_dow=self.features.dow_index[lo : a + 1],
            anchor=a,
        )

    def _with_anchors(self, anchors) -> Windows:
        return Windows(self.dataset, self.features, self.t_h, self.t_f, anchors, self.target_channels)

    def select(self, idx) -> Windows:
        return self._with_anchors(self.anchors[np.asarray(idx)])

    def arrays(self, idx=None):
        """Return stacked ``(x, y, x_tod, x_dow)`` for the given window indices."""
        anchors = self.anchors if idx is None else self.anchors[np.asarray(idx)]
        past = anchors[:, None] + np.arange(-self.t_h + 1, 1)
        future = anchors[:, None] + np.arange(1, self.t_f + 1)
        r = self.dataset.readings
        x = r[past]
        y = r[future][..., list(self.target_channels)]
        return x, y, self.features.tod_index[past], self.features.dow_index[past]

    def target_times(self):
        """Timestamps of the forecast steps, shape (W, T_f)."""
        future = self.anchors[:, None] + np.arange(1, self.t_f + 1)
        return self.dataset.timestamps.values[future]


def make_windows(ds: TrafficDataset, t_h: int = 12, t_f: int = 12, features: TimeFeatures | None = None) -> Windows:
    if t_h < 1 or t_f < 1:
        raise ValueError("window lengths must be positive")
    if ds.num_steps < t_h + t_f:
        raise DataError(f"{ds.num_steps} steps cannot hold a window of {t_h}+{t_f}")
    features = features or compute_time_features(ds)
    anchors = np.arange(t_h - 1, ds.num_steps - t_f)
    return Windows(ds, features, t_h, t_f, anchors)


def split_sizes(count: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(np.floor(spec.train_frac * count))
    n_val = int(np.floor(spec.val_frac * count))
    return n_train, n_val, count - n_train - n_val


def split_windows(windows: Windows, spec: SplitSpec):
    """Chronological train/val/test partition; the remainder goes to test."""
    n_train, n_val, n_test = split_sizes(len(windows), spec)
    if min(n_train, n_val, n_test) == 0:
        raise DataError(f"split {spec} of {len(windows)} windows leaves an empty partition")
    return windows[:n_train], windows[n_train : n_train + n_val], windows[n_train + n_val :]


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values) -> Scaler:
        """Per-channel population mean/std over everything but the last axis."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        flat = values.reshape(-1, values.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        for c, s in enumerate(std):
            if not s > 0:
                raise DataError(f"channel {c} has zero standard deviation in the training data")
        return cls(mean, std)

    def apply(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_scaler(train_windows) -> Scaler:
    """Fit on the readings covered by the training inputs, each time step counted once."""
    if isinstance(train_windows, Windows):
        lo = int(train_windows.anchors.min()) - train_windows.t_h + 1
        hi = int(train_windows.anchors.max()) + 1
        return Scaler.fit(train_windows.dataset.readings[lo:hi])
    return Scaler.fit(train_windows)


def apply_scaler(values, scaler: Scaler):
    return scaler.apply(values)


def invert_scaler(values, scaler: Scaler):
    return scaler.invert(values)
