"""Masked-MAE training with horizon curriculum, gradient clipping and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import Windows
from .model import DecoupledSTGNN, ModelConfig, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 15
    cl_growth_steps: int = 2000
    grad_clip: float | None = 5.0
    seed: int = 0
    mask_zeros: bool = True
    use_curriculum: bool = True
    max_steps: int | None = None  # hard cap on optimizer steps, mainly for smoke runs
    eval_batch_size: int = 64

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "cl_growth_steps", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    horizon_level: int = 1
    best_val_mae: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    losses: list[float] = field(default_factory=list)
    empty_batches: int = 0  # batches whose targets were entirely masked


class NonFiniteLoss(NumericError):
    def __init__(self, epoch: int, batch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (step {step})")
        self.epoch, self.batch, self.step = epoch, batch, step


def mae_loss(y_hat: torch.Tensor, y: torch.Tensor, horizon_level: int | None = None, mask_zeros: bool = True, state=None):
    """Mean |y_hat - y| over the first ``horizon_level`` steps (axis 1).

    With ``mask_zeros`` cells where ``y == 0`` drop out of both the sum and the count.
    A fully masked batch gives 0 and bumps ``state.empty_batches``.
    """
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(y_hat.shape)} != target shape {tuple(y.shape)}")
    if horizon_level is not None:
        y_hat, y = y_hat[:, :horizon_level], y[:, :horizon_level]
    err = (y_hat - y).abs()
    if not mask_zeros:
        return err.mean()
    mask = (y != 0).to(err.dtype)
    count = mask.sum()
    if count == 0:
        if state is not None:
            state.empty_batches += 1
        log.warning("all targets masked in batch; loss set to 0")
        return (err * mask).sum()
    return (err * mask).sum() / count


def curriculum_level(global_step: int, growth_steps: int, horizon: int) -> int:
    return min(horizon, 1 + global_step // growth_steps)


def curriculum_schedule(state: TrainState, cfg: TrainConfig, horizon: int) -> int:
    """Supervised horizon for the current step; never decreases."""
    if not cfg.use_curriculum:
        return horizon
    return max(state.horizon_level, curriculum_level(state.global_step, cfg.cl_growth_steps, horizon))


class EarlyStopping:
    """Tracks the best validation MAE; ``stop`` turns on after ``patience`` epochs without improvement."""

    def __init__(self, patience: int, state: TrainState | None = None):
        self.patience = patience
        self.state = state or TrainState()

    def update(self, val_mae: float, epoch: int | None = None) -> tuple[bool, bool]:
        """Returns ``(stop, improved)``; ``improved`` means a new best checkpoint should be kept."""
        s = self.state
        if val_mae < s.best_val_mae:
            s.best_val_mae = float(val_mae)
            s.best_epoch = s.epoch if epoch is None else epoch
            s.epochs_since_improvement = 0
            return False, True
        s.epochs_since_improvement += 1
        return s.epochs_since_improvement >= self.patience, False


def early_stopping(state: TrainState, val_mae: float, patience: int) -> tuple[bool, bool]:
    return EarlyStopping(patience, state).update(val_mae)


# ---------------------------------------------------------------------------


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def to_tensors(x, tod, dow, dtype=torch.float32):
    return (
        torch.as_tensor(np.asarray(x), dtype=dtype),
        torch.as_tensor(np.asarray(tod), dtype=torch.long),
        torch.as_tensor(np.asarray(dow), dtype=torch.long),
    )


class ModelPredictor:
    """Numpy-in / numpy-out wrapper used by :func:`dstf.evaluation.evaluate`."""

    def __init__(self, model: DecoupledSTGNN):
        self.model = model

    @torch.no_grad()
    def __call__(self, x, tod, dow, horizon: int):
        was_training = self.model.training
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        y = self.model(*to_tensors(x, tod, dow, dtype))
        self.model.train(was_training)
        return y[:, :horizon].double().numpy()


def save_checkpoint(path, model: DecoupledSTGNN, train_cfg: TrainConfig | None = None, state: TrainState | None = None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": model.cfg.to_dict(),
        "model_state": model.state_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "train_state": asdict(state) if state else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, num_nodes: int | None = None) -> tuple[DecoupledSTGNN, dict]:
    """Rebuild the model from a checkpoint; ``num_nodes`` guards against a data/checkpoint mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(payload["model_config"])
    if num_nodes is not None and cfg.num_nodes != num_nodes:
        raise ValueError(f"checkpoint was trained on {cfg.num_nodes} nodes but the data has {num_nodes}")
    model = DecoupledSTGNN(cfg)
    dtype = payload["model_state"]["p_forward"].dtype
    model.to(dtype)
    model.load_state_dict(payload["model_state"])
    return model, payload


class Trainer:
    """Runs the epoch loop on a model that maps raw inputs to raw-unit forecasts.

    Args:
        model: network with its scaler buffers already set.
        cfg: optimisation settings.
        train: training windows.
        val: validation windows (optional; without them no early stopping happens).
        out_dir: where ``metrics.csv`` and ``best.pt`` go (optional).
    """

    def __init__(self, model: DecoupledSTGNN, cfg: TrainConfig, train: Windows, val: Windows | None = None, out_dir=None):
        if len(train) == 0:
            raise ValueError("training split is empty")
        self.model = model
        self.cfg = cfg
        self.train_windows = train
        self.val_windows = val
        self.out_dir = Path(out_dir) if out_dir else None
        self.state = TrainState()
        self.stopper = EarlyStopping(cfg.patience, self.state)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.dtype = next(model.parameters()).dtype
        self.shuffle = np.random.default_rng(cfg.seed)
        self.horizon = model.cfg.horizon
        self.best_state = None
        self.history: list[dict] = []
        self._t0 = time.perf_counter()

    def step(self, x, y, tod, dow) -> float:
        cfg, state = self.cfg, self.state
        state.horizon_level = curriculum_schedule(state, cfg, self.horizon)
        self.model.train()
        xt, todt, dowt = to_tensors(x, tod, dow, self.dtype)
        yt = torch.as_tensor(np.asarray(y), dtype=self.dtype)
        y_hat = self.model(xt, todt, dowt)
        loss = mae_loss(y_hat, yt, state.horizon_level, cfg.mask_zeros, state)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        state.global_step += 1
        return float(loss.detach())

    def train_epoch(self) -> float:
        """One pass over shuffled training batches; returns the mean batch loss."""
        cfg, state = self.cfg, self.state
        order = self.shuffle.permutation(len(self.train_windows))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            if cfg.max_steps is not None and state.global_step >= cfg.max_steps:
                break
            x, y, tod, dow = self.train_windows.arrays(order[start : start + cfg.batch_size])
            loss = self.step(x, y, tod, dow)
            if not math.isfinite(loss):
                raise NonFiniteLoss(state.epoch, b, state.global_step)
            losses.append(loss)
            state.losses.append(loss)
            log.debug("epoch %d batch %d loss %.5f level %d", state.epoch, b, loss, state.horizon_level)
        return float(np.mean(losses)) if losses else math.nan

    def validate(self):
        from .evaluation import evaluate

        report, _ = evaluate(ModelPredictor(self.model), self.val_windows, self.cfg.mask_zeros, self.cfg.eval_batch_size)
        return report

    def _log_row(self, row: dict):
        self.history.append(row)
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with path.open("a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)

    def fit(self) -> TrainState:
        cfg, state = self.cfg, self.state
        while state.epoch < cfg.max_epochs:
            if cfg.max_steps is not None and state.global_step >= cfg.max_steps:
                break
            train_loss = self.train_epoch()
            row = {"epoch": state.epoch, "train_loss": train_loss}
            stop = False
            if self.val_windows is not None and len(self.val_windows):
                report = self.validate()
                row.update({f"val_mae_h{m.horizon}": m.mae for m in report.horizons})
                row["val_mae"] = report.overall.mae
                stop, improved = self.stopper.update(report.overall.mae, state.epoch)
                if improved:
                    self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                    if self.out_dir is not None:
                        save_checkpoint(self.out_dir / "best.pt", self.model, cfg, state)
            row["wall_clock_s"] = time.perf_counter() - self._t0
            self._log_row(row)
            log.info("epoch %d train %.4f val %s", state.epoch, train_loss, row.get("val_mae"))
            if stop:
                break
            state.epoch += 1
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / "last.pt", self.model, cfg, state)
        return state

    def restore_best(self):
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model
