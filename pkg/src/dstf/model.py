"""The decoupled spatial-temporal model: gate, residual decomposition, layer stack, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import DiffusionBlock, masked_powers
from .dynamic_graph import DynamicGraphLearner, EmbeddingTables, init_uniform, self_adaptive_transition
from .inherent import GRU_UPDATES, InherentBlock

BLOCK_ORDERS = ("diffusion-first", "inherent-first")


class NumericError(FloatingPointError):
    """A non-finite value appeared inside the network."""


@dataclass
class ModelConfig:
    num_nodes: int
    steps_per_day: int = 288
    in_channels: int = 1
    out_channels: int = 1
    hidden_dim: int = 32
    embed_dim: int = 12
    num_layers: int = 4
    k_s: int = 2
    k_t: int = 3
    num_heads: int = 4
    history: int = 12
    horizon: int = 12
    gru_update: str = "standard"
    use_gate: bool = True
    use_residual: bool = True
    use_dynamic_graph: bool = True
    use_adaptive: bool = True
    use_gru: bool = True
    use_attention: bool = True
    autoregressive: bool = True
    block_order: str = "diffusion-first"

    def __post_init__(self):
        for name in (
            "num_nodes", "steps_per_day", "in_channels", "out_channels", "hidden_dim",
            "embed_dim", "num_layers", "k_s", "k_t", "num_heads", "history", "horizon",
        ):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.history < self.k_t:
            raise ValueError(f"history {self.history} is shorter than k_t {self.k_t}")
        if self.use_attention and self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even for the positional encoding")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        if self.gru_update not in GRU_UPDATES:
            raise ValueError(f"gru_update must be one of {GRU_UPDATES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class EstimationGate(nn.Module):
    """Per (step, node) diffusion proportion in (0, 1) from time and node embeddings."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(init_uniform(torch.empty(4 * embed_dim, embed_dim), 4 * embed_dim))
        self.w2 = nn.Parameter(init_uniform(torch.empty(embed_dim, 1), embed_dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """``features`` is (B, T, N, 4*d_e); returns (B, T, N, 1)."""
        return torch.sigmoid(F.relu(features @ self.w1) @ self.w2)


def gate_features(tables: EmbeddingTables, tod: torch.Tensor, dow: torch.Tensor) -> torch.Tensor:
    """Concatenate [T_D[tod] | T_W[dow] | E_u[i] | E_d[i]] for every (b, t, i)."""
    b, t = tod.shape
    n = tables.source.shape[0]
    time = torch.cat([tables.time_of_day[tod], tables.day_of_week[dow]], dim=-1)
    node = torch.cat([tables.source, tables.target], dim=-1)
    return torch.cat(
        [time[:, :, None, :].expand(b, t, n, -1), node[None, None].expand(b, t, n, -1)], dim=-1
    )


@dataclass
class LayerTrace:
    x_in: torch.Tensor
    gate: torch.Tensor | None
    x_dif: torch.Tensor
    h_dif: torch.Tensor
    backcast_dif: torch.Tensor
    x_inh: torch.Tensor
    h_inh: torch.Tensor
    backcast_inh: torch.Tensor
    x_out: torch.Tensor
    forecast_dif: torch.Tensor
    forecast_inh: torch.Tensor


def _check_finite(t: torch.Tensor, layer: int, block: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in layer {layer}, {block}")


class DecoupledLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gate = EstimationGate(cfg.embed_dim) if cfg.use_gate else None
        num_dirs = 3 if cfg.use_adaptive else 2
        self.diffusion = DiffusionBlock(cfg.hidden_dim, cfg.k_s, cfg.k_t, num_dirs, cfg.horizon, cfg.autoregressive)
        self.inherent = InherentBlock(
            cfg.hidden_dim,
            cfg.num_heads,
            cfg.history,
            cfg.horizon,
            use_gru=cfg.use_gru,
            use_attention=cfg.use_attention,
            autoregressive=cfg.autoregressive,
            gru_update=cfg.gru_update,
        )

    def forward(self, x: torch.Tensor, gate_in: torch.Tensor, supports: torch.Tensor, index: int = 0) -> LayerTrace:
        cfg = self.cfg
        lam = self.gate(gate_in) if self.gate is not None else None
        first_in = lam * x if lam is not None else x

        def run_diffusion(inp):
            out = self.diffusion(inp, supports)
            _check_finite(out[0], index, "diffusion block")
            return out

        def run_inherent(inp):
            out = self.inherent(inp)
            _check_finite(out[0], index, "inherent block")
            return out

        if cfg.block_order == "diffusion-first":
            h_dif, f_dif, b_dif = run_diffusion(first_in)
            x_inh = x - b_dif if cfg.use_residual else x
            h_inh, f_inh, b_inh = run_inherent(x_inh)
            x_out = x_inh - b_inh if cfg.use_residual else x
            x_dif = first_in
        else:
            h_inh, f_inh, b_inh = run_inherent(first_in)
            x_dif = x - b_inh if cfg.use_residual else x
            h_dif, f_dif, b_dif = run_diffusion(x_dif)
            x_out = x_dif - b_dif if cfg.use_residual else x
            x_inh = first_in
        return LayerTrace(x, lam, x_dif, h_dif, b_dif, x_inh, h_inh, b_inh, x_out, f_dif, f_inh)


class DecoupledSTGNN(nn.Module):
    """Decoupled dynamic spatial-temporal graph network.

    Takes raw (unscaled) inputs of shape (B, T_h, N, C) plus per-step time-of-day and
    day-of-week indices, and returns forecasts (B, T_f, N, C_out) in original units.
    Scaling statistics and the static transitions live in buffers.
    """

    def __init__(self, cfg: ModelConfig, adjacency=None, scaler=None):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_nodes
        if adjacency is None:
            adjacency = np.zeros((n, n))
        from .graph import transition_matrices

        trans = transition_matrices(np.asarray(adjacency))
        if trans.forward.shape != (n, n):
            raise ValueError(f"adjacency of shape {trans.forward.shape} does not match {n} nodes")
        self.register_buffer("p_forward", torch.as_tensor(trans.forward, dtype=torch.get_default_dtype()))
        self.register_buffer("p_backward", torch.as_tensor(trans.backward, dtype=torch.get_default_dtype()))
        self.register_buffer("in_mean", torch.zeros(cfg.in_channels))
        self.register_buffer("in_std", torch.ones(cfg.in_channels))
        self.register_buffer("out_mean", torch.zeros(cfg.out_channels))
        self.register_buffer("out_std", torch.ones(cfg.out_channels))
        if scaler is not None:
            self.set_scaler(scaler)

        self.input_proj = nn.Linear(cfg.in_channels, cfg.hidden_dim)
        self.tables = EmbeddingTables(n, cfg.steps_per_day, cfg.embed_dim)
        self.graph_learner = (
            DynamicGraphLearner(cfg.hidden_dim, cfg.history, cfg.embed_dim) if cfg.use_dynamic_graph else None
        )
        self.layers = nn.ModuleList(DecoupledLayer(cfg) for _ in range(cfg.num_layers))
        self.head = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.ReLU(), nn.Linear(cfg.hidden_dim, cfg.out_channels)
        )

    def set_scaler(self, scaler, target_channels=None):
        mean = np.asarray(scaler.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(scaler.std, dtype=np.float64).reshape(-1)
        target_channels = list(target_channels or range(self.cfg.out_channels))
        dtype = self.in_mean.dtype
        self.in_mean.copy_(torch.as_tensor(mean, dtype=dtype))
        self.in_std.copy_(torch.as_tensor(std, dtype=dtype))
        self.out_mean.copy_(torch.as_tensor(mean[target_channels], dtype=dtype))
        self.out_std.copy_(torch.as_tensor(std[target_channels], dtype=dtype))

    def transitions(self, latent, tod, dow):
        """Transition matrices shared by every layer, each (B, N, N)."""
        b = latent.shape[0]
        if self.graph_learner is not None:
            fwd, bwd = self.graph_learner(latent, tod[:, -1], dow[:, -1], self.tables, self.p_forward, self.p_backward)
        else:
            fwd = self.p_forward.expand(b, -1, -1)
            bwd = self.p_backward.expand(b, -1, -1)
        mats = [fwd, bwd]
        if self.cfg.use_adaptive:
            apt = self_adaptive_transition(self.tables.source, self.tables.target)
            mats.append(apt.expand(b, -1, -1))
        return mats

    def supports(self, latent, tod, dow) -> torch.Tensor:
        return torch.stack([masked_powers(p, self.cfg.k_s) for p in self.transitions(latent, tod, dow)], dim=1)

    def forward(self, x, tod, dow, trace: bool = False):
        x = (x - self.in_mean) / self.in_std
        latent = self.input_proj(x)
        supports = self.supports(latent, tod, dow)
        gate_in = gate_features(self.tables, tod, dow)
        hidden = 0.0
        traces = []
        state = latent
        for i, layer in enumerate(self.layers):
            tr = layer(state, gate_in, supports, i)
            hidden = hidden + tr.forecast_dif + tr.forecast_inh
            state = tr.x_out
            if trace:
                traces.append(tr)
        y = self.head(hidden) * self.out_std + self.out_mean
        _check_finite(y, len(self.layers) - 1, "regression head")
        return (y, traces) if trace else y
