"""Inherent block: per-node GRU plus multi-head self-attention over time."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .dynamic_graph import init_uniform

GRU_UPDATES = ("standard", "literal")


def positional_encoding(length: int, dim: int, dtype=None) -> torch.Tensor:
    """Fixed sinusoidal table: sin(t / 10000^(2i/d)) at even i, cos at odd i."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    t = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = t / torch.pow(10000.0, 2 * i / dim)
    table = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(dtype or torch.get_default_dtype())


class GRUCell(nn.Module):
    """GRU cell in row-vector form.

    ``literal`` mixes the previous candidate state into the update instead of the
    previous output state; ``standard`` is the usual convex update.
    """

    def __init__(self, dim: int, update: str = "standard"):
        super().__init__()
        if update not in GRU_UPDATES:
            raise ValueError(f"gru update must be one of {GRU_UPDATES}")
        self.update = update
        # gate order along the last axis: z, r, h
        self.input_weight = nn.Parameter(init_uniform(torch.empty(dim, 3 * dim), dim))
        self.hidden_weight = nn.Parameter(init_uniform(torch.empty(dim, 3 * dim), dim))
        self.bias = nn.Parameter(init_uniform(torch.empty(3 * dim), dim))

    def forward(self, x, h, candidate=None):
        """Advance one step; returns ``(new_state, candidate)``."""
        gx = x @ self.input_weight
        gh = h @ self.hidden_weight
        xz, xr, xh = gx.chunk(3, dim=-1)
        hz, hr, hh = gh.chunk(3, dim=-1)
        bz, br, bh = self.bias.chunk(3)
        z = torch.sigmoid(xz + hz + bz)
        r = torch.sigmoid(xr + hr + br)
        cand = torch.tanh(xh + r * (hh + bh))
        if self.update == "literal":
            prev = torch.zeros_like(cand) if candidate is None else candidate
            return (1 - z) * prev + z * cand, cand
        return (1 - z) * h + z * cand, cand


def gru_step(x, h, cell: GRUCell, candidate=None):
    return cell(x, h, candidate)


class MultiHeadSelfAttention(nn.Module):
    """Dot-product attention along time, independently for every node.

    Each of the S heads projects to the full width d; heads are concatenated to
    S*d and mapped back to d.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if num_heads < 1:
            raise ValueError("num_heads must be at least 1")
        self.dim = dim
        self.num_heads = num_heads
        self.query = nn.Parameter(init_uniform(torch.empty(num_heads, dim, dim), dim))
        self.key = nn.Parameter(init_uniform(torch.empty(num_heads, dim, dim), dim))
        self.value = nn.Parameter(init_uniform(torch.empty(num_heads, dim, dim), dim))
        self.output = nn.Parameter(init_uniform(torch.empty(num_heads * dim, dim), num_heads * dim))

    def split(self, h: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
        """Project (..., T, d) with a per-head weight to (..., T, S, d)."""
        s, d = self.num_heads, self.dim
        return (h @ weight.transpose(0, 1).reshape(d, s * d)).unflatten(-1, (s, d))

    def attend_last(self, h: torch.Tensor, return_weights: bool = False):
        """Output and (..., S, T) weights for the final step of ``h`` only.

        Uses ``q_s K_s^T = (q_s W_K,s^T) h^T`` and ``A V_s = (A h) W_V,s`` so that no
        per-head key or value tensors are materialised.
        """
        s, d = self.num_heads, self.dim
        q = self.split(h[..., -1, :], self.query)
        q_k = (q.flatten(-2) @ torch.block_diag(*self.key.transpose(-1, -2))).unflatten(-1, (s, d))
        weights = torch.softmax(q_k @ h.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (weights @ h).flatten(-2) @ torch.block_diag(*self.value) @ self.output
        return (out, weights) if return_weights else out

    def forward(self, h: torch.Tensor, return_weights: bool = False):
        """``h`` is (..., T, d); returns (..., T, d) and optionally the (..., S, T, T) weights."""
        q, k, v = (self.split(h, w).transpose(-3, -2) for w in (self.query, self.key, self.value))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)
        out = (weights @ v).transpose(-3, -2).flatten(-2) @ self.output
        return (out, weights) if return_weights else out


def multi_head_self_attention(h: torch.Tensor, attention: MultiHeadSelfAttention) -> torch.Tensor:
    return attention(h)


class InherentBlock(nn.Module):
    def __init__(
        self,
        hidden_dim: int,
        num_heads: int,
        history: int,
        horizon: int,
        use_gru: bool = True,
        use_attention: bool = True,
        autoregressive: bool = True,
        gru_update: str = "standard",
    ):
        super().__init__()
        d = hidden_dim
        self.history, self.horizon = history, horizon
        self.use_gru, self.use_attention, self.autoregressive = use_gru, use_attention, autoregressive
        if use_gru:
            self.gru = GRUCell(d, gru_update)
        if use_attention:
            self.attention = MultiHeadSelfAttention(d, num_heads)
            self.register_buffer("pos_table", positional_encoding(history, d), persistent=False)
        self.backcast_fc = nn.Linear(d, d)
        if autoregressive:
            self.pseudo_input = nn.Linear(d, d)
        else:
            self.direct = nn.Linear(d, horizon * d)

    def hidden_states(self, x: torch.Tensor):
        """Returns (H, recurrent outputs, final state, final candidate); H is (B, T, N, d)."""
        seq = x.transpose(1, 2)  # (B, N, T, d)
        state = cand = None
        if self.use_gru:
            state = seq.new_zeros(seq.shape[:2] + seq.shape[3:])
            outs = []
            for t in range(seq.shape[2]):
                state, cand = self.gru(seq[:, :, t], state, cand)
                outs.append(state)
            seq = torch.stack(outs, dim=2)
        h = self.attention(seq + self.pos_table.to(seq.dtype)) if self.use_attention else seq
        return h.transpose(1, 2), seq, state, cand

    def forecast(self, h, recurrent, state, cand) -> torch.Tensor:
        if not self.autoregressive:
            b, _, n, d = h.shape
            return self.direct(h[:, -1]).reshape(b, n, self.horizon, d).permute(0, 2, 1, 3)
        window = recurrent
        newest = h[:, -1]
        outputs = []
        for _ in range(self.horizon):
            step = self.pseudo_input(newest)
            if self.use_gru:
                state, cand = self.gru(step, state, cand)
                step = state
            if self.use_attention:
                window = torch.cat([window[:, :, 1:], step[:, :, None]], dim=2)
                newest = self.attention.attend_last(window + self.pos_table.to(window.dtype))
            else:
                newest = step
            outputs.append(newest)
        return torch.stack(outputs, dim=1)

    def backcast(self, h: torch.Tensor) -> torch.Tensor:
        return F.relu(self.backcast_fc(h))

    def forward(self, x: torch.Tensor):
        h, recurrent, state, cand = self.hidden_states(x)
        return h, self.forecast(h, recurrent, state, cand), self.backcast(h)
