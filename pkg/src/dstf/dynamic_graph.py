"""Self-adaptive and per-window dynamic transition matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


def init_uniform(param: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return param.uniform_(-bound, bound)


class EmbeddingTables(nn.Module):
    """Node (source/target) and time-slot embeddings shared across the whole model."""

    def __init__(self, num_nodes: int, steps_per_day: int, embed_dim: int = 12, days_per_week: int = 7):
        super().__init__()
        self.source = nn.Parameter(torch.empty(num_nodes, embed_dim))
        self.target = nn.Parameter(torch.empty(num_nodes, embed_dim))
        self.time_of_day = nn.Parameter(torch.empty(steps_per_day, embed_dim))
        self.day_of_week = nn.Parameter(torch.empty(days_per_week, embed_dim))
        for p in self.parameters():
            init_uniform(p, embed_dim)

    @property
    def embed_dim(self) -> int:
        return self.source.shape[1]


def self_adaptive_transition(source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Row-softmax of ReLU(E_d E_u^T): dense, strictly positive, row-stochastic."""
    return torch.softmax(F.relu(target @ source.T), dim=-1)


@dataclass
class DynamicFeatures:
    source: torch.Tensor
    target: torch.Tensor


class DynamicGraphLearner(nn.Module):
    """Masks the static transitions with attention scores computed from the input window.

    One mask is produced per window (indexed by its last input step) and reused for
    every step of that window.
    """

    def __init__(self, hidden_dim: int, history: int, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        in_dim = hidden_dim * history
        self.fc1 = nn.Linear(in_dim, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)
        feat_dim = 4 * embed_dim
        # separate query/key pairs for the forward and backward directions
        self.query_f = nn.Parameter(init_uniform(torch.empty(feat_dim, embed_dim), feat_dim))
        self.key_f = nn.Parameter(init_uniform(torch.empty(feat_dim, embed_dim), feat_dim))
        self.query_b = nn.Parameter(init_uniform(torch.empty(feat_dim, embed_dim), feat_dim))
        self.key_b = nn.Parameter(init_uniform(torch.empty(feat_dim, embed_dim), feat_dim))

    def features(self, x: torch.Tensor, tod: torch.Tensor, dow: torch.Tensor, tables: EmbeddingTables) -> DynamicFeatures:
        """Build the two dynamic feature matrices.

        Args:
            x: latent history, shape (B, T_h, N, d).
            tod, dow: slot indices of the window's last step, shape (B,).
        """
        b, t, n, d = x.shape
        # channel c contributes the N x T_h block x[:, :, c]^T; blocks are concatenated per node
        history = x.permute(0, 2, 3, 1).reshape(b, n, d * t)
        summary = self.fc2(F.relu(self.fc1(history)))
        time = torch.cat([tables.time_of_day[tod], tables.day_of_week[dow]], dim=-1)
        time = time[:, None, :].expand(b, n, time.shape[-1])
        src = tables.source[None].expand(b, n, -1)
        tgt = tables.target[None].expand(b, n, -1)
        return DynamicFeatures(
            torch.cat([summary, time, src], dim=-1),
            torch.cat([summary, time, tgt], dim=-1),
        )

    def forward(self, x, tod, dow, tables: EmbeddingTables, forward_p: torch.Tensor, backward_p: torch.Tensor):
        feats = self.features(x, tod, dow, tables)
        return (
            dynamic_transition(feats.source, forward_p, self.query_f, self.key_f),
            dynamic_transition(feats.target, backward_p, self.query_b, self.key_b),
        )


def attention_mask(features: torch.Tensor, query: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    q = features @ query
    k = features @ key
    scores = q @ k.transpose(-1, -2) / math.sqrt(query.shape[-1])
    return torch.softmax(scores, dim=-1)


def dynamic_transition(features, static_p, query, key) -> torch.Tensor:
    """Static transition elementwise-masked by the attention matrix of ``features``."""
    return static_p * attention_mask(features, query, key)
