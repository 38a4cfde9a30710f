"""Diffusion block: spatial-temporal localized graph convolution.

Tensors carry a leading batch axis: inputs are (B, T, N, d) and transition stacks
are (B, n_dirs, k_s, N, N) holding the diagonal-masked powers of each matrix.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .dynamic_graph import init_uniform


def masked_powers(p: torch.Tensor, k_s: int) -> torch.Tensor:
    """Stack ``P^k`` with zeroed diagonal for ``k = 1..k_s`` along a new axis -3."""
    n = p.shape[-1]
    off_diag = 1.0 - torch.eye(n, dtype=p.dtype, device=p.device)
    out = []
    power = p
    for k in range(k_s):
        if k:
            power = power @ p
        out.append(power * off_diag)
    return torch.stack(out, dim=-3)


def build_localized_transition(p: torch.Tensor, k_s: int, k_t: int) -> list[torch.Tensor]:
    """Per order k, the N x k_t*N matrix of k_t side-by-side copies of masked ``P^k``."""
    if k_s < 1 or k_t < 1:
        raise ValueError("k_s and k_t must be at least 1")
    powers = masked_powers(p, k_s)
    return [torch.cat([powers[..., k, :, :]] * k_t, dim=-1) for k in range(k_s)]


def build_localized_features(x_window: torch.Tensor, lag_weights) -> torch.Tensor:
    """Stack ReLU lag projections of a (k_t, N, d) window into a (k_t*N, d) matrix.

    Block ``b`` (oldest first) is ``relu(x_window[b] @ lag_weights[k_t - 1 - b])``.
    """
    k_t = x_window.shape[0]
    if len(lag_weights) != k_t:
        raise ValueError(f"window of {k_t} steps needs {k_t} lag weights, got {len(lag_weights)}")
    blocks = [F.relu(x_window[b] @ lag_weights[k_t - 1 - b]) for b in range(k_t)]
    return torch.cat(blocks, dim=0)


def st_localized_conv(x_lc: torch.Tensor, localized, conv_weights: torch.Tensor) -> torch.Tensor:
    """Sum over directions g and orders k of ``(P_lc_g)^k @ X_lc @ W[k, g]``.

    Args:
        x_lc: (k_t*N, d) localized feature matrix.
        localized: one list per direction of the k_s localized transitions (N, k_t*N).
        conv_weights: (k_s, n_dirs, d, d).
    """
    out = 0.0
    for g, per_order in enumerate(localized):
        for k, p_lc in enumerate(per_order):
            out = out + p_lc @ x_lc @ conv_weights[k, g]
    return out


class DiffusionBlock(nn.Module):
    """Localized convolution over a trailing k_t-step window with forecast and backcast branches.

    Every copy in a localized transition is the same masked power, so
    ``(P_lc)^k X_lc`` equals ``P^k`` applied to the sum of the k_t lag blocks; the
    batched path uses that identity instead of materialising the wide matrices.
    """

    def __init__(self, hidden_dim: int, k_s: int, k_t: int, num_dirs: int, horizon: int, autoregressive: bool = True):
        super().__init__()
        d = hidden_dim
        self.k_s, self.k_t, self.horizon = k_s, k_t, horizon
        self.autoregressive = autoregressive
        self.lag_weights = nn.Parameter(init_uniform(torch.empty(k_t, d, d), d))
        self.conv_weights = nn.Parameter(init_uniform(torch.empty(k_s, num_dirs, d, d), d))
        self.backcast_fc = nn.Linear(d, d)
        if autoregressive:
            self.pseudo_input = nn.Linear(d, d)
        else:
            self.direct = nn.Linear(d, horizon * d)

    def _lag_sum(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of lag-projected features for every step with a full window: (B, T-k_t+1, N, d)."""
        t = x.shape[1]
        return sum(F.relu(x[:, self.k_t - 1 - j : t - j] @ self.lag_weights[j]) for j in range(self.k_t))

    def _conv(self, s: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
        b, t, n, d = s.shape
        g, k = supports.shape[1:3]
        # propagate all (direction, order) pairs at once, then mix with the stacked weights
        z = supports.reshape(b, g * k, n, n) @ s.permute(0, 2, 1, 3).reshape(b, 1, n, t * d)
        z = z.reshape(b, g * k, n, t, d).permute(0, 3, 2, 1, 4).reshape(b, t, n, g * k * d)
        w = self.conv_weights.transpose(0, 1).reshape(g * k * d, -1)
        return z @ w

    def hidden_states(self, x: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
        b, t, n, d = x.shape
        if t < self.k_t:
            raise ValueError(f"input of {t} steps is shorter than the temporal kernel {self.k_t}")
        h = self._conv(self._lag_sum(x), supports)
        pad = x.new_zeros(b, self.k_t - 1, n, d)
        return torch.cat([pad, h], dim=1)

    def forecast(self, x: torch.Tensor, h: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
        if not self.autoregressive:
            b, _, n, d = h.shape
            out = self.direct(h[:, -1]).reshape(b, n, self.horizon, d)
            return out.permute(0, 2, 1, 3)
        window = list(x[:, x.shape[1] - self.k_t + 1 :].unbind(1))
        newest = h[:, -1]
        outputs = []
        for _ in range(self.horizon):
            window.append(self.pseudo_input(newest))
            window = window[-self.k_t :]
            s = sum(F.relu(window[-1 - j] @ self.lag_weights[j]) for j in range(self.k_t))
            newest = self._conv(s[:, None], supports)[:, 0]
            outputs.append(newest)
        return torch.stack(outputs, dim=1)

    def backcast(self, h: torch.Tensor) -> torch.Tensor:
        return F.relu(self.backcast_fc(h))

    def forward(self, x: torch.Tensor, supports: torch.Tensor):
        h = self.hidden_states(x, supports)
        return h, self.forecast(x, h, supports), self.backcast(h)
