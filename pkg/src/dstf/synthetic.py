"""Small synthetic traffic-like datasets for tests, smoke runs and overfitting checks."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .data import TrafficDataset
from .graph import row_normalize


def ring_adjacency(num_nodes: int, weight: float = 1.0) -> np.ndarray:
    """Directed ring i -> i+1 plus a few chords so the graph is not trivially regular."""
    adj = np.zeros((num_nodes, num_nodes))
    for i in range(num_nodes):
        adj[i, (i + 1) % num_nodes] = weight
        if num_nodes > 3:
            adj[i, (i + 3) % num_nodes] = 0.5 * weight
    np.fill_diagonal(adj, 0.0)
    return adj


def ar1_diffusion(
    num_nodes: int = 8,
    num_steps: int = 200,
    *,
    self_coef: float = 0.5,
    diffusion_coef: float = 0.4,
    noise: float = 0.01,
    level: float = 50.0,
    scale: float = 10.0,
    adjacency: np.ndarray | None = None,
    interval_minutes: int = 5,
    start: str = "2012-03-01",
    seed: int = 0,
):
    """AR(1) process with a diffusion term.

    ``z_t = self_coef * z_{t-1} + diffusion_coef * P^T z_{t-1} + daily forcing + noise``,
    reported as ``level + scale * z``. Returns ``(dataset, adjacency)``.
    """
    rng = np.random.default_rng(seed)
    adj = ring_adjacency(num_nodes) if adjacency is None else np.asarray(adjacency, dtype=np.float64)
    p = row_normalize(adj)
    steps_day = 1440 // interval_minutes
    phase = rng.uniform(0, 2 * np.pi, num_nodes)
    z = np.zeros((num_steps, num_nodes))
    z[0] = rng.normal(size=num_nodes)
    for t in range(1, num_steps):
        forcing = 0.3 * np.sin(2 * np.pi * t / steps_day + phase)
        z[t] = self_coef * z[t - 1] + diffusion_coef * (p.T @ z[t - 1]) + forcing + noise * rng.normal(size=num_nodes)
    readings = (level + scale * z)[:, :, None]
    ts = pd.date_range(start, periods=num_steps, freq=f"{interval_minutes}min")
    return TrafficDataset(readings, ts, interval_minutes, node_ids=[str(i) for i in range(num_nodes)]), adj


def weekly_periodic(num_nodes: int = 4, weeks: int = 3, interval_minutes: int = 60, start: str = "2012-03-05", seed: int = 0):
    """Readings that repeat exactly every week (strictly positive)."""
    rng = np.random.default_rng(seed)
    per_week = 7 * 1440 // interval_minutes
    week = rng.uniform(10, 70, size=(per_week, num_nodes, 1))
    readings = np.tile(week, (weeks, 1, 1))
    ts = pd.date_range(start, periods=len(readings), freq=f"{interval_minutes}min")
    return TrafficDataset(readings, ts, interval_minutes, node_ids=[str(i) for i in range(num_nodes)])
