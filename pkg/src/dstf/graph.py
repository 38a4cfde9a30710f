"""Road-network adjacency construction and static transition matrices."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class TransitionSet:
    forward: np.ndarray
    backward: np.ndarray


def read_distance_list(path, node_ids=None) -> pd.DataFrame:
    """Read a ``from,to,cost`` CSV.

    When ``node_ids`` is given, the ``from``/``to`` columns hold sensor ids that are
    mapped to positions in ``node_ids``; rows naming unknown sensors are dropped.
    """
    frame = pd.read_csv(path, dtype={"from": str, "to": str})
    missing = {"from", "to", "cost"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    if node_ids is not None:
        lookup = {str(s): i for i, s in enumerate(node_ids)}
        frame["from"] = frame["from"].map(lookup)
        frame["to"] = frame["to"].map(lookup)
        frame = frame.dropna(subset=["from", "to"])
    frame = frame.astype({"from": int, "to": int, "cost": float})
    # DCRNN-style lists mark unreachable pairs with inf
    return frame[np.isfinite(frame["cost"])].reset_index(drop=True)


def _as_triples(distances):
    if isinstance(distances, pd.DataFrame):
        return (
            distances["from"].to_numpy(dtype=np.int64),
            distances["to"].to_numpy(dtype=np.int64),
            distances["cost"].to_numpy(dtype=np.float64),
        )
    arr = np.asarray(list(distances), dtype=np.float64).reshape(-1, 3)
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2]


def _check_ids(src, dst, n):
    bad = (src < 0) | (src >= n) | (dst < 0) | (dst >= n)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"edge {i} ({src[i]} -> {dst[i]}) references a node outside [0, {n})")


def gaussian_kernel_adjacency(distances, num_nodes: int, kappa: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-cost^2 / sigma^2)`` over listed pairs.

    ``sigma`` is the population standard deviation of every listed cost; weights
    below ``kappa`` are dropped and unlisted pairs stay zero.
    """
    if num_nodes < 1:
        raise ValueError("num_nodes must be positive")
    if not 0.0 <= kappa < 1.0:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    src, dst, cost = _as_triples(distances)
    _check_ids(src, dst, num_nodes)
    if (cost < 0).any() or not np.isfinite(cost).all():
        raise ValueError("costs must be finite and nonnegative")
    sigma = cost.std() if cost.size else 0.0
    if not sigma > 0:
        raise ValueError("all listed costs are equal; the kernel width is zero")
    adj = np.zeros((num_nodes, num_nodes))
    adj[src, dst] = np.exp(-np.square(cost / sigma))
    adj[adj < kappa] = 0.0
    return adj


def connectivity_adjacency(edges, num_nodes: int) -> np.ndarray:
    """Binary adjacency with a 1 for every listed (from, to) pair."""
    adj = np.zeros((num_nodes, num_nodes))
    if isinstance(edges, pd.DataFrame):
        src = edges["from"].to_numpy(dtype=np.int64)
        dst = edges["to"].to_numpy(dtype=np.int64)
    else:
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
        src, dst = pairs[:, 0], pairs[:, 1]
    _check_ids(src, dst, num_nodes)
    adj[src, dst] = 1.0
    return adj


def row_normalize(mat: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    mat = np.asarray(mat, dtype=np.float64)
    sums = mat.sum(axis=1, keepdims=True)
    out = np.zeros_like(mat)
    np.divide(mat, sums, out=out, where=sums != 0)
    return out


def transition_matrices(adj: np.ndarray) -> TransitionSet:
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    if (adj < 0).any():
        raise ValueError("adjacency weights must be nonnegative")
    return TransitionSet(row_normalize(adj), row_normalize(adj.T))


def save_adjacency(adj: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(adj, dtype=np.float64))
    return path


def load_adjacency(path) -> np.ndarray:
    adj = np.load(path)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"{path}: adjacency must be square, got {adj.shape}")
    return adj


def connected_subgraph(adj: np.ndarray, size: int, seed_node: int = 0) -> np.ndarray:
    """Breadth-first node set of ``size`` nodes grown from ``seed_node`` over undirected links."""
    import networkx as nx

    graph = nx.from_numpy_array((np.asarray(adj) + np.asarray(adj).T) > 0)
    order = [seed_node] + [v for _, v in nx.bfs_edges(graph, seed_node)]
    if len(order) < size:
        raise ValueError(f"component of node {seed_node} has only {len(order)} nodes")
    return np.sort(np.asarray(order[:size]))
