"""Union-space grouping of Gaussians: position + view-independent color + reduced semantics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..scene import UNASSIGNED, Scene
from .hdbscan import hdbscan
from .pca import DegenerateInput, pca_reduce

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterConfig:
    min_cluster_size: int | None = None  # None -> max(20, 0.2% of N)
    min_samples: int = 10
    sem_dim: int = 6

    def resolve_min_cluster_size(self, n: int) -> int:
        if self.min_cluster_size is not None:
            return int(self.min_cluster_size)
        return max(20, math.ceil(0.002 * n))


@dataclass
class ClusterResult:
    labels: np.ndarray
    n_groups: int
    members: list
    mean_feature: np.ndarray
    mean_raw: np.ndarray
    bbox3d: np.ndarray | None = None

    @property
    def noise(self) -> np.ndarray:
        return self.labels == UNASSIGNED


def zscore(X: np.ndarray) -> np.ndarray:
    """Per-column standardization; constant columns become 0."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    flat = sd <= 1e-12 * np.maximum(np.abs(mu), 1.0)
    out = (X - mu) / np.where(flat, 1.0, sd)
    out[:, flat] = 0.0
    return out


def union_points(positions, colors, features, sem_dim: int = 6) -> np.ndarray:
    """Concatenate normalized S_pos (3), S_app (3) and PCA-reduced S_sem (sem_dim)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInput)
        reduced, _ = pca_reduce(features, sem_dim)
    return np.concatenate([zscore(positions), zscore(colors), zscore(reduced)], axis=1)


def group_stats(labels: np.ndarray, features: np.ndarray, n_groups: int):
    members = [np.flatnonzero(labels == g) for g in range(n_groups)]
    raw = np.zeros((n_groups, features.shape[1]))
    for g, m in enumerate(members):
        if len(m):
            raw[g] = features[m].astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / np.where(norm > 0, norm, 1.0)
    return members, unit, raw


def relabel_by_size(labels: np.ndarray) -> np.ndarray:
    """Map labels to 0..k-1 by descending member count (ties: smallest member index first)."""
    valid = labels >= 0
    groups = np.unique(labels[valid])
    counts = [(-(labels == g).sum(), int(np.flatnonzero(labels == g)[0]), g) for g in groups]
    mapping = {g: i for i, (_, _, g) in enumerate(sorted(counts))}
    out = np.full(len(labels), UNASSIGNED, dtype=np.int64)
    for g, i in mapping.items():
        out[labels == g] = i
    return out


def cluster_scene(scene: Scene, cfg: ClusterConfig = ClusterConfig(), *, write: bool = True) -> ClusterResult:
    """Group Gaussians in union space and (optionally) write ids into the scene.

    When HDBSCAN finds no cluster the scene's ids are left untouched.
    """
    g = scene.gaussians
    n = len(g)
    X = union_points(g.positions, g.colors, scene.idsf.features, cfg.sem_dim)
    mcs = min(cfg.resolve_min_cluster_size(n), n)
    res = hdbscan(X, mcs, min(cfg.min_samples, n))
    labels = relabel_by_size(res.labels)
    n_groups = res.n_clusters
    members, unit, raw = group_stats(labels, scene.idsf.features, n_groups)
    result = ClusterResult(labels, n_groups, members, unit, raw)
    if n_groups == 0:
        log.warning("clustering found no groups; keeping previous instance ids")
    elif write:
        scene.idsf.ids[:] = labels
    from ..eval import group_aabb  # eval depends on this module

    if n_groups:
        result.bbox3d = np.stack([group_aabb(result, scene, k).as_array() for k in range(n_groups)])
    return result


def knn_graph(positions: np.ndarray, k: int = 5) -> np.ndarray:
    """Exact Euclidean K nearest neighbors (self excluded, ties to the lower index)."""
    P = np.asarray(positions, dtype=np.float64)
    n = len(P)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    kq = min(n, k + 4)
    d, idx = cKDTree(P).query(P, k=kq)
    out = np.empty((n, k), dtype=np.int64)
    rows = np.arange(n)
    for i in rows:
        keep = idx[i] != i
        di, ii = d[i][keep], idx[i][keep]
        order = np.lexsort((ii, di))
        di, ii = di[order], ii[order]
        # a tie at the cut may hide equidistant lower-index points the tree did not return
        if len(di) < k or (kq < n and di[k - 1] == d[i][-1]):
            full = np.sqrt(((P - P[i]) ** 2).sum(axis=1))
            full[i] = np.inf
            ii = np.lexsort((rows, full))[:k]
        out[i] = ii[:k]
    return out
