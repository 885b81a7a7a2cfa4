"""HDBSCAN: mutual-reachability MST, single-linkage hierarchy, condensed tree, EOM selection.

Conventions follow the reference ``hdbscan`` package: the core distance of a
point is the distance to its ``min_samples``-th nearest neighbor counting the
point itself, and lambda = 1 / distance.  Noise points get label -1.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class CondensedTree:
    """Rows ``(parent, child, lambda, child_size)``; ids < n_points are points, others clusters."""

    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def root(self) -> int:
        return self.n_points

    def clusters(self) -> np.ndarray:
        ids = self.child[self.child >= self.n_points]
        return np.concatenate([[self.root], np.sort(ids)]).astype(np.int64)

    def birth(self, cluster: int) -> float:
        if cluster == self.root:
            return 0.0
        return float(self.lambda_val[self.child == cluster][0])

    def members(self, cluster: int) -> np.ndarray:
        """All points in the subtree of ``cluster``."""
        out, stack = [], [cluster]
        while stack:
            c = stack.pop()
            rows = self.parent == c
            kids = self.child[rows]
            out.extend(kids[kids < self.n_points].tolist())
            stack.extend(kids[kids >= self.n_points].tolist())
        return np.sort(np.asarray(out, dtype=np.int64))


@dataclass
class HdbscanResult:
    labels: np.ndarray
    tree: CondensedTree
    stability: dict = field(default_factory=dict)
    selected: list = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.selected)


def core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    k = min(int(min_samples), len(points))
    _, idx = cKDTree(points).query(points, k=k)
    idx = np.asarray(idx).reshape(len(points), -1)[:, k - 1]
    # same arithmetic as the MST distances, so equal geometry gives bit-equal weights
    return np.sqrt(((points - points[idx]) ** 2).sum(axis=1))


def mutual_reachability_mst(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Prim's algorithm over the implicit dense mutual-reachability graph.

    Returns an (N-1) x 3 array of ``(a, b, weight)`` rows.
    """
    n = len(points)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    src = np.zeros(n, dtype=np.int64)
    edges = np.empty((max(n - 1, 0), 3))
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        d = np.sqrt(((points - points[current]) ** 2).sum(axis=1))
        mr = np.maximum(np.maximum(d, core), core[current])
        better = ~in_tree & (mr < best)
        best[better] = mr[better]
        src[better] = current
        nxt = int(np.argmin(np.where(in_tree, np.inf, best)))
        edges[step] = (src[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Scipy-style linkage rows ``(left, right, distance, size)`` from MST edges."""
    order = np.argsort(mst[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    Z = np.empty((n - 1, 4))
    for k, e in enumerate(order):
        a, b, w = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        new = n + k
        parent[ra] = parent[rb] = new
        size[new] = size[ra] + size[rb]
        Z[k] = (ra, rb, w, size[new])
    return Z


def condense_tree(Z: np.ndarray, n: int, min_cluster_size: int) -> CondensedTree:
    root = 2 * n - 2

    def node_size(x):
        return 1 if x < n else int(Z[x - n, 3])

    def leaves(x):
        out, stack = [], [x]
        while stack:
            y = stack.pop()
            if y < n:
                out.append(y)
            else:
                stack.extend((int(Z[y - n, 0]), int(Z[y - n, 1])))
        return out

    def split_parts(x, dist):
        # merges tied at the same distance form one multi-way split, so the
        # tree does not depend on the order in which tied edges were merged
        out, stack = [], [int(Z[x - n, 0]), int(Z[x - n, 1])]
        while stack:
            y = stack.pop()
            if y >= n and Z[y - n, 2] == dist:
                stack.extend((int(Z[y - n, 0]), int(Z[y - n, 1])))
            else:
                out.append(y)
        return sorted(out)

    relabel = {root: n}
    next_label = n + 1
    rows = []
    queue = deque([root])
    while queue:
        node = queue.popleft()
        if node < n:
            continue
        dist = Z[node - n, 2]
        lam = 1.0 / dist if dist > 0 else np.inf
        parts = split_parts(node, dist)
        here = relabel[node]
        big = [kid for kid in parts if node_size(kid) >= min_cluster_size]
        if len(big) >= 2:
            for kid in parts:
                if node_size(kid) >= min_cluster_size:
                    relabel[kid] = next_label
                    rows.append((here, next_label, lam, node_size(kid)))
                    next_label += 1
                    queue.append(kid)
                else:
                    rows.extend((here, p, lam, 1) for p in leaves(kid))
        else:
            for kid in parts:
                if kid in big:
                    relabel[kid] = here
                    queue.append(kid)
                else:
                    rows.extend((here, p, lam, 1) for p in leaves(kid))
    if n == 1:
        rows.append((n, 0, np.inf, 1))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return CondensedTree(
        parent=arr[:, 0].astype(np.int64),
        child=arr[:, 1].astype(np.int64),
        lambda_val=arr[:, 2],
        child_size=arr[:, 3].astype(np.int64),
        n_points=n,
    )


def cluster_stabilities(tree: CondensedTree) -> dict:
    """Excess of mass of every cluster: sum over leaving points of (lambda_p - lambda_birth).

    One term per point (a child cluster contributes its size in copies), summed
    exactly, so the value does not depend on how the tree groups the points.
    """
    out = {}
    for c in tree.clusters():
        birth = tree.birth(int(c))
        rows = tree.parent == c
        terms = []
        for lam, size in zip(tree.lambda_val[rows], tree.child_size[rows]):
            if lam != birth:
                terms.extend([lam - birth] * int(size))
        out[int(c)] = math.fsum(terms)
    return out


def select_eom(tree: CondensedTree, stability: dict, allow_single_cluster: bool = True) -> list:
    clusters = tree.clusters()
    prop = dict(stability)
    is_cluster = {int(c): True for c in clusters}
    kids = {int(c): [] for c in clusters}
    for p, ch in zip(tree.parent, tree.child):
        if ch >= tree.n_points:
            kids[int(p)].append(int(ch))
    for c in sorted(clusters, reverse=True):
        c = int(c)
        if c == tree.root and not allow_single_cluster:
            is_cluster[c] = False
            continue
        subtree = math.fsum(prop[k] for k in kids[c]) if kids[c] else 0.0
        if kids[c] and subtree > prop[c]:
            is_cluster[c] = False
            prop[c] = subtree
        else:
            stack = list(kids[c])
            while stack:
                d = stack.pop()
                is_cluster[d] = False
                stack.extend(kids[d])
    return sorted(c for c, keep in is_cluster.items() if keep)


def label_points(tree: CondensedTree, selected: list) -> np.ndarray:
    n = tree.n_points
    owner = {}
    for c in tree.clusters():
        c = int(c)
        if c in selected:
            owner[c] = c
        elif c == tree.root:
            owner[c] = None
        else:
            owner[c] = owner[int(tree.parent[tree.child == c][0])]
    label_of = {c: i for i, c in enumerate(selected)}
    labels = np.full(n, -1, dtype=np.int64)
    point_rows = tree.child < n
    for p, par in zip(tree.child[point_rows], tree.parent[point_rows]):
        o = owner[int(par)]
        if o is not None:
            labels[p] = label_of[o]
    return labels


def hdbscan(points: np.ndarray, min_cluster_size: int, min_samples: int, allow_single_cluster: bool = True) -> HdbscanResult:
    """Cluster ``points``; returns labels in {-1, 0, ..., k-1} plus the condensed tree."""
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < min_cluster_size:
        raise ValueError(f"need at least min_cluster_size={min_cluster_size} points, got {n}")
    if n == 1:
        tree = condense_tree(np.zeros((0, 4)), 1, min_cluster_size)
    else:
        core = core_distances(X, min_samples)
        Z = single_linkage(mutual_reachability_mst(X, core), n)
        tree = condense_tree(Z, n, min_cluster_size)
    stability = cluster_stabilities(tree)
    selected = select_eom(tree, stability, allow_single_cluster)
    return HdbscanResult(label_points(tree, selected), tree, stability, selected)
