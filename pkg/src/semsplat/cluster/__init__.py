from .hdbscan import CondensedTree, HdbscanResult, hdbscan
from .pca import DegenerateInput, captured_variance, pca_reduce
from .union import ClusterConfig, ClusterResult, cluster_scene, knn_graph, relabel_by_size, union_points, zscore

__all__ = [
    "ClusterConfig",
    "ClusterResult",
    "CondensedTree",
    "DegenerateInput",
    "HdbscanResult",
    "captured_variance",
    "cluster_scene",
    "hdbscan",
    "knn_graph",
    "pca_reduce",
    "relabel_by_size",
    "union_points",
    "zscore",
]
