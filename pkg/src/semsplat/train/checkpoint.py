"""Checkpoint directories: scene container, head weights, optimizer moments, clustering."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .. import io
from ..cluster import ClusterResult
from ..cluster.union import group_stats
from ..distill import ProjectionHead
from ..scene import UNASSIGNED, Scene


def save_checkpoint(directory, scene: Scene, head: ProjectionHead | None = None, cluster: ClusterResult | None = None,
                    optimizer_state: dict | None = None, info: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save_scene(scene, d / "scene.idsf")
    if head is not None:
        io.save_tensors(d / "head", {k.replace(".", "_"): v.detach().numpy() for k, v in head.state_dict().items()})
        (d / "head" / "shape.txt").write_text(
            f"dim={head.mlp[0].in_features}\nteacher_dim={head.mlp[2].out_features}\nstride={head.stride}\n"
        )
    if cluster is not None:
        io.save_tensors(d / "cluster", {"labels": cluster.labels, "mean_raw": cluster.mean_raw, "mean_feature": cluster.mean_feature})
    if optimizer_state:
        io.save_tensors(d / "optimizer", optimizer_state)
    if info:
        (d / "info.txt").write_text("".join(f"{k}={v}\n" for k, v in info.items()))
    return d


def load_head(directory) -> ProjectionHead | None:
    d = Path(directory) / "head"
    if not d.exists():
        return None
    shape = dict(line.split("=", 1) for line in (d / "shape.txt").read_text().splitlines() if "=" in line)
    head = ProjectionHead(int(shape["dim"]), int(shape["teacher_dim"]), int(shape["stride"]))
    tensors = io.load_tensors(d)
    state = {k: torch.from_numpy(tensors[k.replace(".", "_")].copy()) for k in head.state_dict()}
    head.load_state_dict(state)
    return head.to(state["mlp.0.weight"].dtype)


def load_cluster(directory, scene: Scene) -> ClusterResult | None:
    d = Path(directory) / "cluster"
    if not d.exists():
        return None
    t = io.load_tensors(d)
    labels = t["labels"].astype(np.int64)
    n_groups = int(labels[labels != UNASSIGNED].max()) + 1 if np.any(labels != UNASSIGNED) else 0
    members, unit, raw = group_stats(labels, scene.idsf.features, n_groups)
    return ClusterResult(labels, n_groups, members, t["mean_feature"], t["mean_raw"])


def load_checkpoint(directory):
    """``(scene, head, cluster, info)``; missing parts come back as None / empty."""
    d = Path(directory)
    scene = io.load_scene(d / "scene.idsf")
    info = {}
    if (d / "info.txt").exists():
        info = dict(line.split("=", 1) for line in (d / "info.txt").read_text().splitlines() if "=" in line)
    return scene, load_head(d), load_cluster(d, scene), info
