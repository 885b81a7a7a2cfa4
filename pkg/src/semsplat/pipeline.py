"""End-to-end synthetic runs: teachers from ground truth, training, and the metric report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterResult
from .distill import ProjectionHead, teacher_synthetic
from .eval import box_miou, cross_view_consistency, detection_recall, query_text, seg_miou
from .raster import render_id_map
from .scene import UNASSIGNED, Scene
from .synth import GroundTruth, PerturbConfig, SynthSpec, generate, perturb_for_training
from .train import TrainConfig, phase1_reconstruct, phase2_bootstrap

log = logging.getLogger(__name__)


def build_teachers(truth: GroundTruth, spec: SynthSpec, noise: float | None = None) -> list:
    noise = spec.teacher_noise if noise is None else noise
    return [
        teacher_synthetic(
            m, truth.class_embeddings, stride=spec.teacher_stride, noise=noise, seed=spec.seed, view=k,
            class_names=truth.class_names,
        )
        for k, m in enumerate(truth.train_id_maps)
    ]


def cluster_purity(labels: np.ndarray, object_ids: np.ndarray, n_objects: int) -> np.ndarray:
    """For each object, the share of its best-overlapping group that belongs to it (0 if it has no group)."""
    out = np.zeros(n_objects)
    valid = labels != UNASSIGNED
    for o in range(n_objects):
        hit = labels[valid & (object_ids == o)]
        if len(hit) == 0:
            continue
        g = np.bincount(hit).argmax()
        out[o] = np.mean(object_ids[labels == g] == o)
    return out


def point_pixels(scene: Scene, cams) -> list:
    """Integer pixel of every Gaussian center per camera, (-1, -1) where it falls outside or behind."""
    out = []
    for cam in cams:
        uv, z = cam.project_points(scene.gaussians.positions.astype(np.float64))
        px = np.rint(uv).astype(np.int64)
        ok = (z > cam.near) & (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)
        px[~ok] = -1
        out.append(px)
    return out


@dataclass
class EvalReport:
    summary: dict
    records: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines += [f"{k}={self.summary[k]!r}" for k in sorted(self.summary)]
        return "\n".join(lines) + "\n"


def evaluate(scene: Scene, cluster: ClusterResult | None, head: ProjectionHead | None, truth: GroundTruth) -> EvalReport:
    """Segmentation mIoU on held-out views, 3D box mIoU / recall, cross-view consistency and purity."""
    n_obj = len(truth.class_names)
    project = head.project_numpy if head is not None else None
    n_groups = cluster.n_groups if cluster is not None else 0
    id_maps = [render_id_map(scene, cam, n_groups)[0] for cam in truth.test_cameras]
    records, pred_masks, gt_masks, pred_boxes, gt_boxes = [], [], [], {}, {}
    for q, name in enumerate(truth.class_names):
        res = query_text(scene, cluster, truth.class_embeddings[q], project) if n_groups else None
        gid = res.group_id if res is not None else None
        ious = []
        for v in range(len(truth.test_cameras)):
            pred = id_maps[v] == gid if gid is not None else np.zeros_like(id_maps[v], bool)
            gt = truth.test_id_maps[v] == q
            pred_masks.append(pred)
            gt_masks.append(gt)
            ious.append(seg_miou([pred], [gt]))
        pred_boxes[name] = res.box if res is not None else None
        gt_boxes[name] = truth.box(q)
        records.append(
            {
                "query": name,
                "group": gid,
                "scores": [round(float(s), 6) for s in (res.scores if res is not None else [])],
                "mask_iou": [round(float(i), 6) for i in ious],
                "box_iou": round(float(box_miou({name: pred_boxes[name]}, {name: gt_boxes[name]})), 6),
                "box": None if res is None else np.round(res.box.as_array(), 6).tolist(),
            }
        )
    labels = cluster.labels if cluster is not None else np.full(len(scene), UNASSIGNED)
    purity = cluster_purity(labels, truth.object_ids, n_obj)
    consistency = cross_view_consistency(
        point_pixels(scene, truth.test_cameras), id_maps, list(truth.test_id_maps), truth.object_ids
    )
    summary = {
        "seg_miou": round(seg_miou(pred_masks, gt_masks), 6),
        "box_miou": round(box_miou(pred_boxes, gt_boxes), 6),
        "recall_25": round(detection_recall(pred_boxes, gt_boxes, 0.25), 6),
        "recall_50": round(detection_recall(pred_boxes, gt_boxes, 0.5), 6),
        "cross_view_consistency": round(consistency, 6),
        "n_groups": int(n_groups),
        "min_purity": round(float(purity.min()) if n_obj else 0.0, 6),
    }
    return EvalReport(summary, records)


def consistency_monitor(truth: GroundTruth, cams=None, maps=None):
    """An ``on_cluster`` callback recording cross-view id consistency after every clustering pass."""
    cams = truth.test_cameras if cams is None else cams
    maps = list(truth.test_id_maps) if maps is None else maps
    history = []

    def callback(pass_index, scene, res):
        if res.n_groups == 0 and history:
            history.append(history[-1])
            return
        ids = [render_id_map(scene, c, max(res.n_groups, 1))[0] for c in cams]
        history.append(cross_view_consistency(point_pixels(scene, cams), ids, maps, truth.object_ids))

    callback.history = history
    return callback


@dataclass
class RunResult:
    scene: Scene
    truth: GroundTruth
    cluster: ClusterResult | None
    head: ProjectionHead
    psnr: float
    report: EvalReport
    consistency: list
    records: list


def run_phase1(spec: SynthSpec, cfg: TrainConfig, iters: int | None = None):
    scene, truth = generate(spec, cfg.feature_dim)
    start = perturb_for_training(scene, truth, PerturbConfig(seed=spec.seed), spec.object_radius)
    trained, rep = phase1_reconstruct(start, cfg, (truth.test_cameras, truth.test_images), iters=iters)
    return trained, truth, rep


def run_phase2(scene: Scene, truth: GroundTruth, spec: SynthSpec, cfg: TrainConfig, iters: int | None = None, noise=None, log_file=None) -> RunResult:
    scene = scene.copy()
    monitor = consistency_monitor(truth)
    teachers = build_teachers(truth, spec, noise)
    scene, res = phase2_bootstrap(scene, teachers, cfg, iters=iters, on_cluster=monitor, log_file=log_file)
    report = evaluate(scene, res.cluster, res.head, truth)
    return RunResult(scene, truth, res.cluster, res.head, float("nan"), report, monitor.history, res.records)


def run_pipeline(spec: SynthSpec, cfg: TrainConfig, noise=None, log_file=None) -> RunResult:
    trained, truth, rep = run_phase1(spec, cfg)
    out = run_phase2(trained, truth, spec, cfg, noise=noise, log_file=log_file)
    out.report.summary["psnr"] = round(float(rep.psnr), 4)
    return replace(out, psnr=float(rep.psnr))


__all__ = [
    "EvalReport",
    "RunResult",
    "build_teachers",
    "cluster_purity",
    "consistency_monitor",
    "evaluate",
    "point_pixels",
    "run_phase1",
    "run_phase2",
    "run_pipeline",
]
