"""Two-phase training: photometric reconstruction, then semantic bootstrapping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import sparse

from .. import rng
from ..cluster import ClusterConfig, ClusterResult, cluster_scene, knn_graph
from ..distill import ProjectionHead, TeacherMaps, extract_masks, instance_feature_map, instance_term, pixel_distill_loss
from ..raster import BlendView, render, rasterize_torch
from ..scene import UNASSIGNED, Camera, Scene, project_gaussians_torch
from .config import TrainConfig
from .losses import build_contrastive_groups, contrastive_loss, psnr, reconstruction_loss, smoothing_loss
from .optim import Adam, ParamGroup

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training diverged (non-finite loss)."""


def _check_finite(value: torch.Tensor, phase: str, it: int) -> None:
    if not bool(torch.isfinite(value)):
        raise NumericalError(f"{phase}: loss became {float(value.detach())} at iteration {it}")


@dataclass
class Phase1Report:
    losses: list = field(default_factory=list)
    psnr: float | None = None
    seconds: float = 0.0
    optimizer_state: dict = field(default_factory=dict)


def render_color_torch(params: dict, cam: Camera) -> torch.Tensor:
    """Differentiable H x W x 3 color render from raw Gaussian parameters."""
    with torch.no_grad():
        z = params["positions"] @ torch.as_tensor(cam.R[2], dtype=params["positions"].dtype) + cam.t[2]
        vis = torch.nonzero((z > cam.near) & (z <= cam.far)).squeeze(1)
    means, cov2d, depth = project_gaussians_torch(
        params["positions"][vis], params["rotations"][vis], torch.exp(params["log_scales"][vis]), cam
    )
    opacity = torch.sigmoid(params["opacity_logits"][vis])
    colors = params["colors"][vis]
    bg = torch.zeros(3, dtype=colors.dtype)
    img, _ = rasterize_torch(means, cov2d, opacity, colors, depth.detach(), bg, cam.width, cam.height)
    return img


def held_out_psnr(scene: Scene, cams, images) -> float:
    if not cams:
        return float("nan")
    return float(np.mean([psnr(render(scene, c).color, im) for c, im in zip(cams, images)]))


def phase1_reconstruct(scene: Scene, cfg: TrainConfig, eval_views=None, *, iters: int | None = None) -> tuple:
    """Fit positions, rotations, scales, opacities and colors to the training images.

    ``eval_views`` is an optional ``(cameras, images)`` pair of held-out views
    for the PSNR report.  Returns ``(scene, Phase1Report)``; ``scene`` is
    updated in place.
    """
    iters = cfg.phase1_iters if iters is None else iters
    g = scene.gaussians
    params = {
        "positions": torch.tensor(g.positions, dtype=torch.float64, requires_grad=True),
        "rotations": torch.tensor(g.rotations, dtype=torch.float64, requires_grad=True),
        "log_scales": torch.tensor(g.log_scales, dtype=torch.float64, requires_grad=True),
        "opacity_logits": torch.tensor(g.opacity_logits, dtype=torch.float64, requires_grad=True),
        "colors": torch.tensor(g.colors, dtype=torch.float64, requires_grad=True),
    }
    scale = {
        "positions": cfg.lr_scale_position,
        "rotations": cfg.lr_scale_rotation,
        "log_scales": cfg.lr_scale_scale,
        "opacity_logits": cfg.lr_scale_opacity,
        "colors": cfg.lr_scale_color,
    }
    opt = Adam([ParamGroup([p], cfg.lr_gauss * scale[k], k) for k, p in params.items()])
    targets = [torch.from_numpy(np.asarray(im, dtype=np.float64)) for im in scene.train_images]
    views = rng.stream(cfg.seed, "phase1-views")
    report = Phase1Report()
    t0 = time.perf_counter()
    for it in range(iters):
        k = int(views.integers(len(scene.cameras)))
        opt.zero_grad()
        img = render_color_torch(params, scene.cameras[k])
        loss = reconstruction_loss(img, targets[k], cfg.lambda_ssim)
        _check_finite(loss, "phase 1", it)
        loss.backward()
        opt.step()
        with torch.no_grad():
            params["rotations"] /= params["rotations"].norm(dim=1, keepdim=True)
        report.losses.append(float(loss.detach()))
    report.seconds = time.perf_counter() - t0
    report.optimizer_state = opt.export_state()
    with torch.no_grad():
        for k, p in params.items():
            setattr(g, k, p.numpy().astype(np.float32))
    g.normalize_rotations()
    if eval_views is not None:
        report.psnr = held_out_psnr(scene, *eval_views)
    return scene, report


class _SparseRender(torch.autograd.Function):
    """``W @ x`` for a fixed sparse blend matrix; the backward pass is ``W^T @ grad``."""

    @staticmethod
    def forward(ctx, x, W, Wt):
        ctx.Wt = Wt
        return torch.from_numpy(np.asarray(W @ x.detach().numpy()))

    @staticmethod
    def backward(ctx, grad):
        return torch.from_numpy(np.asarray(ctx.Wt @ grad.contiguous().numpy())), None, None


@dataclass
class _View:
    blend: BlendView
    W: sparse.csr_matrix
    Wt: sparse.csr_matrix
    teacher: TeacherMaps
    image: np.ndarray
    F_pix: torch.Tensor

    def render_features(self, features: torch.Tensor) -> torch.Tensor:
        cam = self.blend.cam
        out = _SparseRender.apply(features, self.W, self.Wt)
        return out.reshape(cam.height, cam.width, -1)


@dataclass
class Phase2Result:
    head: ProjectionHead
    cluster: ClusterResult | None
    passes: list = field(default_factory=list)  # ClusterResult per clustering pass
    records: list = field(default_factory=list)
    skipped_updates: int = 0
    optimizer_state: dict = field(default_factory=dict)


def init_features(n: int, dim: int, seed: int) -> np.ndarray:
    """Features drawn uniformly on the unit sphere."""
    f = rng.stream(seed, "feature-init").normal(size=(n, dim))
    return (f / np.linalg.norm(f, axis=1, keepdims=True)).astype(np.float32)


def phase2_bootstrap(
    scene: Scene,
    teachers: list,
    cfg: TrainConfig,
    *,
    iters: int | None = None,
    head: ProjectionHead | None = None,
    cluster_cfg: ClusterConfig = ClusterConfig(),
    log_file=None,
    on_cluster=None,
) -> tuple:
    """Alternate union-space clustering with multi-level distillation.

    Geometry and color stay frozen; only per-Gaussian features, the projection
    head and its downsampler are optimized.  ``teachers[k]`` serves training
    view k.  ``on_cluster(pass_index, scene, result)`` is called after every
    clustering pass.  Returns ``(scene, Phase2Result)``.
    """
    iters = cfg.phase2_iters if iters is None else iters
    n = len(scene)
    if len(teachers) != len(scene.cameras):
        raise ValueError("need one teacher per training view")
    D_t = teachers[0].dim
    stride = scene.cameras[0].height // teachers[0].pix_features.shape[0]
    if scene.idsf.dim != cfg.feature_dim or not np.any(scene.idsf.features):
        scene.idsf.features = init_features(n, cfg.feature_dim, cfg.seed)
        scene.idsf.ids[:] = UNASSIGNED
    head = head if head is not None else ProjectionHead(cfg.feature_dim, D_t, stride, cfg.seed).float()
    feats = torch.tensor(scene.idsf.features, dtype=torch.float32, requires_grad=True)
    opt = Adam([ParamGroup([feats], cfg.lr_gauss, "features"), ParamGroup(list(head.parameters()), cfg.lr_head, "head")])

    views = []
    for cam, teacher, img in zip(scene.cameras, teachers, scene.train_images):
        bv = BlendView.build(scene, cam)
        W = bv.weights.astype(np.float32).tocsr()
        views.append(_View(bv, W, W.T.tocsr(), teacher, img, torch.as_tensor(teacher.pix_features, dtype=torch.float32)))

    knn = knn_graph(scene.gaussians.positions, cfg.knn_k)
    T = cfg.sample_count(n)
    pick = rng.stream(cfg.seed, "phase2-views")
    sample_rng = rng.stream(cfg.seed, "phase2-samples")
    result = Phase2Result(head, None)
    n_groups = 0
    labels = np.full(n, UNASSIGNED, np.int64)
    ins_cache: dict = {}

    def recluster():
        nonlocal n_groups, labels, knn
        scene.idsf.features = feats.detach().numpy().copy()
        res = cluster_scene(scene, cluster_cfg)
        knn = knn_graph(scene.gaussians.positions, cfg.knn_k)
        if res.n_groups > 0:
            n_groups, labels = res.n_groups, res.labels
            result.cluster = res
        ins_cache.clear()
        result.passes.append(res)
        if on_cluster is not None:
            on_cluster(len(result.passes) - 1, scene, res)
        return res

    def instance_target(k: int):
        if k not in ins_cache:
            v = views[k]
            id_map = v.blend.id_map(labels, n_groups)
            masks = extract_masks(id_map, cfg.min_mask_area)
            F_ins = instance_feature_map(v.image, masks, v.teacher)
            ins_cache[k] = (masks, torch.as_tensor(F_ins, dtype=torch.float32), torch.as_tensor(masks.covered))
        return ins_cache[k]

    out = open(log_file, "w") if log_file is not None else None
    try:
        t0 = time.perf_counter()
        for it in range(iters):
            if it % cfg.recluster_every == 0:
                recluster()
            k = int(pick.integers(len(views)))
            v = views[k]
            opt.zero_grad()
            F_raw = v.render_features(feats)
            F = head(F_raw)
            F_hat = head.downsample(F)
            loss_f = pixel_distill_loss(F_hat, v.F_pix)
            masks = None
            if n_groups >= max(1, cfg.min_instance_groups) and cfg.gamma > 0:
                masks, F_ins, covered = instance_target(k)
                loss_f = loss_f + cfg.gamma * instance_term(F, F_ins, covered)
            loss = loss_f
            loss_s = loss_c = None
            if it % cfg.sparse_loss_every == 0:
                if cfg.lambda_s > 0:
                    loss_s = smoothing_loss(feats, knn, T, sample_rng)
                    loss = loss + cfg.lambda_s * loss_s
                if cfg.lambda_c > 0 and n_groups >= 2:
                    if masks is None:
                        masks = instance_target(k)[0]
                    groups = build_contrastive_groups(
                        labels, n_groups, feats, F_raw, masks, cfg.pos_sim_threshold, cfg.group_samples, sample_rng
                    )
                    loss_c = contrastive_loss(groups, cfg.tau)
                    loss = loss + cfg.lambda_c * loss_c
            _check_finite(loss, "phase 2", it)
            loss.backward()
            opt.step()
            rec = {
                "iter": it,
                "L_F": float(loss_f.detach()),
                "L_C": None if loss_c is None else float(loss_c.detach()),
                "L_S": None if loss_s is None else float(loss_s.detach()),
                "N_g": int(n_groups),
                "seconds": round(time.perf_counter() - t0, 6),
            }
            result.records.append(rec)
            if out is not None:
                out.write(json.dumps(rec) + "\n")
        recluster()
    finally:
        if out is not None:
            out.close()
    scene.idsf.features = feats.detach().numpy().copy()
    if n_groups > 0:
        scene.idsf.ids[:] = labels
    result.skipped_updates = opt.skipped
    result.optimizer_state = opt.export_state()
    return scene, result
