"""Brute-force reference renderer for tests.

No tiles, no footprint culling, no early loop exit: every Gaussian is visited
for every pixel in global depth order, in float64.  The compositing rules
(alpha clamp, skip threshold, transmittance cutoff) are applied as masks so the
result obeys the same contract as :func:`semsplat.raster.render`.
"""

from __future__ import annotations

import numpy as np

from ..scene import BehindCamera, Camera, Scene, project_gaussian
from .kernels import ALPHA_MAX, ALPHA_MIN
from .rasterize import T_MIN
from .render import Channel, RenderOutput, id_map_from_weights, id_slots


def render_oracle(scene: Scene, cam: Camera, channels: Channel = Channel.COLOR, *, n_groups=None, t_min=T_MIN):
    if n_groups is None:
        n_groups = scene.idsf.n_groups()
    splats = []
    for i in range(len(scene.gaussians)):
        try:
            s = project_gaussian(scene.gaussians[i], cam)
        except BehindCamera:
            continue
        if s.depth > cam.far:
            continue
        splats.append((s.depth, i, s))
    # Python's sort is stable, so equal depths keep index order
    splats.sort(key=lambda item: item[0])

    H, W = cam.height, cam.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    active = np.ones((H, W), dtype=bool)
    want = {
        "color": Channel.COLOR in channels,
        "feature": Channel.FEATURE in channels,
        "depth": Channel.DEPTH in channels,
        "id": Channel.ID in channels,
    }
    acc = {
        "color": np.zeros((H, W, 3)),
        "feature": np.zeros((H, W, scene.idsf.dim if want["feature"] else 0)),
        "depth": np.zeros((H, W)),
        "id": np.zeros((H, W, n_groups + 1)),
    }
    slots = id_slots(scene.idsf.ids, n_groups)
    opacities = scene.gaussians.opacities
    for depth, i, s in splats:
        inv = np.linalg.inv(s.cov2d)
        dx = px - s.mean2d[0]
        dy = py - s.mean2d[1]
        power = -0.5 * (inv[0, 0] * dx * dx + inv[1, 1] * dy * dy) - inv[0, 1] * dx * dy
        alpha = np.minimum(ALPHA_MAX, opacities[i] * np.exp(power))
        hit = active & (alpha >= ALPHA_MIN)
        w = np.where(hit, T * alpha, 0.0)
        if want["color"]:
            acc["color"] += w[..., None] * scene.gaussians.colors[i].astype(np.float64)
        if want["feature"]:
            acc["feature"] += w[..., None] * scene.idsf.features[i].astype(np.float64)
        if want["depth"]:
            acc["depth"] += w * depth
        if want["id"]:
            acc["id"][..., slots[i]] += w
        T = np.where(hit, T * (1.0 - alpha), T)
        active &= T >= t_min

    out = RenderOutput(None, None, None, None, None, T, n_groups=n_groups)
    if want["color"]:
        out.color = acc["color"]
    if want["feature"]:
        out.feature = acc["feature"]
    if want["depth"]:
        out.depth = acc["depth"] + T * cam.far
    if want["id"]:
        weights = acc["id"]
        weights[..., n_groups] += T
        out.id_weights = weights
        out.id_map = id_map_from_weights(weights)
    return out
