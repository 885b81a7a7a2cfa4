"""Scene-level rendering of color, semantic features, instance ids and depth."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..scene import UNASSIGNED, Camera, Scene, project_scene
from .rasterize import (
    T_MIN,
    RasterState,
    StaleStateError,
    blend_matrix,
    rasterize,
    rasterize_backward,
    rasterize_ids,
    splat_fingerprint,
)

DENSE_ID_LIMIT = 512
SPARSE_ID_SLOTS = 8


class Channel(enum.Flag):
    COLOR = enum.auto()
    FEATURE = enum.auto()
    ID = enum.auto()
    DEPTH = enum.auto()
    ALL = COLOR | FEATURE | ID | DEPTH


@dataclass
class RenderOutput:
    color: np.ndarray | None
    feature: np.ndarray | None
    id_weights: np.ndarray | None
    id_map: np.ndarray | None
    depth: np.ndarray | None
    final_transmittance: np.ndarray
    n_groups: int = 0
    visible: np.ndarray | None = None
    state: RasterState | None = None
    layout: dict | None = None

    @property
    def labeled(self) -> np.ndarray:
        return self.id_map != UNASSIGNED


@dataclass
class RenderGrads:
    """Per-visible-Gaussian gradients; row k belongs to Gaussian ``visible[k]``."""

    visible: np.ndarray
    d_color: np.ndarray | None
    d_feature: np.ndarray | None
    d_opacity: np.ndarray
    d_mean2d: np.ndarray
    d_cov2d: np.ndarray


def id_slots(ids: np.ndarray, n_groups: int) -> np.ndarray:
    """Map instance ids to channel slots; UNASSIGNED (and anything >= n_groups) -> n_groups."""
    ids = np.asarray(ids, dtype=np.int64)
    return np.where((ids >= 0) & (ids < n_groups), ids, n_groups)


def one_hot_ids(ids: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros((len(ids), n_groups + 1))
    out[np.arange(len(ids)), id_slots(ids, n_groups)] = 1.0
    return out


def id_map_from_weights(weights: np.ndarray) -> np.ndarray:
    """Argmax over channels (lower index wins ties); the last channel means unlabeled."""
    n_groups = weights.shape[-1] - 1
    arg = np.argmax(weights, axis=-1).astype(np.int64)
    return np.where(arg == n_groups, UNASSIGNED, arg)


def _channel_block(scene: Scene, cam: Camera, channels: Channel, visible, depth, n_groups):
    """Assemble the per-splat value matrix and background for the requested channels."""
    cols, bgs, layout, pos = [], [], {}, 0

    def add(name, block, bg):
        nonlocal pos
        cols.append(block)
        bgs.append(bg)
        layout[name] = slice(pos, pos + block.shape[1])
        pos += block.shape[1]

    if Channel.COLOR in channels:
        add("color", scene.gaussians.colors[visible].astype(np.float64), np.zeros(3))
    if Channel.FEATURE in channels:
        D = scene.idsf.dim
        add("feature", scene.idsf.features[visible].astype(np.float64), np.zeros(D))
    if Channel.DEPTH in channels:
        add("depth", depth[visible][:, None], np.array([cam.far]))
    if Channel.ID in channels and n_groups <= DENSE_ID_LIMIT:
        bg = np.zeros(n_groups + 1)
        bg[n_groups] = 1.0
        add("id", one_hot_ids(scene.idsf.ids[visible], n_groups), bg)
    n = int(visible.sum())
    values = np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))
    background = np.concatenate(bgs) if bgs else np.zeros(0)
    return values, background, layout


def render(scene: Scene, cam: Camera, channels: Channel = Channel.COLOR, *, n_groups=None, t_min=T_MIN) -> RenderOutput:
    """Tile-based render; all requested channels share a single traversal."""
    if n_groups is None:
        n_groups = scene.idsf.n_groups()
    means, cov2d, depth, visible = project_scene(scene.gaussians, cam)
    opacity = scene.gaussians.opacities
    values, background, layout = _channel_block(scene, cam, channels, visible, depth, n_groups)
    image, state = rasterize(
        means[visible], cov2d[visible], opacity[visible], depth[visible], values, background, cam.width, cam.height, t_min
    )
    out = RenderOutput(
        color=image[..., layout["color"]] if "color" in layout else None,
        feature=image[..., layout["feature"]] if "feature" in layout else None,
        id_weights=None,
        id_map=None,
        depth=image[..., layout["depth"]][..., 0] if "depth" in layout else None,
        final_transmittance=state.final_t,
        n_groups=n_groups,
        visible=np.flatnonzero(visible),
        state=state,
        layout=layout,
    )
    if Channel.ID in channels:
        if "id" in layout:
            out.id_weights = image[..., layout["id"]]
            out.id_map = id_map_from_weights(out.id_weights)
        else:
            slots = rasterize_ids(state, id_slots(scene.idsf.ids[visible], n_groups), n_groups, SPARSE_ID_SLOTS)
            out.id_map = np.where(slots == n_groups, UNASSIGNED, slots)
    return out


def render_id_map(scene: Scene, cam: Camera, n_groups=None):
    out = render(scene, cam, Channel.ID, n_groups=n_groups)
    return out.id_map, out.id_weights


def render_backward(scene: Scene, cam: Camera, output: RenderOutput, upstream: dict) -> RenderGrads:
    """Gradients of sum(upstream[k] * output.k) for k in {"color", "feature"}.

    ``output`` must come from :func:`render` on the same scene and camera.
    """
    if output.state is None:
        raise StaleStateError("render output carries no forward state")
    means, cov2d, depth, visible = project_scene(scene.gaussians, cam)
    opacity = scene.gaussians.opacities
    if not np.array_equal(np.flatnonzero(visible), output.visible) or splat_fingerprint(
        means[visible], cov2d[visible], opacity[visible], depth[visible]
    ) != output.state.fingerprint:
        raise StaleStateError("scene or camera changed since the forward pass")
    names = [k for k in ("color", "feature") if k in upstream and upstream[k] is not None]
    for k in names:
        if k not in output.layout:
            raise ValueError(f"channel {k!r} was not rendered")
    blocks = {"color": lambda: scene.gaussians.colors[visible], "feature": lambda: scene.idsf.features[visible]}
    values = np.concatenate([blocks[k]().astype(np.float64) for k in names], axis=1) if names else np.zeros((visible.sum(), 0))
    grads = [np.asarray(upstream[k], dtype=np.float64) for k in names]
    up = np.concatenate(grads, axis=-1) if names else np.zeros((cam.height, cam.width, 0))
    d_values, d_opacity, d_means, d_cov = rasterize_backward(output.state, values, np.zeros(values.shape[1]), up)
    split, pos = {}, 0
    for k in names:
        width = 3 if k == "color" else scene.idsf.dim
        split[k] = d_values[:, pos : pos + width]
        pos += width
    return RenderGrads(
        visible=output.visible,
        d_color=split.get("color"),
        d_feature=split.get("feature"),
        d_opacity=d_opacity,
        d_mean2d=d_means,
        d_cov2d=d_cov,
    )


@dataclass
class BlendView:
    """Frozen-geometry render of one camera as a sparse linear map.

    ``weights`` is (H*W) x N over *all* Gaussians (columns of culled splats
    are empty), so any per-Gaussian channel renders as ``weights @ values``.
    Valid only while positions, shapes and opacities stay fixed.
    """

    cam: Camera
    weights: object
    final_transmittance: np.ndarray

    @classmethod
    def build(cls, scene: Scene, cam: Camera, t_min=T_MIN) -> "BlendView":
        means, cov2d, depth, visible = project_scene(scene.gaussians, cam)
        idx = np.flatnonzero(visible)
        _, state = rasterize(
            means[idx], cov2d[idx], scene.gaussians.opacities[idx], depth[idx], np.zeros((len(idx), 0)), np.zeros(0),
            cam.width, cam.height, t_min,
        )
        local = blend_matrix(state).tocoo()
        from scipy import sparse

        W = sparse.csr_matrix((local.data, (local.row, idx[local.col])), shape=(local.shape[0], len(scene.gaussians)))
        return cls(cam, W, state.final_t)

    def composite(self, values: np.ndarray) -> np.ndarray:
        """H x W x C composite over a zero background."""
        out = self.weights @ np.asarray(values, dtype=np.float64)
        return out.reshape(self.cam.height, self.cam.width, -1)

    def id_map(self, ids: np.ndarray, n_groups: int) -> np.ndarray:
        weights = self.composite(one_hot_ids(ids, n_groups))
        weights[..., n_groups] += self.final_transmittance
        return id_map_from_weights(weights)
