"""View-independent querying (text, click) and segmentation / detection metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import UNASSIGNED, Camera, Scene


class EmptyGroupError(ValueError):
    pass


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("box min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    def as_array(self) -> np.ndarray:
        return np.stack([self.min, self.max])

    @classmethod
    def from_array(cls, arr) -> "Aabb":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[0], arr[1])


@dataclass
class QueryResult:
    group_id: int | None
    scores: np.ndarray
    mask: np.ndarray | None = None
    box: Aabb | None = None

    @property
    def detected(self) -> bool:
        return self.group_id is not None


def points_aabb(centers: np.ndarray, max_scales: np.ndarray, mad_k: float | None = 3.0) -> Aabb:
    """Box around Gaussian centers padded by 3 max-scale, after a MAD outlier guard."""
    centers = np.asarray(centers, dtype=np.float64)
    max_scales = np.asarray(max_scales, dtype=np.float64)
    if len(centers) == 0:
        raise EmptyGroupError("cannot box an empty group")
    if mad_k is not None and len(centers) > 2:
        dist = np.linalg.norm(centers - centers.mean(axis=0), axis=1)
        med = np.median(dist)
        mad = np.median(np.abs(dist - med))
        keep = dist - med <= mad_k * mad
        centers, max_scales = centers[keep], max_scales[keep]
    pad = 3.0 * max_scales[:, None]
    return Aabb((centers - pad).min(axis=0), (centers + pad).max(axis=0))


def group_aabb(cluster, scene: Scene, group_id: int) -> Aabb:
    members = cluster.members[group_id] if group_id < len(cluster.members) else np.zeros(0, np.int64)
    if len(members) == 0:
        raise EmptyGroupError(f"group {group_id} has no members")
    g = scene.gaussians
    return points_aabb(g.positions[members], g.scales[members].max(axis=1))


def iou3d(a: Aabb, b: Aabb) -> float:
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else float(np.all(a.min == b.min) and np.all(a.max == b.max))


def seg_miou(pred_masks, gt_masks) -> float:
    """Mean IoU over queries; a query where both masks are empty scores 1."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("need one predicted mask per ground-truth mask")
    ious = []
    for p, g in zip(pred_masks, gt_masks):
        p, g = np.asarray(p, bool), np.asarray(g, bool)
        if p.shape != g.shape:
            raise ValueError(f"mask resolution mismatch {p.shape} vs {g.shape}")
        union = np.logical_or(p, g).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


def detection_recall(preds: dict, gts: dict, threshold: float) -> float:
    """Fraction of ground-truth boxes whose query's top-1 predicted box has IoU >= threshold."""
    if not gts:
        return 0.0
    hits = sum(1 for q, gt in gts.items() if preds.get(q) is not None and iou3d(preds[q], gt) >= threshold)
    return hits / len(gts)


def box_miou(preds: dict, gts: dict) -> float:
    if not gts:
        return 0.0
    return float(np.mean([iou3d(preds[q], gt) if preds.get(q) is not None else 0.0 for q, gt in gts.items()]))


def relevancy_scores(text_embedding: np.ndarray, group_embeddings: np.ndarray) -> np.ndarray:
    """Cosine between the query and every group embedding (already in query space)."""
    t = np.asarray(text_embedding, dtype=np.float64)
    t = t / np.linalg.norm(t)
    G = np.asarray(group_embeddings, dtype=np.float64)
    norms = np.linalg.norm(G, axis=1)
    return (G @ t) / np.where(norms > 0, norms, 1.0)


def query_text(scene: Scene, cluster, text_embedding, project=None, cam: Camera | None = None, id_map=None) -> QueryResult:
    """Pick the group whose projected mean feature best matches ``text_embedding``.

    ``project`` maps raw D-dim group means into the query space (the trained
    head); scoring never looks at a camera.  With ``cam`` or ``id_map`` the 2D
    mask is materialized; the 3D box is always attached.
    """
    if cluster.n_groups == 0:
        return QueryResult(None, np.zeros(0))
    emb = cluster.mean_raw if project is None else project(cluster.mean_raw)
    scores = relevancy_scores(text_embedding, emb)
    winner = int(np.argmax(scores))
    result = QueryResult(winner, scores, box=group_aabb(cluster, scene, winner))
    if id_map is None and cam is not None:
        from .raster import render_id_map

        id_map, _ = render_id_map(scene, cam, n_groups=cluster.n_groups)
    if id_map is not None:
        result.mask = id_map == winner
    return result


def click_select(scene: Scene, cluster, cam: Camera, pixel, id_map=None, radius: float = 5.0) -> QueryResult:
    """Return the group rendered at ``pixel`` = (u, v), snapping to the nearest labeled pixel within ``radius``."""
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise IndexError(f"pixel {(u, v)} outside {cam.width}x{cam.height} image")
    if id_map is None:
        from .raster import render_id_map

        id_map, _ = render_id_map(scene, cam, n_groups=cluster.n_groups)
    scores = np.zeros(cluster.n_groups)
    gid = id_map[v, u]
    if gid == UNASSIGNED:
        ys, xs = np.nonzero(id_map != UNASSIGNED)
        if len(ys) == 0:
            return QueryResult(None, scores)
        d2 = (xs - u) ** 2 + (ys - v) ** 2
        k = int(np.lexsort((xs, ys, d2))[0])
        if d2[k] > radius**2:
            return QueryResult(None, scores)
        gid = id_map[ys[k], xs[k]]
    gid = int(gid)
    scores[gid] = 1.0
    return QueryResult(gid, scores, mask=id_map == gid, box=group_aabb(cluster, scene, gid))


def cross_view_consistency(points_by_view: list, id_maps: list, gt_maps: list, point_gt: np.ndarray) -> float:
    """Fraction of corresponding pixel pairs (same 3D point, two views) with the same predicted id.

    ``points_by_view[k]`` holds, per 3D point, its integer pixel (u, v) in view k
    or (-1, -1) if not visible.  A pair counts only where both pixels show the
    point's ground-truth object.
    """
    n_views = len(id_maps)
    same = total = 0
    for a in range(n_views):
        for b in range(a + 1, n_views):
            pa, pb = points_by_view[a], points_by_view[b]
            ok = (pa[:, 0] >= 0) & (pb[:, 0] >= 0)
            ua, va = pa[ok, 0], pa[ok, 1]
            ub, vb = pb[ok, 0], pb[ok, 1]
            truth = point_gt[ok]
            ok2 = (gt_maps[a][va, ua] == truth) & (gt_maps[b][vb, ub] == truth)
            ia = id_maps[a][va, ua][ok2]
            ib = id_maps[b][vb, ub][ok2]
            same += int(((ia == ib) & (ia != UNASSIGNED)).sum())
            total += int(ok2.sum())
    return same / total if total else 0.0
