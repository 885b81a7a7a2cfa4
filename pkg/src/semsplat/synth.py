"""Synthetic desk-scale benchmark: blob objects, ring cameras, ground-truth ids, class embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import io, rng
from .eval import Aabb, points_aabb
from .raster import Channel, render, render_oracle
from .scene import UNASSIGNED, Camera, Gaussians, IdsField, Scene, logit

PALETTE = np.array(
    [
        [0.90, 0.20, 0.15],
        [0.15, 0.55, 0.90],
        [0.20, 0.80, 0.25],
        [0.95, 0.80, 0.15],
        [0.70, 0.25, 0.85],
        [0.95, 0.50, 0.10],
        [0.15, 0.80, 0.80],
        [0.85, 0.85, 0.85],
        [0.55, 0.35, 0.20],
        [0.90, 0.45, 0.65],
        [0.40, 0.45, 0.10],
        [0.25, 0.25, 0.60],
        [0.60, 0.90, 0.50],
        [0.50, 0.10, 0.25],
        [0.10, 0.40, 0.35],
        [0.75, 0.70, 0.50],
    ]
)

CLASS_NAMES = [
    "mug", "book", "lamp", "plant", "phone", "clock", "bottle", "box",
    "ball", "shoe", "bowl", "cup", "pen", "vase", "toy", "hat",
]


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_objects: int = 4
    gaussians_per_object: int = 250
    object_radius: float = 0.4  # RMS distance of member centers from the object center
    placement_radius: float = 1.5
    min_scale: float = 0.05
    max_scale: float = 0.11
    color_jitter: float = 0.1
    teacher_dim: int = 32
    n_train_views: int = 24
    n_test_views: int = 6
    image_size: int = 128
    teacher_stride: int = 4
    camera_distance: float = 4.5
    fov_deg: float = 55.0
    teacher_noise: float = 0.0
    hard: bool = False
    seed: int = 42

    def __post_init__(self):
        if not 1 <= self.n_objects <= 16:
            raise ValueError("n_objects must be in 1..16")
        if not 1 <= self.gaussians_per_object <= 500:
            raise ValueError("gaussians_per_object must be in 1..500")
        if self.image_size % self.teacher_stride:
            raise ValueError("image_size must be divisible by teacher_stride")
        if self.teacher_dim < self.n_objects:
            raise ValueError("teacher_dim must be at least n_objects")
        if self.n_train_views < 1 or self.n_test_views < 0:
            raise ValueError("need at least one training view")

    @property
    def teacher_size(self) -> int:
        return self.image_size // self.teacher_stride

    @property
    def min_separation(self) -> float:
        return (2.0 if self.hard else 4.0) * self.object_radius


@dataclass
class GroundTruth:
    object_ids: np.ndarray  # per Gaussian
    class_names: list
    class_embeddings: np.ndarray  # n_objects x D_t, unit rows
    boxes: np.ndarray  # n_objects x 2 x 3
    train_id_maps: np.ndarray  # V x H x W, UNASSIGNED for background
    test_cameras: list
    test_images: list
    test_id_maps: np.ndarray
    centers: np.ndarray

    def box(self, k: int) -> Aabb:
        return Aabb.from_array(self.boxes[k])


def class_embeddings(n: int, dim: int, seed: int) -> np.ndarray:
    """Random unit vectors made exactly orthogonal with a QR step."""
    A = rng.stream(seed, "class-embeddings").normal(size=(dim, n))
    Q, Rm = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(Rm))
    return np.ascontiguousarray(Q.T)


def _random_rotations(g: np.random.Generator, n: int) -> np.ndarray:
    q = g.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _place_centers(spec: SynthSpec, g: np.random.Generator, attempts: int = 1000) -> np.ndarray:
    """Rejection sampling of object centers on the desk plane.

    Each attempt places objects one by one (a few local retries each) and
    restarts from scratch when an object does not fit.
    """
    sep = spec.min_separation
    for _ in range(attempts):
        xy = []
        for _ in range(spec.n_objects):
            for _ in range(20):
                r = spec.placement_radius * np.sqrt(g.uniform())
                th = g.uniform(0, 2 * np.pi)
                p = np.array([r * np.cos(th), r * np.sin(th)])
                if all(np.linalg.norm(p - q) >= sep for q in xy):
                    xy.append(p)
                    break
            else:
                break
        if len(xy) == spec.n_objects:
            xy = np.asarray(xy).reshape(-1, 2)
            return np.concatenate([xy, np.full((spec.n_objects, 1), spec.object_radius)], axis=1)
    raise PlacementError(f"could not place {spec.n_objects} objects {sep:.3g} apart within radius {spec.placement_radius}")


def make_cameras(spec: SynthSpec):
    size, dist = spec.image_size, spec.camera_distance
    target = np.array([0.0, 0.0, spec.object_radius])

    def ring(n, elevations, offset):
        cams = []
        for k in range(n):
            az = 2 * np.pi * (k + offset) / n
            el = np.deg2rad(elevations[k % len(elevations)])
            eye = target + dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            cams.append(Camera.look_at(eye, target, width=size, height=size, fov_deg=spec.fov_deg))
        return cams

    return ring(spec.n_train_views, (25.0, 40.0, 55.0), 0.0), ring(spec.n_test_views, (32.0, 48.0), 0.5)


def _id_scene(scene: Scene, object_ids: np.ndarray) -> Scene:
    idsf = IdsField(np.zeros((len(scene), 1), np.float32), object_ids.astype(np.int64))
    return Scene(scene.gaussians, idsf)


def gt_id_map(scene: Scene, object_ids: np.ndarray, n_objects: int, cam: Camera) -> np.ndarray:
    return render_oracle(_id_scene(scene, object_ids), cam, Channel.ID, n_groups=n_objects).id_map


def generate(spec: SynthSpec = SynthSpec(), feature_dim: int = 128):
    """Build the ground-truth scene and everything the benchmark knows about it."""
    g = rng.stream(spec.seed, "synth-objects")
    centers = _place_centers(spec, g)
    n_per = spec.gaussians_per_object
    pos, rot, scl, opa, col, obj = [], [], [], [], [], []
    colors = PALETTE[: spec.n_objects].copy()
    if spec.hard and spec.n_objects >= 2:
        colors[1] = colors[0]
    for k in range(spec.n_objects):
        axes = g.uniform(0.6, 1.4, size=3)
        axes *= spec.object_radius / np.sqrt((axes**2).sum())
        R = np.linalg.qr(g.normal(size=(3, 3)))[0]
        local = g.normal(size=(n_per, 3)) * axes
        pos.append(centers[k] + local @ R.T)
        rot.append(_random_rotations(g, n_per))
        scl.append(g.uniform(spec.min_scale, spec.max_scale, size=(n_per, 3)))
        opa.append(g.uniform(0.6, 0.95, size=n_per))
        jitter = 1.0 + g.uniform(-spec.color_jitter, spec.color_jitter, size=(n_per, 3))
        col.append(np.clip(colors[k] * jitter, 0.0, 1.0))
        obj.append(np.full(n_per, k, np.int64))
    gaussians = Gaussians.from_values(
        np.concatenate(pos), np.concatenate(rot), np.concatenate(scl), np.concatenate(opa), np.concatenate(col)
    )
    object_ids = np.concatenate(obj)
    idsf = IdsField.empty(len(gaussians), feature_dim)
    train_cams, test_cams = make_cameras(spec)
    scene = Scene(gaussians, idsf, train_cams, [np.zeros((spec.image_size, spec.image_size, 3))] * len(train_cams))
    scene.train_images = [render(scene, c).color.astype(np.float32) for c in train_cams]
    test_images = [render(scene, c).color.astype(np.float32) for c in test_cams]
    train_maps = np.stack([gt_id_map(scene, object_ids, spec.n_objects, c) for c in train_cams])
    test_maps = (
        np.stack([gt_id_map(scene, object_ids, spec.n_objects, c) for c in test_cams])
        if test_cams
        else np.zeros((0, spec.image_size, spec.image_size), np.int64)
    )
    scales = gaussians.scales.max(axis=1)
    boxes = np.stack(
        [points_aabb(gaussians.positions[object_ids == k], scales[object_ids == k], mad_k=None).as_array() for k in range(spec.n_objects)]
    )
    truth = GroundTruth(
        object_ids=object_ids,
        class_names=CLASS_NAMES[: spec.n_objects],
        class_embeddings=class_embeddings(spec.n_objects, spec.teacher_dim, spec.seed),
        boxes=boxes,
        train_id_maps=train_maps,
        test_cameras=test_cams,
        test_images=test_images,
        test_id_maps=test_maps,
        centers=centers,
    )
    return scene, truth


@dataclass(frozen=True)
class PerturbConfig:
    position_jitter: float = 0.05  # times the object radius
    color_jitter: float = 0.05
    reset_opacity: float | None = 0.5
    seed: int = 42


def perturb_for_training(scene: Scene, truth: GroundTruth, cfg: PerturbConfig = PerturbConfig(), object_radius: float = 0.4) -> Scene:
    """The training start state: jittered geometry and color, flat opacity, erased semantics."""
    g = rng.stream(cfg.seed, "perturb")
    src = scene.gaussians
    n = len(src)
    positions = src.positions.astype(np.float64) + g.normal(size=(n, 3)) * cfg.position_jitter * object_radius
    colors = np.clip(src.colors.astype(np.float64) + g.normal(size=(n, 3)) * cfg.color_jitter, 0.0, 1.0)
    if cfg.position_jitter == 0:
        positions = src.positions
    if cfg.color_jitter == 0:
        colors = src.colors
    opacity_logits = src.opacity_logits if cfg.reset_opacity is None else np.full(n, logit(cfg.reset_opacity))
    gaussians = Gaussians(positions, src.rotations.copy(), src.log_scales.copy(), opacity_logits, colors)
    idsf = IdsField.empty(n, scene.idsf.dim)
    return Scene(gaussians, idsf, list(scene.cameras), [im.copy() for im in scene.train_images])


def visible_label_counts(truth: GroundTruth) -> np.ndarray:
    """Distinct object labels per training view."""
    return np.array([len(np.unique(m[m != UNASSIGNED])) for m in truth.train_id_maps])


def cameras_to_array(cams) -> np.ndarray:
    rows = [[c.width, c.height, c.fx, c.fy, c.cx, c.cy, *c.R.ravel(), *c.t, c.near, c.far] for c in cams]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 20)


def cameras_from_array(arr) -> list:
    cams = []
    for r in np.asarray(arr, dtype=np.float64).reshape(-1, 20):
        cams.append(Camera(r[2], r[3], r[4], r[5], r[6:15].reshape(3, 3), r[15:18], int(r[0]), int(r[1]), r[18], r[19]))
    return cams


def spec_to_manifest(spec: SynthSpec, extra: dict | None = None) -> str:
    lines = [f"{k}={v}" for k, v in asdict(spec).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def spec_from_manifest(text: str) -> SynthSpec:
    types = {f.name: f.type for f in fields(SynthSpec)}
    values = {}
    for line in text.splitlines():
        if not line.strip() or "=" not in line:
            continue
        k, v = line.split("=", 1)
        if k in types:
            kind = types[k]
            values[k] = (v == "True") if kind == "bool" else (int(v) if kind == "int" else float(v))
    return replace(SynthSpec(), **values)


def write_benchmark(directory, spec: SynthSpec, scene: Scene, truth: GroundTruth, start: Scene) -> Path:
    """Benchmark directory: scenes, PPM previews, ground-truth tensors and a manifest."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    io.save_scene(scene, d / "scene_gt.idsf")
    io.save_scene(start, d / "scene_init.idsf")
    for k, im in enumerate(scene.train_images):
        io.write_ppm(d / "images" / f"train_{k:02d}.ppm", im)
    for k, im in enumerate(truth.test_images):
        io.write_ppm(d / "images" / f"test_{k:02d}.ppm", im)
    io.save_tensors(
        d / "gt",
        {
            "object_ids": truth.object_ids,
            "class_embeddings": truth.class_embeddings,
            "boxes": truth.boxes,
            "train_id_maps": truth.train_id_maps,
            "test_id_maps": truth.test_id_maps,
            "test_cameras": cameras_to_array(truth.test_cameras),
            "test_images": np.stack(truth.test_images) if truth.test_images else np.zeros((0, spec.image_size, spec.image_size, 3), np.float32),
            "centers": truth.centers,
        },
    )
    (d / "manifest.txt").write_text(spec_to_manifest(spec, {"classes": ",".join(truth.class_names)}))
    return d


def read_benchmark(directory):
    """Inverse of :func:`write_benchmark`: ``(spec, gt_scene, start_scene, truth)``."""
    d = Path(directory)
    text = (d / "manifest.txt").read_text()
    spec = spec_from_manifest(text)
    names = next((line.split("=", 1)[1] for line in text.splitlines() if line.startswith("classes=")), "")
    t = io.load_tensors(d / "gt")
    truth = GroundTruth(
        object_ids=t["object_ids"],
        class_names=[n for n in names.split(",") if n],
        class_embeddings=t["class_embeddings"],
        boxes=t["boxes"],
        train_id_maps=t["train_id_maps"],
        test_cameras=cameras_from_array(t["test_cameras"]),
        test_images=list(t["test_images"]),
        test_id_maps=t["test_id_maps"],
        centers=t["centers"],
    )
    return spec, io.load_scene(d / "scene_gt.idsf"), io.load_scene(d / "scene_init.idsf"), truth


def blob_rms(positions: np.ndarray) -> float:
    return math.sqrt(((positions - positions.mean(axis=0)) ** 2).sum(axis=1).mean())
