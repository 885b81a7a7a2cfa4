"""Scene representation: Gaussians, the identity-coupled semantic field, cameras.

Gaussian parameters are stored unconstrained (log-scale, opacity logit, raw
quaternion) so that gradient steps never leave the valid domain; the
activated values are exposed as properties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

UNASSIGNED = np.iinfo(np.int64).max
"""Instance index of Gaussians that belong to no group (HDBSCAN noise)."""

COV2D_BLUR = 0.3
"""Low-pass term added to the diagonal of every projected covariance (px^2)."""


class BehindCamera(ValueError):
    """The Gaussian center is not in front of the near plane."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def covariance3d(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sigma = R(q) diag(s^2) R(q)^T."""
    m = quat_to_rotmat(q) * np.asarray(s, dtype=np.float64)[None, :]
    return m @ m.T


@dataclass(frozen=True)
class Gaussian:
    """One primitive with activated (constrained) parameters."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray


class Gaussians:
    """Structure-of-arrays store for N Gaussians (float32 raw parameters)."""

    def __init__(self, positions, rotations, log_scales, opacity_logits, colors):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float32).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3)

    @classmethod
    def from_values(cls, positions, rotations, scales, opacities, colors) -> "Gaussians":
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")
        opacities = np.asarray(opacities, dtype=np.float64)
        if np.any((opacities <= 0) | (opacities >= 1)):
            raise ValueError("opacities must lie in (0, 1)")
        return cls(positions, rotations, np.log(scales), logit(opacities), colors)

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].astype(np.float64),
            rotation=self.quaternions[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i].astype(np.float64),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    @property
    def quaternions(self) -> np.ndarray:
        q = self.rotations.astype(np.float64)
        return q / np.linalg.norm(q, axis=1, keepdims=True)

    def normalize_rotations(self) -> None:
        q = self.rotations.astype(np.float64)
        self.rotations = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)

    def copy(self) -> "Gaussians":
        return Gaussians(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )

    def subset(self, index) -> "Gaussians":
        return Gaussians(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.colors[index],
        )


@dataclass
class IdsField:
    """Per-Gaussian semantic feature vectors and instance indices."""

    features: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.ids):
            raise ValueError("features must be N x D with one id per row")

    @classmethod
    def empty(cls, n: int, dim: int = 128) -> "IdsField":
        return cls(np.zeros((n, dim), np.float32), np.full(n, UNASSIGNED, np.int64))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def n_groups(self) -> int:
        valid = self.ids[self.ids != UNASSIGNED]
        return int(valid.max()) + 1 if len(valid) else 0

    def copy(self) -> "IdsField":
        return IdsField(self.features.copy(), self.ids.copy())


@dataclass
class Camera:
    """Pinhole camera; ``R @ x_world + t`` gives camera coordinates (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.width < 16 or self.height < 16:
            raise ValueError("camera resolution must be at least 16x16")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @classmethod
    def look_at(cls, eye, target, *, width, height, fov_deg=50.0, up=(0.0, 0.0, 1.0), near=0.05, far=100.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, R, -R @ eye, width, height, near, far)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project_points(self, points: np.ndarray):
        """Pixel coordinates and depths of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z


@dataclass
class Scene:
    gaussians: Gaussians
    idsf: IdsField
    cameras: list = field(default_factory=list)
    train_images: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.gaussians) != len(self.idsf):
            raise ValueError("need one IdsField entry per Gaussian")
        if len(self.cameras) != len(self.train_images):
            raise ValueError("need one training image per camera")
        self.train_images = [np.ascontiguousarray(im, dtype=np.float32) for im in self.train_images]

    def __len__(self) -> int:
        return len(self.gaussians)

    def copy(self) -> "Scene":
        return Scene(self.gaussians.copy(), self.idsf.copy(), list(self.cameras), [im.copy() for im in self.train_images])


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D:
    """EWA projection of one Gaussian: cov2d = J W Sigma W^T J^T + 0.3 I."""
    x, y, z = cam.to_camera(g.position)
    if z <= cam.near:
        raise BehindCamera(f"depth {z:.4g} <= near plane {cam.near:.4g}")
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    T = J @ cam.R
    cov = T @ covariance3d(g.rotation, g.scale) @ T.T + COV2D_BLUR * np.eye(2)
    mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return Splat2D(mean, cov, float(z))


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def project_gaussians_torch(positions, quats, scales, cam: Camera):
    """Batched, differentiable projection.

    Returns ``(means2d [N,2], cov2d [N,3] as (xx, xy, yy), depth [N])``.  Culling
    is left to the caller.
    """
    R = torch.as_tensor(cam.R, dtype=positions.dtype)
    t = torch.as_tensor(cam.t, dtype=positions.dtype)
    pc = positions @ R.T + t
    x, y, z = pc.unbind(-1)
    means = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [cam.fx / z, zero, -cam.fx * x / z**2, zero, cam.fy / z, -cam.fy * y / z**2], dim=-1
    ).reshape(-1, 2, 3)
    M = quat_to_rotmat_torch(quats) * scales[:, None, :]
    T = J @ R
    TM = T @ M
    cov = TM @ TM.transpose(1, 2)
    cov2d = torch.stack([cov[:, 0, 0] + COV2D_BLUR, cov[:, 0, 1], cov[:, 1, 1] + COV2D_BLUR], dim=-1)
    return means, cov2d, z


def project_scene(gaussians: Gaussians, cam: Camera):
    """Non-differentiable float64 projection of all Gaussians plus a visibility mask."""
    with torch.no_grad():
        means, cov2d, depth = project_gaussians_torch(
            torch.from_numpy(gaussians.positions.astype(np.float64)),
            torch.from_numpy(gaussians.quaternions),
            torch.from_numpy(gaussians.scales),
            cam,
        )
    depth = depth.numpy()
    visible = (depth > cam.near) & (depth <= cam.far)
    return means.numpy(), cov2d.numpy(), depth, visible
