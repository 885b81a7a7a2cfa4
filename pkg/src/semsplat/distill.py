"""Teacher targets, the projection head, instance masks and the two-level distillation loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from . import io, rng
from .scene import UNASSIGNED


@dataclass
class TeacherMaps:
    """What a 2D teacher provides for one view.

    ``pix_features`` is the dense H_t x W_t x D_t map; ``embed(crop, mask, bbox)``
    encodes a masked image crop (bbox = (y0, y1, x0, x1) in full-res pixels);
    ``text_embeddings`` maps query names to unit vectors.
    """

    pix_features: np.ndarray
    embed: Callable
    text_embeddings: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.pix_features.shape[-1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def teacher_synthetic(
    true_ids: np.ndarray,
    class_embeddings: np.ndarray,
    *,
    stride: int = 4,
    noise: float = 0.0,
    blur: int = 3,
    seed: int = 0,
    view: int = 0,
    class_names=None,
) -> TeacherMaps:
    """Stand-in for a dense vision-language teacher built from ground-truth ids.

    Class one-hots are box-blurred over ``blur`` pixels to soften object edges,
    area-averaged down by ``stride``, and every pixel whose blurred background
    share is below one half gets the normalized blend of class embeddings plus
    isotropic noise of expected norm ``noise``.  Background pixels are zero.
    """
    true_ids = np.asarray(true_ids)
    E = np.asarray(class_embeddings, dtype=np.float64)
    n_cls, dim = E.shape
    H, W = true_ids.shape
    if H % stride or W % stride:
        raise ValueError(f"id map {H}x{W} is not divisible by stride {stride}")
    valid = (true_ids >= 0) & (true_ids < n_cls)
    onehot = np.zeros((H, W, n_cls + 1))
    onehot[valid, true_ids[valid]] = 1.0
    onehot[~valid, n_cls] = 1.0
    if blur > 1:
        onehot = ndimage.uniform_filter(onehot, size=(blur, blur, 1), mode="nearest")
    h, w = H // stride, W // stride
    pooled = onehot.reshape(h, stride, w, stride, n_cls + 1).mean(axis=(1, 3))
    fg = pooled[..., n_cls] < 0.5
    feats = pooled[..., :n_cls] @ E
    if noise > 0:
        g = rng.stream(seed, "teacher-pixels", view)
        feats = feats + g.normal(size=feats.shape) * (noise / np.sqrt(dim))
    feats = np.where(fg[..., None], _unit_rows(feats), 0.0)

    def embed(crop, mask, bbox):
        y0, y1, x0, x1 = bbox
        region = true_ids[y0:y1, x0:x1][np.asarray(mask, bool)]
        labels = np.where((region >= 0) & (region < n_cls), region, n_cls)
        counts = np.bincount(labels, minlength=n_cls + 1)
        k = int(np.argmax(counts))
        if k == n_cls:
            return np.zeros(dim)
        e = E[k]
        if noise > 0:
            e = e + rng.stream(seed, "teacher-embed", view, k).normal(size=dim) * (noise / np.sqrt(dim))
        return e / np.linalg.norm(e)

    names = class_names or [f"class{k}" for k in range(n_cls)]
    return TeacherMaps(feats, embed, {n: E[k] / np.linalg.norm(E[k]) for k, n in enumerate(names)})


def save_teacher(directory, maps: list, vocabulary: dict, stride: int) -> None:
    """Per-view dense maps plus a vocabulary tensor, for mounting an external teacher."""
    d = Path(directory)
    io.save_tensors(d, {f"view_{k:03d}": m.pix_features.astype(np.float32) for k, m in enumerate(maps)})
    names = sorted(vocabulary)
    io.save_tensor(d / "vocabulary.tnsr", np.stack([vocabulary[n] for n in names]).astype(np.float32))
    (d / "teacher.txt").write_text(f"stride={stride}\nnames={','.join(names)}\n")


def load_teacher(directory) -> list:
    """Teacher read from files; ``embed`` averages the dense map over the mask footprint."""
    d = Path(directory)
    meta = dict(line.split("=", 1) for line in (d / "teacher.txt").read_text().splitlines() if "=" in line)
    stride = int(meta["stride"])
    tensors = io.load_tensors(d)
    vocab_mat = tensors.pop("vocabulary").astype(np.float64)
    vocab = {n: vocab_mat[k] for k, n in enumerate(meta["names"].split(","))}
    out = []
    for key in sorted(tensors):
        pix = tensors[key].astype(np.float64)

        def embed(crop, mask, bbox, pix=pix):
            ys, xs = np.nonzero(np.asarray(mask, bool))
            v = pix[(ys + bbox[0]) // stride, (xs + bbox[2]) // stride].mean(axis=0)
            n = np.linalg.norm(v)
            return v / n if n > 0 else v

        out.append(TeacherMaps(pix, embed, vocab))
    return out


class ProjectionHead(torch.nn.Module):
    """Per-pixel MLP D -> D_t followed by a strided convolution down to teacher resolution."""

    def __init__(self, dim: int = 128, teacher_dim: int = 32, stride: int = 4, seed: int = 0):
        super().__init__()
        gen = rng.torch_generator(seed, "projection-head")
        self.stride = stride
        self.mlp = torch.nn.Sequential(
            torch.nn.Linear(dim, 2 * teacher_dim), torch.nn.GELU(), torch.nn.Linear(2 * teacher_dim, teacher_dim)
        )
        self.down = torch.nn.Conv2d(teacher_dim, teacher_dim, kernel_size=stride, stride=stride)
        with torch.no_grad():
            for lin in (self.mlp[0], self.mlp[2]):
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen) * 2 * bound - bound)
                lin.bias.copy_(torch.rand(lin.bias.shape, generator=gen) * 2 * bound - bound)
            # start as average pooling
            self.down.weight.zero_()
            for c in range(teacher_dim):
                self.down.weight[c, c] = 1.0 / stride**2
            self.down.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Project H x W x D (or N x D) features to D_t."""
        return self.mlp(features)

    def downsample(self, F: torch.Tensor) -> torch.Tensor:
        """H x W x D_t -> H/stride x W/stride x D_t."""
        H, W, _ = F.shape
        if H % self.stride or W % self.stride:
            raise ValueError(f"render {H}x{W} is not divisible by stride {self.stride}")
        out = self.down(F.permute(2, 0, 1).unsqueeze(0))
        return out[0].permute(1, 2, 0)

    def project_numpy(self, raw: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            p = next(self.parameters())
            return self(torch.as_tensor(np.asarray(raw), dtype=p.dtype)).double().numpy()


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def pixel_distill_loss(F_hat, F_pix) -> torch.Tensor:
    """Mean absolute difference over all entries."""
    F_hat = _as_tensor(F_hat)
    F_pix = _as_tensor(F_pix, F_hat)
    if F_hat.shape != F_pix.shape:
        raise ValueError(f"shape mismatch {tuple(F_hat.shape)} vs {tuple(F_pix.shape)}")
    return (F_pix - F_hat).abs().mean()


def instance_term(F, F_ins, covered) -> torch.Tensor:
    """Mean absolute difference over the channels of covered pixels; zero if none are covered."""
    F = _as_tensor(F)
    F_ins = _as_tensor(F_ins, F)
    if F.shape != F_ins.shape:
        raise ValueError(f"shape mismatch {tuple(F.shape)} vs {tuple(F_ins.shape)}")
    covered = torch.as_tensor(np.asarray(covered, bool)) if not isinstance(covered, torch.Tensor) else covered
    if covered.shape != F.shape[:2]:
        raise ValueError("coverage mask does not match the feature map")
    if not bool(covered.any()):
        return F.sum() * 0.0
    return (F_ins[covered] - F[covered]).abs().mean()


def multilevel_loss(F_hat, F_pix, F, F_ins, covered, gamma: float = 0.3) -> torch.Tensor:
    """Pixel term at teacher resolution plus ``gamma`` times the masked instance term at full resolution."""
    return pixel_distill_loss(F_hat, F_pix) + gamma * instance_term(F, F_ins, covered)


@dataclass
class InstanceMasks:
    masks: np.ndarray  # K x H x W bool, pairwise disjoint
    group_ids: np.ndarray  # K

    def __len__(self) -> int:
        return len(self.group_ids)

    @property
    def covered(self) -> np.ndarray:
        return self.masks.any(axis=0)

    def bbox(self, k: int):
        ys, xs = np.nonzero(self.masks[k])
        return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1

    def mask_of(self, group: int):
        hit = np.flatnonzero(self.group_ids == group)
        return self.masks[hit[0]] if len(hit) else None


_CROSS = np.ones((3, 3), bool)


def _open_close(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 2, mode="edge")
    p = ndimage.binary_opening(p, structure=_CROSS)
    p = ndimage.binary_closing(p, structure=_CROSS)
    return p[2:-2, 2:-2]


def extract_masks(id_map: np.ndarray, min_area: int = 16) -> InstanceMasks:
    """Per-group masks from an id map, refined by a 3x3 open then close.

    Refined masks are clipped to labeled pixels; where two refined masks
    overlap the pixel goes to its rendered id if that group claims it,
    otherwise to the lowest claiming group.  Masks smaller than ``min_area``
    are dropped.
    """
    id_map = np.asarray(id_map)
    labeled = id_map != UNASSIGNED
    groups = np.unique(id_map[labeled])
    H, W = id_map.shape
    if len(groups) == 0:
        return InstanceMasks(np.zeros((0, H, W), bool), np.zeros(0, np.int64))
    refined = np.stack([_open_close(id_map == g) & labeled for g in groups])
    claims = refined.sum(axis=0)
    own = refined & (id_map[None] == groups[:, None, None])
    contested = claims > 1
    first = np.argmax(refined, axis=0)
    has_own = own.any(axis=0)
    for k in range(len(groups)):
        refined[k] &= ~contested | own[k] | (~has_own & (first == k))
    keep = refined.reshape(len(groups), -1).sum(axis=1) >= min_area
    return InstanceMasks(refined[keep], groups[keep].astype(np.int64))


def instance_feature_map(image: np.ndarray, masks: InstanceMasks, teacher: TeacherMaps) -> np.ndarray:
    """Broadcast the teacher embedding of every masked crop over its mask; uncovered pixels are zero."""
    image = np.asarray(image)
    H, W = image.shape[:2]
    out = np.zeros((H, W, teacher.dim))
    for k in range(len(masks)):
        m = masks.masks[k]
        if not m.any():
            continue
        y0, y1, x0, x1 = masks.bbox(k)
        local = m[y0:y1, x0:x1]
        crop = image[y0:y1, x0:x1] * local[..., None]
        out[m] = teacher.embed(crop, local, (y0, y1, x0, x1))
    return out
