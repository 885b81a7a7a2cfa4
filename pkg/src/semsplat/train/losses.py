"""Reconstruction, smoothing and contrastive objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as Fn

log = logging.getLogger(__name__)


def _gaussian_taps(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(img: torch.Tensor, ref: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM of two H x W x C images in [0, 1] (Gaussian window, zero padding, C1 = 0.01^2, C2 = 0.03^2)."""
    C = img.shape[-1]
    x = img.permute(2, 0, 1)
    y = ref.permute(2, 0, 1).to(img.dtype)
    # the 2D window is separable: blur all five moment maps with one row pass and one column pass
    stack = torch.cat([x, y, x * x, y * y, x * y]).unsqueeze(0)
    taps = _gaussian_taps(window, sigma, img.dtype)
    k = 5 * C
    pad = window // 2
    stack = Fn.conv2d(stack, taps.view(1, 1, 1, window).expand(k, 1, 1, window), padding=(0, pad), groups=k)
    stack = Fn.conv2d(stack, taps.view(1, 1, window, 1).expand(k, 1, window, 1), padding=(pad, 0), groups=k)
    mx, my, xx, yy, xy = stack[0].split(C)
    sxx = xx - mx * mx
    syy = yy - my * my
    sxy = xy - mx * my
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s.mean()


def reconstruction_loss(img: torch.Tensor, ref: torch.Tensor, lambda_ssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    ref = ref.to(img.dtype)
    return (1 - lambda_ssim) * (img - ref).abs().mean() + lambda_ssim * (1 - ssim(img, ref))


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(img, np.float64) - np.asarray(ref, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


def smoothing_loss(features: torch.Tensor, knn: np.ndarray, sample_count: int, generator: np.random.Generator | None = None, sample=None):
    """Mean of 1 - cos(f_i, f_j) over ``sample_count`` random Gaussians i and their K neighbors j.

    ``sample`` overrides the random draw with explicit indices.
    """
    n = features.shape[0]
    knn = np.asarray(knn)
    if n <= knn.shape[1]:
        log.warning("smoothing loss skipped: %d Gaussians for K=%d", n, knn.shape[1])
        return features.sum() * 0.0
    if sample is None:
        g = generator if generator is not None else np.random.default_rng(0)
        sample = g.choice(n, size=min(sample_count, n), replace=False)
    sample = torch.as_tensor(np.asarray(sample, dtype=np.int64))
    f = Fn.normalize(features[sample], dim=-1)
    nb = Fn.normalize(features[torch.as_tensor(knn)[sample]], dim=-1)
    # 1 - cos written as half the squared chord between unit vectors: exact 0 for equal features
    return 0.5 * ((nb - f[:, None, :]) ** 2).sum(-1).mean()


@dataclass
class ContrastiveGroups:
    """Joint 2D-3D feature sets and positive / negative prototype assignments per anchor group."""

    members: list  # per group: m_i x D tensor (3D member features stacked over rendered 2D ones)
    prototypes: torch.Tensor  # G x D, unit rows, detached
    positives: list  # per group: prototype indices (always includes the group itself)
    negatives: list
    active: np.ndarray  # anchors that take part in the loss

    @property
    def n_groups(self) -> int:
        return len(self.members)


def partition_by_similarity(prototypes: np.ndarray, threshold: float):
    """Positives: cosine above ``threshold`` or the anchor itself; negatives: the rest."""
    P = np.asarray(prototypes, dtype=np.float64)
    sim = P @ P.T
    G = len(P)
    pos, neg = [], []
    for i in range(G):
        is_pos = sim[i] > threshold
        is_pos[i] = True
        pos.append(np.flatnonzero(is_pos))
        neg.append(np.flatnonzero(~is_pos))
    return pos, neg


def build_contrastive_groups(
    labels: np.ndarray,
    n_groups: int,
    features: torch.Tensor,
    rendered: torch.Tensor | None,
    masks,
    threshold: float = 0.9,
    max_samples: int = 256,
    generator: np.random.Generator | None = None,
) -> ContrastiveGroups:
    """Sample each group's 3D member features and the rendered features inside its mask.

    ``rendered`` is the H x W x D pre-projection feature render of the current
    view and ``masks`` its :class:`~semsplat.distill.InstanceMasks` (either may
    be None).  Anchors without any negative are inactive.
    """
    g = generator if generator is not None else np.random.default_rng(0)
    labels = np.asarray(labels)
    flat = rendered.reshape(-1, rendered.shape[-1]) if rendered is not None else None
    members = []
    for i in range(n_groups):
        idx = np.flatnonzero(labels == i)
        if len(idx) > max_samples:
            idx = np.sort(g.choice(idx, size=max_samples, replace=False))
        parts = [features[torch.as_tensor(idx)]]
        m = masks.mask_of(i) if (masks is not None and flat is not None) else None
        if m is not None:
            pix = np.flatnonzero(m.ravel())
            if len(pix) > max_samples:
                pix = np.sort(g.choice(pix, size=max_samples, replace=False))
            parts.append(flat[torch.as_tensor(pix)].to(features.dtype))
        members.append(torch.cat(parts, dim=0))
    with torch.no_grad():
        protos = torch.stack(
            [Fn.normalize(Fn.normalize(m, dim=-1).mean(0), dim=0) if len(m) else torch.zeros(features.shape[1], dtype=features.dtype) for m in members]
        ) if members else torch.zeros((0, features.shape[1]), dtype=features.dtype)
    pos, neg = partition_by_similarity(protos.double().numpy(), threshold)
    active = np.array([len(neg[i]) > 0 and len(members[i]) > 0 for i in range(n_groups)], dtype=bool)
    return ContrastiveGroups(members, protos.detach(), pos, neg, active)


def contrastive_loss(groups: ContrastiveGroups, tau: float = 0.1) -> torch.Tensor:
    """Per member j of anchor i: -log(sum_pos exp(sim/tau) / sum_neg exp(sim/tau)); mean over j, then over anchors."""
    terms = []
    for i in np.flatnonzero(groups.active):
        X = Fn.normalize(groups.members[i], dim=-1)
        s = X @ groups.prototypes.to(X.dtype).T / tau
        lp = torch.logsumexp(s[:, torch.as_tensor(groups.positives[i])], dim=1)
        ln = torch.logsumexp(s[:, torch.as_tensor(groups.negatives[i])], dim=1)
        terms.append(-(lp - ln).mean())
    if not terms:
        ref = groups.prototypes
        return ref.sum() * 0.0
    return torch.stack(terms).mean()
