"""Array-level rasterization API around the numba kernels, plus its torch binding."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from scipy import sparse

from . import kernels
from .kernels import ALPHA_MIN, TILE

T_MIN = 1e-4


class StaleStateError(RuntimeError):
    """Backward was asked to use forward state that no longer matches the splats."""


def splat_fingerprint(means2d, cov2d, opacity, depth) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for arr in (means2d, cov2d, opacity, depth):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.digest()


def conic_from_cov(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def cov_grad_from_conic_grad(cov2d: np.ndarray, d_conic: np.ndarray) -> np.ndarray:
    """Chain rule through the 2x2 symmetric inverse; off-diagonal counted once."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    A, B, C = c / det, -b / det, a / det
    gA, gB, gC = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    # dL/dSigma = -Sigma^-1 G Sigma^-1 with G the symmetric-matrix gradient of the conic
    G01 = 0.5 * gB
    m00 = A * A * gA + 2 * A * B * G01 + B * B * gC
    m01 = A * B * gA + (A * C + B * B) * G01 + B * C * gC
    m11 = B * B * gA + 2 * B * C * G01 + C * C * gC
    return -np.stack([m00, 2 * m01, m11], axis=1)


@dataclass
class RasterState:
    width: int
    height: int
    tiles_x: int
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    opacity: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    t_min: float
    fingerprint: bytes


def tile_bounds(means2d, cov2d, opacity, width, height):
    """Inclusive tile rectangle of every splat's alpha' >= 1/255 footprint.

    The footprint is the ellipse d^T cov^-1 d <= 2 ln(255 opacity); outside it
    alpha' is below the skip threshold, so the rectangle loses nothing.
    """
    q = 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)
    live = q > 0
    q = np.where(live, q, 0.0)
    ex = np.sqrt(q * cov2d[:, 0]) * (1 + 1e-7) + 1e-7
    ey = np.sqrt(q * cov2d[:, 2]) * (1 + 1e-7) + 1e-7
    px0 = np.maximum(np.ceil(means2d[:, 0] - ex), 0)
    px1 = np.minimum(np.floor(means2d[:, 0] + ex), width - 1)
    py0 = np.maximum(np.ceil(means2d[:, 1] - ey), 0)
    py1 = np.minimum(np.floor(means2d[:, 1] + ey), height - 1)
    live &= (px0 <= px1) & (py0 <= py1) & np.isfinite(means2d).all(axis=1)
    tx0 = np.where(live, px0 // TILE, 0).astype(np.int64)
    tx1 = np.where(live, px1 // TILE, -1).astype(np.int64)
    ty0 = np.where(live, py0 // TILE, 0).astype(np.int64)
    ty1 = np.where(live, py1 // TILE, -1).astype(np.int64)
    return tx0, ty0, tx1, ty1


def _prepare(means2d, cov2d, opacity, depth, width, height):
    means2d = np.ascontiguousarray(means2d, dtype=np.float64).reshape(-1, 2)
    cov2d = np.ascontiguousarray(cov2d, dtype=np.float64).reshape(-1, 3)
    opacity = np.ascontiguousarray(opacity, dtype=np.float64).reshape(-1)
    depth = np.ascontiguousarray(depth, dtype=np.float64).reshape(-1)
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    order = np.argsort(depth, kind="stable").astype(np.int64)
    tx0, ty0, tx1, ty1 = tile_bounds(means2d, cov2d, opacity, width, height)
    offsets, entries = kernels.bin_tiles(order, tx0, ty0, tx1, ty1, tiles_x, tiles_x * tiles_y)
    return means2d, cov2d, opacity, depth, tiles_x, offsets, entries


def _as_rows(values, n: int) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    return values if values.ndim == 2 else values.reshape(n, -1)


def rasterize(means2d, cov2d, opacity, depth, values, background, width, height, t_min=T_MIN):
    """Composite per-splat ``values`` (N x C) front to back.

    Returns ``(image [H, W, C], state)``; ``state`` holds the sorted tile lists
    and final transmittances needed by :func:`rasterize_backward`.
    """
    means2d, cov2d, opacity, depth, tiles_x, offsets, entries = _prepare(means2d, cov2d, opacity, depth, width, height)
    values = _as_rows(values, len(means2d))
    background = np.ascontiguousarray(background, dtype=np.float64).reshape(values.shape[1])
    conics = conic_from_cov(cov2d) if len(cov2d) else np.zeros((0, 3))
    image, final_t, n_contrib = kernels.forward(
        means2d, conics, opacity, values, background, offsets, entries, width, height, tiles_x, float(t_min)
    )
    state = RasterState(
        width, height, tiles_x, means2d, cov2d, conics, opacity, offsets, entries, final_t, n_contrib,
        float(t_min), splat_fingerprint(means2d, cov2d, opacity, depth),
    )
    return image, state


def rasterize_ids(state: RasterState, ids: np.ndarray, unassigned_slot: int, k: int = 8) -> np.ndarray:
    """Id argmax map without materializing dense per-id weights."""
    return kernels.sparse_argmax_ids(
        state.means2d, state.conics, state.opacity, np.ascontiguousarray(ids, dtype=np.int64), int(unassigned_slot),
        state.offsets, state.entries, state.width, state.height, state.tiles_x, state.t_min, int(k),
    )


def blend_matrix(state: RasterState):
    """Sparse (H*W) x N matrix of blend weights T_i alpha'_i for the traversal in ``state``.

    For fixed geometry every channel composite is ``matrix @ values + final_t * background``.
    """
    rows, cols, vals = kernels.blend_weights(
        state.means2d, state.conics, state.opacity, state.offsets, state.entries,
        state.width, state.height, state.tiles_x, state.t_min,
    )
    shape = (state.width * state.height, len(state.means2d))
    return sparse.csr_matrix((vals, (rows, cols)), shape=shape)


def rasterize_backward(state: RasterState, values, background, upstream):
    """Gradients of ``sum(upstream * image)``.

    Only the channels present in ``values``/``upstream`` are differentiated;
    channels with zero upstream gradient may simply be left out.  Returns
    ``(d_values, d_opacity, d_means2d, d_cov2d)`` per splat.
    """
    values = _as_rows(values, len(state.means2d))
    background = np.ascontiguousarray(background, dtype=np.float64).reshape(values.shape[1])
    upstream = np.ascontiguousarray(upstream, dtype=np.float64).reshape(state.height, state.width, values.shape[1])
    bufs = kernels.backward(
        state.means2d, state.conics, state.opacity, values, background, state.offsets, state.entries,
        state.width, state.height, state.tiles_x, state.final_t, state.n_contrib, upstream,
    )
    d_values, d_opacity, d_means, d_conics = kernels.reduce_entries(state.entries, len(state.means2d), *bufs)
    d_cov = cov_grad_from_conic_grad(state.cov2d, d_conics) if len(d_conics) else np.zeros((0, 3))
    return d_values, d_opacity, d_means, d_cov


class _RasterizeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, cov2d, opacity, values, depth, background, width, height, t_min, n_grad):
        image, state = rasterize(
            means2d.detach().numpy(), cov2d.detach().numpy(), opacity.detach().numpy(), depth.detach().numpy(),
            values.detach().numpy(), background.detach().numpy(), width, height, t_min,
        )
        ctx.state = state
        ctx.n_grad = n_grad
        ctx.save_for_backward(values, background)
        final_t = torch.from_numpy(state.final_t).to(values.dtype)
        ctx.mark_non_differentiable(final_t)
        return torch.from_numpy(image).to(values.dtype), final_t

    @staticmethod
    def backward(ctx, grad_image, grad_final_t):
        values, background = ctx.saved_tensors
        k = ctx.n_grad
        d_values, d_opacity, d_means, d_cov = rasterize_backward(
            ctx.state,
            values[:, :k].detach().numpy(),
            background[:k].detach().numpy(),
            grad_image[..., :k].contiguous().numpy(),
        )
        dv = torch.zeros_like(values)
        dv[:, :k] = torch.from_numpy(d_values).to(values.dtype)
        cast = lambda a: torch.from_numpy(a).to(values.dtype)  # noqa: E731
        return cast(d_means), cast(d_cov), cast(d_opacity), dv, None, None, None, None, None, None


def rasterize_torch(means2d, cov2d, opacity, values, depth, background, width, height, t_min=T_MIN, n_grad=None):
    """Differentiable rasterization; gradients flow to the first ``n_grad`` value channels."""
    n_grad = values.shape[1] if n_grad is None else int(n_grad)
    return _RasterizeFunction.apply(means2d, cov2d, opacity, values, depth, background, width, height, t_min, n_grad)
