"""Numba kernels for tile-based splat compositing.

Every per-pixel loop here follows the same rules, which the brute-force
oracle reproduces exactly:

* alpha' = min(ALPHA_MAX, opacity * exp(-0.5 d^T conic d)); splats with
  alpha' < ALPHA_MIN are skipped for that pixel;
* a splat is blended with weight T * alpha', then T *= 1 - alpha';
* traversal stops once T < t_min (the splat that crossed is included).

Tiles own disjoint pixels.  Backward kernels accumulate into per-(tile, splat)
entry buffers, reduced afterwards in a fixed order, so the gradients do not
depend on the thread count.
"""

import numpy as np
from numba import njit, prange

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


@njit(cache=True)
def bin_tiles(order, tx0, ty0, tx1, ty1, tiles_x, n_tiles):
    """Per-tile splat lists, each sorted in ``order`` (front to back)."""
    counts = np.zeros(n_tiles + 1, np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    entries = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                t = ty * tiles_x + tx
                entries[fill[t]] = g
                fill[t] += 1
    return offsets, entries


@njit(parallel=True, cache=True)
def forward(means, conics, opacity, values, background, offsets, entries, width, height, tiles_x, t_min):
    n_tiles = offsets.shape[0] - 1
    C = values.shape[1]
    out = np.zeros((height, width, C))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), np.int64)
    for tile in prange(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = offsets[tile]
        stop = offsets[tile + 1]
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                T = 1.0
                last = 0
                for j in range(start, stop):
                    g = entries[j]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    a = min(ALPHA_MAX, opacity[g] * np.exp(power))
                    if a < ALPHA_MIN:
                        continue
                    w = T * a
                    for c in range(C):
                        out[py, px, c] += w * values[g, c]
                    T *= 1.0 - a
                    last = j - start + 1
                    if T < t_min:
                        break
                for c in range(C):
                    out[py, px, c] += T * background[c]
                final_t[py, px] = T
                n_contrib[py, px] = last
    return out, final_t, n_contrib


@njit(parallel=True, cache=True)
def sparse_argmax_ids(means, conics, opacity, ids, unassigned_slot, offsets, entries, width, height, tiles_x, t_min, k):
    """Argmax of blended one-hot ids with a k-slot per-pixel accumulator.

    Exact whenever a pixel sees at most k distinct ids; beyond that the
    lightest slot is evicted (best effort).  Residual transmittance goes to
    ``unassigned_slot``.  Ties resolve to the lower id.
    """
    n_tiles = offsets.shape[0] - 1
    out = np.empty((height, width), np.int64)
    for tile in prange(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = offsets[tile]
        stop = offsets[tile + 1]
        slot_id = np.empty(k, np.int64)
        slot_w = np.empty(k)
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                used = 0
                T = 1.0
                for j in range(start, stop):
                    g = entries[j]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    a = min(ALPHA_MAX, opacity[g] * np.exp(power))
                    if a < ALPHA_MIN:
                        continue
                    w = T * a
                    found = -1
                    for s in range(used):
                        if slot_id[s] == ids[g]:
                            found = s
                            break
                    if found >= 0:
                        slot_w[found] += w
                    elif used < k:
                        slot_id[used] = ids[g]
                        slot_w[used] = w
                        used += 1
                    else:
                        lo = 0
                        for s in range(1, k):
                            if slot_w[s] < slot_w[lo]:
                                lo = s
                        if w > slot_w[lo]:
                            slot_id[lo] = ids[g]
                            slot_w[lo] = w
                    T *= 1.0 - a
                    if T < t_min:
                        break
                best = unassigned_slot
                best_w = T
                for s in range(used):
                    if slot_id[s] == unassigned_slot:
                        best_w += slot_w[s]
                for s in range(used):
                    sid = slot_id[s]
                    if sid == unassigned_slot:
                        continue
                    if slot_w[s] > best_w or (slot_w[s] == best_w and sid < best):
                        best = sid
                        best_w = slot_w[s]
                out[py, px] = best
    return out


@njit(parallel=True, cache=True)
def backward(
    means, conics, opacity, values, background, offsets, entries, width, height, tiles_x, final_t, n_contrib, upstream
):
    """Reverse-mode pass; returns per-entry gradient buffers."""
    n_tiles = offsets.shape[0] - 1
    n_entries = entries.shape[0]
    C = values.shape[1]
    d_values = np.zeros((n_entries, C))
    d_opacity = np.zeros(n_entries)
    d_means = np.zeros((n_entries, 2))
    d_conics = np.zeros((n_entries, 3))
    for tile in prange(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = offsets[tile]
        suffix = np.empty(C)
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                T = final_t[py, px]
                for c in range(C):
                    suffix[c] = T * background[c]
                for j in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = entries[j]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    gauss = np.exp(power)
                    raw = opacity[g] * gauss
                    a = min(ALPHA_MAX, raw)
                    if a < ALPHA_MIN:
                        continue
                    one_minus = 1.0 - a
                    T = T / one_minus
                    w = T * a
                    d_a = 0.0
                    for c in range(C):
                        up = upstream[py, px, c]
                        d_values[j, c] += w * up
                        d_a += up * (T * values[g, c] - suffix[c] / one_minus)
                        suffix[c] += w * values[g, c]
                    if raw < ALPHA_MAX:
                        d_opacity[j] += d_a * gauss
                        d_power = d_a * a
                        d_means[j, 0] += d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                        d_means[j, 1] += d_power * (conics[g, 1] * dx + conics[g, 2] * dy)
                        d_conics[j, 0] += -0.5 * d_power * dx * dx
                        d_conics[j, 1] += -d_power * dx * dy
                        d_conics[j, 2] += -0.5 * d_power * dy * dy
    return d_values, d_opacity, d_means, d_conics


@njit(cache=True)
def reduce_entries(entries, n, d_values, d_opacity, d_means, d_conics):
    """Sum per-entry buffers into per-splat gradients in entry order."""
    C = d_values.shape[1]
    gv = np.zeros((n, C))
    go = np.zeros(n)
    gm = np.zeros((n, 2))
    gc = np.zeros((n, 3))
    for j in range(entries.shape[0]):
        g = entries[j]
        for c in range(C):
            gv[g, c] += d_values[j, c]
        go[g] += d_opacity[j]
        gm[g, 0] += d_means[j, 0]
        gm[g, 1] += d_means[j, 1]
        for c in range(3):
            gc[g, c] += d_conics[j, c]
    return gv, go, gm, gc


@njit(cache=True)
def blend_weights(means, conics, opacity, offsets, entries, width, height, tiles_x, t_min):
    """Every nonzero blend weight T * alpha' as COO triples (pixel, splat, weight).

    Pixels are flattened row-major.  Same traversal rules as :func:`forward`.
    """
    n_tiles = offsets.shape[0] - 1
    cap = 1024
    rows = np.empty(cap, np.int64)
    cols = np.empty(cap, np.int64)
    vals = np.empty(cap)
    n = 0
    for tile in range(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = offsets[tile]
        stop = offsets[tile + 1]
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                T = 1.0
                for j in range(start, stop):
                    g = entries[j]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    a = min(ALPHA_MAX, opacity[g] * np.exp(power))
                    if a < ALPHA_MIN:
                        continue
                    if n == cap:
                        cap *= 2
                        rows = np.concatenate((rows, np.empty(cap - n, np.int64)))
                        cols = np.concatenate((cols, np.empty(cap - n, np.int64)))
                        vals = np.concatenate((vals, np.empty(cap - n)))
                    rows[n] = py * width + px
                    cols[n] = g
                    vals[n] = T * a
                    n += 1
                    T *= 1.0 - a
                    if T < t_min:
                        break
    return rows[:n], cols[:n], vals[:n]
