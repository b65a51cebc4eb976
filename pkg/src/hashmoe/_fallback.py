"""Pure NumPy versions of the kernels in ``_core.pyx``.

Same signatures, same in-place output conventions, same arithmetic order per
point. Used when the extension is not built or ``HASHMOE_BACKEND=python``.
"""

from __future__ import annotations

import numpy as np

PRIME_Y = np.uint32(2654435761)
PRIME_Z = np.uint32(805459861)


def _rows(cx, cy, cz, res, entries, offset):
    """Table rows for integer corners; ``res``/``entries``/``offset`` broadcast."""
    stride = res.astype(np.int64) + 1
    dense = stride ** 3 <= entries
    dense_idx = cx + stride * (cy + stride * cz)
    h = cx.astype(np.uint32) ^ (cy.astype(np.uint32) * PRIME_Y) ^ (cz.astype(np.uint32) * PRIME_Z)
    mask = (entries - 1).astype(np.uint32)
    hashed = (h & mask).astype(np.int64)
    return offset + np.where(dense, dense_idx, hashed)


def row_index(cx, cy, cz, res, entries, offset):
    r = _rows(
        np.asarray([cx], np.int64),
        np.asarray([cy], np.int64),
        np.asarray([cz], np.int64),
        np.asarray([res], np.int64),
        np.asarray([entries], np.int64),
        np.asarray([offset], np.int64),
    )
    return int(r[0])


def _level_corners(points, grid_ids, res, entries, offsets, level):
    """Corner rows (N, 8) and float64 trilinear weights (N, 8) for one level."""
    r = res[grid_ids, level].astype(np.int64)
    p = points.astype(np.float64) * r.astype(np.float64)[:, None]
    c = np.floor(p).astype(np.int64)
    c = np.clip(c, 0, (r - 1)[:, None])
    frac = p - c.astype(np.float64)
    ent = entries[grid_ids, level]
    off = offsets[grid_ids, level]
    rows = np.empty((points.shape[0], 8), np.int64)
    weights = np.empty((points.shape[0], 8), np.float64)
    for k in range(8):
        bx, by, bz = k & 1, (k >> 1) & 1, (k >> 2) & 1
        wx = frac[:, 0] if bx else 1.0 - frac[:, 0]
        wy = frac[:, 1] if by else 1.0 - frac[:, 1]
        wz = frac[:, 2] if bz else 1.0 - frac[:, 2]
        weights[:, k] = (wx * wy) * wz
        rows[:, k] = _rows(c[:, 0] + bx, c[:, 1] + by, c[:, 2] + bz, r, ent, off)
    return rows, weights


def encode(table, points, grid_ids, res, entries, offsets, out):
    n_feat = table.shape[1]
    for level in range(res.shape[1]):
        rows, weights = _level_corners(points, grid_ids, res, entries, offsets, level)
        acc = np.zeros((points.shape[0], n_feat), np.float64)
        for k in range(8):
            acc += weights[:, k : k + 1] * table[rows[:, k]].astype(np.float64)
        out[:, level * n_feat : (level + 1) * n_feat] = acc


def encode_backward(grad_table, points, grid_ids, res, entries, offsets, dfeat):
    n_feat = grad_table.shape[1]
    n_rows = grad_table.shape[0]
    all_rows = []
    all_vals = []
    for level in range(res.shape[1]):
        rows, weights = _level_corners(points, grid_ids, res, entries, offsets, level)
        d = dfeat[:, level * n_feat : (level + 1) * n_feat]
        all_rows.append(rows.reshape(-1))
        all_vals.append((weights[:, :, None] * d[:, None, :].astype(np.float64)).reshape(-1, n_feat))
    rows = np.concatenate(all_rows)
    vals = np.concatenate(all_vals)
    for f in range(n_feat):
        grad_table[:, f] += np.bincount(rows, weights=vals[:, f], minlength=n_rows).astype(grad_table.dtype)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    g = grad.astype(np.float64)
    m[:] = beta1 * m.astype(np.float64) + (1.0 - beta1) * g
    v[:] = beta2 * v.astype(np.float64) + (1.0 - beta2) * (g * g)
    step = lr * (m.astype(np.float64) / bias1) / (np.sqrt(v.astype(np.float64) / bias2) + eps)
    param[:] = param.astype(np.float64) - step
