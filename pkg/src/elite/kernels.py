"""Hot inner loops.

Every kernel exists twice: an ``*_nb`` version compiled with numba and an
``*_np`` version written with vectorised numpy. The public name points at one
of them depending on :data:`elite._jit.USE_NUMBA`. Both variants are kept
importable so tests can check that they agree bit for bit.
"""
import numpy as np

from ._jit import USE_NUMBA, njit

__all__ = [
    "scatter_add_rows",
    "zbuffer",
    "flood_fill",
    "greedy_nms",
    "box_iou_inclusive",
    "backend",
]


def backend():
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# scatter-add of rows: out[index[i]] += src[i]


@njit
def scatter_add_rows_nb(src, index, n_out):
    out = np.zeros((n_out, src.shape[1]), dtype=np.float64)
    for i in range(src.shape[0]):
        k = index[i]
        for j in range(src.shape[1]):
            out[k, j] += src[i, j]
    return out


def scatter_add_rows_np(src, index, n_out):
    out = np.zeros((n_out, src.shape[1]), dtype=np.float64)
    np.add.at(out, index, src)
    return out


# --------------------------------------------------------------------------
# z-buffer: nearest depth wins, ties go to the lower point index


@njit
def zbuffer_nb(u, v, depth, width, height):
    winner = np.full((height, width), -1, dtype=np.int64)
    best = np.empty((height, width), dtype=np.float64)
    for i in range(u.shape[0]):
        r = v[i]
        c = u[i]
        w = winner[r, c]
        if w < 0 or depth[i] < best[r, c]:
            winner[r, c] = i
            best[r, c] = depth[i]
    return winner


def zbuffer_np(u, v, depth, width, height):
    winner = np.full((height, width), -1, dtype=np.int64)
    if len(u) == 0:
        return winner
    idx = np.arange(len(u))
    order = np.lexsort((idx, depth))
    flat = (v * width + u)[order]
    _, first = np.unique(flat, return_index=True)
    chosen = order[first]
    winner.ravel()[flat[first]] = chosen
    return winner


# --------------------------------------------------------------------------
# 4-connected component of equal-valued cells containing a seed


@njit
def flood_fill_nb(codes, row, col):
    h, w = codes.shape
    mask = np.zeros((h, w), dtype=np.bool_)
    target = codes[row, col]
    stack = np.empty(h * w, dtype=np.int64)
    top = 0
    stack[top] = row * w + col
    top += 1
    mask[row, col] = True
    while top > 0:
        top -= 1
        p = stack[top]
        r = p // w
        c = p - r * w
        if r > 0 and not mask[r - 1, c] and codes[r - 1, c] == target:
            mask[r - 1, c] = True
            stack[top] = p - w
            top += 1
        if r < h - 1 and not mask[r + 1, c] and codes[r + 1, c] == target:
            mask[r + 1, c] = True
            stack[top] = p + w
            top += 1
        if c > 0 and not mask[r, c - 1] and codes[r, c - 1] == target:
            mask[r, c - 1] = True
            stack[top] = p - 1
            top += 1
        if c < w - 1 and not mask[r, c + 1] and codes[r, c + 1] == target:
            mask[r, c + 1] = True
            stack[top] = p + 1
            top += 1
    return mask


def dilate4(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def flood_fill_np(codes, row, col):
    allowed = codes == codes[row, col]
    mask = np.zeros(codes.shape, dtype=bool)
    mask[row, col] = True
    while True:
        grown = dilate4(mask) & allowed
        if np.array_equal(grown, mask):
            return mask
        mask = grown


# --------------------------------------------------------------------------
# greedy box NMS over inclusive pixel boxes (x0, y0, x1, y1)


@njit
def box_iou_inclusive(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = float(iw * ih)
    area_a = float((a[2] - a[0] + 1) * (a[3] - a[1] + 1))
    area_b = float((b[2] - b[0] + 1) * (b[3] - b[1] + 1))
    return inter / (area_a + area_b - inter)


@njit
def greedy_nms_nb(boxes, order, thresh):
    keep = np.zeros(boxes.shape[0], dtype=np.bool_)
    kept = np.empty(boxes.shape[0], dtype=np.int64)
    n_kept = 0
    for i in order:
        ok = True
        for j in range(n_kept):
            if box_iou_inclusive(boxes[kept[j]], boxes[i]) > thresh:
                ok = False
                break
        if ok:
            keep[i] = True
            kept[n_kept] = i
            n_kept += 1
    return keep


def greedy_nms_np(boxes, order, thresh):
    boxes = np.asarray(boxes, dtype=np.int64)
    keep = np.zeros(len(boxes), dtype=bool)
    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0 + 1) * (y1 - y0 + 1)
    order = np.asarray(order, dtype=np.int64)
    while order.size:
        i = order[0]
        keep[i] = True
        rest = order[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]) + 1
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]) + 1
        inter = (np.maximum(iw, 0) * np.maximum(ih, 0)).astype(np.float64)
        iou = inter / (areas[i] + areas[rest] - inter)
        order = rest[iou <= thresh]
    return keep


if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_nb
    zbuffer = zbuffer_nb
    flood_fill = flood_fill_nb
    greedy_nms = greedy_nms_nb
else:
    scatter_add_rows = scatter_add_rows_np
    zbuffer = zbuffer_np
    flood_fill = flood_fill_np
    greedy_nms = greedy_nms_np
