"""Independent brute-force reference implementations used by the tests.

Everything here is plain loops over numpy scalars so it shares no code path
with the vectorized library.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, dilation=1, padding=0):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - (kh - 1) * dilation - 1) // stride + 1
    wo = (wd + 2 * padding - (kw - 1) * dilation - 1) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[ki])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, oy * stride + i * dilation, ox * stride + j * dilation] * w[ki, ci, i, j]
                    out[ni, ki, oy, ox] = acc
    return out


def matmul_loop(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def layer_norm_row(row, gamma, beta, eps):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * g + bt for v, g, bt in zip(row, gamma, beta)]


def gelu_scalar(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def attention_loop(x, wq, bq, wk, bk, wv, bv, wo, bo, num_heads):
    """Per-batch, per-head, per-query loops; linear weights are stored ``[in, out]``."""
    bsz, length, dim = x.shape
    hd = dim // num_heads
    out = np.zeros_like(x, dtype=np.float64)
    for bi in range(bsz):
        q = x[bi] @ wq + bq
        k = x[bi] @ wk + bk
        v = x[bi] @ wv + bv
        heads = np.zeros((length, dim))
        for h in range(num_heads):
            sl = slice(h * hd, (h + 1) * hd)
            for i in range(length):
                scores = [float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(hd) for j in range(length)]
                p = softmax_row(scores)
                for j in range(length):
                    heads[i, sl] += p[j] * v[j, sl]
        out[bi] = heads @ wo + bo
    return out


def bilinear_resize_grid(table, grid_in, grid_out):
    """Separable half-pixel bilinear interpolation of a ``[Hi*Wi, D]`` token table."""
    hi, wi = grid_in
    ho, wo = grid_out
    grid = table.reshape(hi, wi, -1)

    def src(o, n_in, n_out):
        s = (o + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    out = np.zeros((ho, wo, grid.shape[-1]))
    for y in range(ho):
        y0, y1, fy = src(y, hi, ho)
        for x in range(wo):
            x0, x1, fx = src(x, wi, wo)
            out[y, x] = (
                (1 - fy) * (1 - fx) * grid[y0, x0]
                + (1 - fy) * fx * grid[y0, x1]
                + fy * (1 - fx) * grid[y1, x0]
                + fy * fx * grid[y1, x1]
            )
    return out.reshape(ho * wo, -1)


# ------------------------------------------------------------------ detection


def iou_plain(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def greedy_labels(dets, gts, thr):
    """dets: list of (image, box, score); gts: list of (image, box). Exhaustive greedy walk.

    Visits detections by descending score (stable on ties), and for each one
    scans every ground truth to find the best unclaimed same-image match.
    Returns TP flags in visiting order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    claimed = set()
    flags = []
    for i in order:
        img, box, _ = dets[i]
        best, best_iou = None, -1.0
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or j in claimed:
                continue
            o = iou_plain(box, gbox)
            if o >= thr and o > best_iou:
                best, best_iou = j, o
        if best is not None:
            claimed.add(best)
        flags.append(best is not None)
    return flags


def ap_101(flags, n_gt):
    """101-point AP computed pointwise: at each recall level take the max precision at any recall >= it."""
    tp = 0
    points = []
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for r in range(101):
        level = r / 100
        cands = [p for rec, p in points if rec >= level]
        total += max(cands) if cands else 0.0
    return total / 101


def map_brute(dets, gts, thresholds):
    """dets: (image, cls, box, score); gts: (image, cls, box). Returns {cls: {thr: ap}}."""
    classes = sorted({g[1] for g in gts})
    out = {}
    for c in classes:
        cd = [(d[0], d[2], d[3]) for d in dets if d[1] == c]
        cg = [(g[0], g[2]) for g in gts if g[1] == c]
        out[c] = {t: ap_101(greedy_labels(cd, cg, t), len(cg)) for t in thresholds}
    return out
