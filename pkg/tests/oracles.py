"""Independent reference implementations the library is checked against.

Each one takes a different route from the code under test: loops instead
of vectorised indexing, sampling instead of polygon clipping, re-ranking
instead of cumulative sums.
"""
import math

import numpy as np

from monotakd.boxes import iou_bev


def direct_conv2d(x, w, b=None, dilation=1):
    """Four-loop reference cross-correlation with zero padding."""
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    out = np.zeros((H, W, cout))
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    for i in range(H):
        for j in range(W):
            for a in range(kh):
                for c in range(kw):
                    r, s = i + a * dilation - ph, j + c * dilation - pw
                    if 0 <= r < H and 0 <= s < W:
                        out[i, j] += x[r, s] @ w[a, c]
    if b is not None:
        out += b
    return out


def brute_force_voxelize(points, spec):
    """Per-point loop: returns (normalised grid, raw counts)."""
    grid = np.zeros(tuple(spec.shape) + (2,))
    counts = np.zeros(spec.shape, dtype=int)
    sums = np.zeros(spec.shape)
    lo, cell = np.asarray(spec.lo), spec.cell
    for p in points:
        if not all(lo[a] <= p[a] < spec.hi[a] for a in range(3)):
            continue
        idx = tuple(min(int((p[a] - lo[a]) // cell[a]), spec.shape[a] - 1) for a in range(3))
        counts[idx] += 1
        sums[idx] += p[3]
    nz = counts > 0
    if nz.any():
        grid[..., 0][nz] = counts[nz] / counts.max()
        grid[..., 1][nz] = sums[nz] / counts[nz]
    return grid, counts


def _inside(box, s):
    c, si = np.cos(box[6]), np.sin(box[6])
    d = s - box[:2]
    along = d[:, 0] * c + d[:, 1] * si
    across = -d[:, 0] * si + d[:, 1] * c
    return (np.abs(along) <= box[4] / 2) & (np.abs(across) <= box[3] / 2)


def mc_iou_bev(a, b, n, rng):
    """Stratified Monte-Carlo footprint IoU: one jittered sample per grid cell."""
    from monotakd.boxes import bev_corners
    pts = np.concatenate([bev_corners(a), bev_corners(b)])
    lo, hi = pts.min(0), pts.max(0)
    k = int(np.sqrt(n))
    g = (np.stack(np.meshgrid(np.arange(k), np.arange(k)), -1).reshape(-1, 2) + rng.uniform(size=(k * k, 2))) / k
    s = lo + g * (hi - lo)
    ia, ib = _inside(a, s), _inside(b, s)
    return (ia & ib).sum() / (ia | ib).sum()


def brute_nms(boxes, scores, thresh):
    """Fixed point: a box survives iff no surviving higher-ranked box overlaps it."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    alive = {}
    for i in order:
        alive[i] = not any(alive[j] and iou_bev(boxes[i], boxes[j]) > thresh for j in alive)
    return [i for i in order if alive[i]]


def exhaustive_ap(hits, n_gt):
    """Precision/recall at every cut-off of the ranked list, then the 40-point envelope."""
    pr = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        pr.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(1, 41):
        r = i / 40
        total += max([p for rec, p in pr if rec >= r - 1e-12], default=0.0)
    return total / 40


def brute_mask(mag, q):
    """Keep every cell at or above the k-th largest value (values distinct)."""
    k = max(1, math.ceil(q * mag.size - 1e-9))
    thresh = np.sort(mag.ravel())[::-1][k - 1]
    return mag >= thresh
