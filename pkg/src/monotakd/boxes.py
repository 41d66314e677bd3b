"""Oriented 3D boxes ``(x, y, z, w, l, h, yaw)`` in the LiDAR frame.

``z`` is the box centre height, ``l`` runs along the heading ``yaw``
(counter-clockwise from +x) and ``w`` across it.
"""
from __future__ import annotations

import numpy as np


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise footprint corners ``[4,2]``."""
    x, y, _, w, l, _, yaw = [float(v) for v in box[:7]]
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip(subject, a, b):
    # keep the part of subject left of the directed edge a->b
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def convex_intersection(p, q) -> list:
    """Sutherland-Hodgman clip of convex CCW polygon ``p`` by convex CCW ``q``."""
    out = [tuple(v) for v in p]
    m = len(q)
    for i in range(m):
        if not out:
            break
        out = _clip(out, tuple(q[i]), tuple(q[(i + 1) % m]))
    return out


def bev_intersection(a, b) -> float:
    return max(polygon_area(convex_intersection(bev_corners(a), bev_corners(b))), 0.0)


def iou_bev(a, b) -> float:
    area_a = float(a[3] * a[4])
    area_b = float(b[3] * b[4])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a, b) -> float:
    vol_a = float(a[3] * a[4] * a[5])
    vol_b = float(b[3] * b[4] * b[5])
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    za0, za1 = a[2] - a[5] / 2, a[2] + a[5] / 2
    zb0, zb1 = b[2] - b[5] / 2, b[2] + b[5] / 2
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = bev_intersection(a, b) * dz
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def nms(boxes, scores, iou_thresh: float) -> list:
    """Greedy score-descending suppression; returns kept indices."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_bev(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def ray_box(origin, dirs, box):
    """First intersection of rays with a solid box.

    Returns ``(t, normal)``: hit parameter (``inf`` on miss) and the unit
    outward face normal in the LiDAR frame. Rays starting inside report the
    exit face.
    """
    dirs = np.atleast_2d(dirs)
    x, y, z, w, l, h, yaw = [float(v) for v in box[:7]]
    c, s = np.cos(yaw), np.sin(yaw)
    rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
    o = rot_t @ (np.asarray(origin, dtype=np.float64) - np.array([x, y, z]))
    d = dirs @ rot_t.T
    half = np.array([l / 2, w / 2, h / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    par = d == 0
    inside_slab = np.abs(o) <= half
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    tnear = tmin.max(axis=1)
    tfar = tmax.min(axis=1)
    near_axis = tmin.argmax(axis=1)
    far_axis = tmax.argmin(axis=1)
    hit = (tnear <= tfar) & (tfar > 0)
    use_near = tnear > 0
    t = np.where(hit, np.where(use_near, tnear, tfar), np.inf)
    axis = np.where(use_near, near_axis, far_axis)
    rows = np.arange(len(d))
    n_local = np.zeros_like(d)
    comp = d[rows, axis]
    n_local[rows, axis] = np.where(use_near, -np.sign(comp), np.sign(comp))
    normal = n_local @ rot_t  # box -> world
    return t, normal


def cast_rays(origin, dirs, boxes, ground: bool = True, max_range: float = 80.0):
    """Nearest hit among boxes and the ground plane ``z = 0``.

    Returns ``(t, normal, hit_id)`` with ``hit_id`` = box index, ``-1`` for
    ground and ``-2`` for no hit (``t = inf``).
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    hit_id = np.full(n, -2, dtype=np.int64)
    if ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origin[2] / dirs[:, 2]
        ok = (dirs[:, 2] < 0) & (tg > 0)
        best_t = np.where(ok, tg, np.inf)
        best_n[ok] = (0.0, 0.0, 1.0)
        hit_id[ok] = -1
    for k, box in enumerate(boxes):
        t, nrm = ray_box(origin, dirs, box)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = nrm[closer]
        hit_id[closer] = k
    far = best_t > max_range
    best_t[far] = np.inf
    hit_id[far] = -2
    best_n[far] = 0.0
    return best_t, best_n, hit_id
