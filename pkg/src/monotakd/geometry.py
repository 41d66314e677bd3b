"""Camera/LiDAR/BEV coordinate machinery.

Frames
------
LiDAR (world) frame: x forward, y left, z up, ground plane at z = 0.
Camera frame: x right, y down, z forward (optical axis).
Pixel coordinates: ``u`` is the column, ``v`` the row; integer values are
pixel centres, which are also the frustum sample positions.

Grids are indexed ``[ix, iy, iz]`` so a BEV map row is an x-slab and a column
is a y-slab.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, make

NO_BIN = -1


@dataclass(frozen=True)
class CameraCalib:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.R
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-10, rtol=0):
            raise ValueError("extrinsic rotation is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the LiDAR frame."""
        return -self.R.T @ self.t


# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAM = ((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))


def forward_camera(image_hw=(48, 64), focal=32.0, mount=(0.0, 0.0, 1.6)) -> CameraCalib:
    """Camera looking along +x from ``mount`` (LiDAR-frame metres)."""
    H, W = image_hw
    R = np.asarray(LIDAR_TO_CAM)
    t = -R @ np.asarray(mount, dtype=np.float64)
    return CameraCalib(focal, focal, (W - 1) / 2.0, (H - 1) / 2.0, LIDAR_TO_CAM, tuple(float(v) for v in t))


@dataclass(frozen=True)
class DepthBinSpec:
    D: int = 120
    d_min: float = 2.0
    d_max: float = 46.8

    def __post_init__(self):
        if self.D < 2 or not self.d_min < self.d_max:
            raise ValueError("need D >= 2 and d_min < d_max")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.D


def depth_to_bin(depth, spec: DepthBinSpec):
    """Uniform bin index of metric depth, ``NO_BIN`` outside ``[d_min, d_max)``."""
    d = np.asarray(depth, dtype=np.float64)
    k = np.floor((d - spec.d_min) / spec.width).astype(np.int64)
    k = np.minimum(k, spec.D - 1)
    ok = (d >= spec.d_min) & (d < spec.d_max)
    out = np.where(ok, k, NO_BIN)
    return int(out) if out.ndim == 0 else out


def bin_to_depth(k, spec: DepthBinSpec):
    return spec.d_min + (np.asarray(k, dtype=np.float64) + 0.5) * spec.width


def continuous_bin(depth, spec: DepthBinSpec):
    """Fractional bin coordinate; integer values land on bin centres."""
    return (np.asarray(depth, dtype=np.float64) - spec.d_min) / spec.width - 0.5


def project(points, calib: CameraCalib):
    """Pinhole projection of LiDAR-frame points ``[N,3]``.

    Returns ``(u, v, depth, behind)``; ``depth`` is camera-frame z and
    ``behind`` flags points with ``depth <= 0`` (their u, v are NaN).
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :3]
    cam = p @ calib.R.T + calib.t
    z = cam[:, 2]
    behind = z <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(behind, np.nan, calib.fx * cam[:, 0] / z + calib.cx)
        v = np.where(behind, np.nan, calib.fy * cam[:, 1] / z + calib.cy)
    return u, v, z, behind


@dataclass(frozen=True)
class VoxelGridSpec:
    lo: tuple = (2.0, -16.0, 0.0)
    hi: tuple = (34.0, 16.0, 4.0)
    shape: tuple = (32, 32, 8)

    def __post_init__(self):
        if any(n <= 0 for n in self.shape):
            raise ValueError("cell counts must be positive")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("grid extents must be increasing")

    @property
    def cell(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.shape)

    def centers(self) -> np.ndarray:
        """Voxel centres ``[nx, ny, nz, 3]``."""
        axes = [lo + (np.arange(n) + 0.5) * c for lo, n, c in zip(self.lo, self.shape, self.cell)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def bev_centers(self) -> np.ndarray:
        """Cell centres of the BEV plane ``[nx, ny, 2]``."""
        return self.centers()[:, :, 0, :2]

    def cell_index(self, xyz) -> tuple:
        xyz = np.asarray(xyz, dtype=np.float64)
        idx = np.floor((xyz - np.asarray(self.lo)) / self.cell).astype(np.int64)
        inside = np.all((xyz >= np.asarray(self.lo)) & (xyz < np.asarray(self.hi)), axis=-1)
        inside &= np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=-1)
        return idx, inside


def voxelize(points, spec: VoxelGridSpec) -> np.ndarray:
    """Bin ``[N,4]`` points (x, y, z, reflectance) into ``[nx,ny,nz,2]``.

    Channel 0 is the point count divided by the busiest cell's count, channel 1
    the mean reflectance. Points are accumulated in a canonical order (cell,
    then point values) so the result does not depend on input order.
    """
    grid = np.zeros(tuple(spec.shape) + (2,))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        return grid
    idx, inside = spec.cell_index(pts[:, :3])
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return grid
    nx, ny, nz = spec.shape
    flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], pts[:, 3], flat))
    flat, refl = flat[order], pts[order, 3]
    cells, starts, counts = np.unique(flat, return_index=True, return_counts=True)
    sums = np.add.reduceat(refl, starts)
    g = grid.reshape(-1, 2)
    g[cells, 0] = counts / counts.max()
    g[cells, 1] = sums / counts
    return grid


def height_compress(v) -> Tensor:
    """``[H,W,L,C] -> [H,W,L*C]``: height slab ``k`` becomes channel block ``k``."""
    v = as_tensor(v)
    H, W, L, C = v.shape
    return ad.reshape(v, (H, W, L * C))


def height_expand(bev, L: int):
    """Inverse of :func:`height_compress`."""
    bev = as_tensor(bev)
    H, W, LC = bev.shape
    return ad.reshape(bev, (H, W, L, LC // L))


bev_collapse = height_compress


def frustum_lift(img, depth_dist) -> Tensor:
    """Outer product ``out[h,w,d,c] = img[h,w,c] * depth_dist[h,w,d]``."""
    img, depth_dist = as_tensor(img), as_tensor(depth_dist)
    if img.shape[:2] != depth_dist.shape[:2]:
        raise ValueError(f"spatial mismatch {img.shape[:2]} vs {depth_dist.shape[:2]}")
    a, b = img.data, depth_dist.data
    out = b[:, :, :, None] * a[:, :, None, :]

    def vjp(g):
        return np.einsum("hwdc,hwd->hwc", g, b), np.einsum("hwdc,hwc->hwd", g, a)

    return make("frustum_lift", out, (img, depth_dist), vjp)


@lru_cache(maxsize=16)
def frustum_sampling_matrix(calib: CameraCalib, vspec: VoxelGridSpec, bspec: DepthBinSpec,
                            image_hw: tuple) -> sparse.csr_matrix:
    """Trilinear weights mapping frustum cells ``(v, u, bin)`` to voxel centres.

    Rows are voxels in ``[nx,ny,nz]`` raster order, columns frustum cells in
    ``[H,W,D]`` raster order. Corners outside the frustum get no weight.
    """
    H, W = image_hw
    D = bspec.D
    centers = vspec.centers().reshape(-1, 3)
    u, v, z, behind = project(centers, calib)
    k = continuous_bin(z, bspec)
    nvox = len(centers)
    front = ~behind
    rows_all, cols_all, w_all = [], [], []
    base = np.stack([v, u, k], axis=1)[front]
    vid = np.nonzero(front)[0]
    f0 = np.floor(base)
    frac = base - f0
    i0 = f0.astype(np.int64)
    for dv in (0, 1):
        for du in (0, 1):
            for dk in (0, 1):
                ii, jj, kk = i0[:, 0] + dv, i0[:, 1] + du, i0[:, 2] + dk
                w = ((frac[:, 0] if dv else 1 - frac[:, 0])
                     * (frac[:, 1] if du else 1 - frac[:, 1])
                     * (frac[:, 2] if dk else 1 - frac[:, 2]))
                ok = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W) & (kk >= 0) & (kk < D) & (w != 0)
                rows_all.append(vid[ok])
                cols_all.append((ii[ok] * W + jj[ok]) * D + kk[ok])
                w_all.append(w[ok])
    M = sparse.csr_matrix((np.concatenate(w_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                          shape=(nvox, H * W * D))
    M.sum_duplicates()
    return M


def frustum_to_voxel(f, calib: CameraCalib, vspec: VoxelGridSpec, bspec: DepthBinSpec) -> Tensor:
    """Resample a frustum ``[H,W,D,C]`` onto the voxel grid ``[nx,ny,nz,C]``."""
    f = as_tensor(f)
    H, W, D, C = f.shape
    if D != bspec.D:
        raise ValueError(f"frustum has {D} depth planes, bin spec has {bspec.D}")
    M = frustum_sampling_matrix(calib, vspec, bspec, (H, W))
    MT = M.T.tocsr()
    out = (M @ f.data.reshape(-1, C)).reshape(tuple(vspec.shape) + (C,))
    return make("frustum_to_voxel", out, (f,), lambda g: ((MT @ g.reshape(-1, C)).reshape(H, W, D, C),))


def lift_to_voxel(img, depth_dist, calib: CameraCalib, vspec: VoxelGridSpec, bspec: DepthBinSpec) -> Tensor:
    """``frustum_to_voxel(frustum_lift(img, depth_dist), ...)`` without materialising the frustum.

    The sampling matrix has at most eight entries per voxel, so folding the
    depth weights into it first is far cheaper than building ``[H,W,D,C]``.
    """
    img, depth_dist = as_tensor(img), as_tensor(depth_dist)
    H, W, C = img.shape
    if depth_dist.shape[:2] != (H, W):
        raise ValueError(f"spatial mismatch {img.shape[:2]} vs {depth_dist.shape[:2]}")
    D = depth_dist.shape[2]
    if D != bspec.D:
        raise ValueError(f"depth distribution has {D} bins, bin spec has {bspec.D}")
    M = frustum_sampling_matrix(calib, vspec, bspec, (H, W))
    pix = M.indices // D
    rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    dist = depth_dist.data.reshape(-1)
    feat = img.data.reshape(H * W, C)
    M2 = sparse.csr_matrix((M.data * dist[M.indices], pix, M.indptr), shape=(M.shape[0], H * W))
    out = (M2 @ feat).reshape(tuple(vspec.shape) + (C,))
    need_dist = depth_dist.requires_grad

    def vjp(g):
        g2 = g.reshape(-1, C)
        g_img = (M2.T @ g2).reshape(H, W, C)
        g_dist = None
        if need_dist:
            e = M.data * np.einsum("ec,ec->e", g2[rows], feat[pix])
            g_dist = np.bincount(M.indices, weights=e, minlength=H * W * D).reshape(H, W, D)
        return g_img, g_dist

    return make("lift_to_voxel", out, (img, depth_dist), vjp)
