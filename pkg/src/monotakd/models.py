"""Teacher (LiDAR), teaching assistant (camera + GT depth) and two-branch
camera student, assembled from :mod:`monotakd.nn` and :mod:`monotakd.geometry`.

Parameters are flat ``{name: array}`` dicts with ``/``-separated names. The
forward functions accept either arrays (constants) or tape tensors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .geometry import (CameraCalib, DepthBinSpec, VoxelGridSpec, depth_to_bin, frustum_lift,
                       frustum_to_voxel, height_compress, lift_to_voxel, NO_BIN)
from .nn import conv2d, conv3d, deformable_conv2d, se_block

N_REG = 8  # dx, dy, z, log w, log l, log h, sin yaw, cos yaw


@dataclass(frozen=True)
class ModelConfig:
    image_hw: tuple = (48, 64)
    image_channels: int = 3
    backbone_channels: int = 16
    frustum_channels: int = 8
    c_bev: int = 16
    teacher_channels: int = 8
    head_channels: int = 16
    bins: DepthBinSpec = DepthBinSpec(32, 2.0, 34.0)
    lidar_grid: VoxelGridSpec = VoxelGridSpec((2.0, -16.0, 0.0), (34.0, 16.0, 4.0), (32, 32, 8))
    camera_grid: VoxelGridSpec = VoxelGridSpec((2.0, -16.0, 0.0), (34.0, 16.0, 4.0), (32, 32, 4))
    atrous_rates: tuple = (1, 2, 3)
    se_reduction: int = 4
    depth_smoothing: float = 0.0  # Gaussian width (in bins) for the TA's GT depth; 0 = one-hot
    score_prior: float = 0.1

    def __post_init__(self):
        if self.lidar_grid.shape[:2] != self.camera_grid.shape[:2]:
            raise ValueError("LiDAR and camera grids must share the BEV raster")
        if tuple(self.lidar_grid.lo[:2]) != tuple(self.camera_grid.lo[:2]) or \
                tuple(self.lidar_grid.hi[:2]) != tuple(self.camera_grid.hi[:2]):
            raise ValueError("LiDAR and camera grids must share BEV extents")

    @property
    def bev_hw(self) -> tuple:
        return tuple(self.lidar_grid.shape[:2])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class DetectionSet:
    """Per-BEV-cell objectness ``score [H,W]`` and encoded boxes ``reg [H,W,8]``."""

    score: Tensor
    reg: Tensor
    logit: Tensor = field(default=None, repr=False)


# ---------------------------------------------------------------- box coding

def encode_box(box, cell_center) -> np.ndarray:
    x, y, z, w, l, h, yaw = [float(v) for v in box[:7]]
    return np.array([x - cell_center[0], y - cell_center[1], z,
                     np.log(w), np.log(l), np.log(h), np.sin(yaw), np.cos(yaw)])


def decode_boxes(reg, centers) -> np.ndarray:
    """Encoded ``[...,8]`` regression plus cell centres ``[...,2]`` -> boxes ``[...,7]``."""
    r = np.asarray(reg)
    return np.stack([r[..., 0] + centers[..., 0], r[..., 1] + centers[..., 1], r[..., 2],
                     np.exp(r[..., 3]), np.exp(r[..., 4]), np.exp(r[..., 5]),
                     np.arctan2(r[..., 6], r[..., 7])], axis=-1)


# ---------------------------------------------------------------- initialisation

def _he(rng, shape):
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv(params, rng, name, k, cin, cout, scale=1.0):
    params[f"{name}/w"] = _he(rng, tuple(k) + (cin, cout)) * scale
    params[f"{name}/b"] = np.zeros(cout)


def _head(params, rng, prefix, cin, cfg: ModelConfig):
    _conv(params, rng, f"{prefix}/head/c1", (3, 3), cin, cfg.head_channels)
    _conv(params, rng, f"{prefix}/head/c2", (3, 3), cfg.head_channels, cfg.head_channels)
    _conv(params, rng, f"{prefix}/head/out", (1, 1), cfg.head_channels, 1 + N_REG, scale=0.1)
    params[f"{prefix}/head/out/b"][0] = np.log(cfg.score_prior / (1 - cfg.score_prior))


def _backbone(params, rng, prefix, cfg: ModelConfig):
    c = cfg.backbone_channels
    _conv(params, rng, f"{prefix}/backbone/c1", (3, 3), cfg.image_channels, c)
    _conv(params, rng, f"{prefix}/backbone/c2", (3, 3), c, c)
    _conv(params, rng, f"{prefix}/backbone/c3", (3, 3), c, c)


def init_teacher(rng, cfg: ModelConfig) -> dict:
    p: dict = {}
    c = cfg.teacher_channels
    _conv(p, rng, "teacher/vox/c1", (3, 3, 3), 2, c)
    _conv(p, rng, "teacher/vox/c2", (3, 3, 3), c, c)
    _conv(p, rng, "teacher/hc", (1, 1), cfg.lidar_grid.shape[2] * c, cfg.c_bev)
    _head(p, rng, "teacher", cfg.c_bev, cfg)
    return p


def init_ta(rng, cfg: ModelConfig) -> dict:
    p: dict = {}
    _backbone(p, rng, "ta", cfg)
    _conv(p, rng, "ta/reduce", (1, 1), cfg.backbone_channels, cfg.frustum_channels)
    _conv(p, rng, "ta/collapse", (1, 1), cfg.camera_grid.shape[2] * cfg.frustum_channels, cfg.c_bev)
    _head(p, rng, "ta", cfg.c_bev, cfg)
    return p


def init_student(rng, cfg: ModelConfig, two_branch: bool = True) -> dict:
    p: dict = {}
    c = cfg.c_bev
    _backbone(p, rng, "student", cfg)
    _conv(p, rng, "student/depth", (1, 1), cfg.backbone_channels, cfg.bins.D, scale=0.1)
    branches = ("b1", "b2") if two_branch else ("b1",)
    for b in branches:
        _conv(p, rng, f"student/{b}/reduce", (1, 1), cfg.backbone_channels, cfg.frustum_channels)
        _conv(p, rng, f"student/{b}/collapse", (1, 1), cfg.camera_grid.shape[2] * cfg.frustum_channels, c)
    if two_branch:
        for i, _ in enumerate(cfg.atrous_rates):
            _conv(p, rng, f"student/sam/atrous{i}", (3, 3), c, c)
        p["student/sam/offset/w"] = np.zeros((3, 3, c, 18))
        p["student/sam/offset/b"] = np.zeros(18)
        _conv(p, rng, "student/sam/deform", (3, 3), c, c)
        hidden = c // cfg.se_reduction
        p["student/sam/se/fc1/w"] = _he(rng, (c, hidden))
        p["student/sam/se/fc1/b"] = np.zeros(hidden)
        p["student/sam/se/fc2/w"] = _he(rng, (hidden, c)) * 0.1
        p["student/sam/se/fc2/b"] = np.zeros(c)
        for i in range(3):
            _conv(p, rng, f"student/ffm/c{i}", (3, 3), c, c)
    _head(p, rng, "student", c, cfg)
    return p


# ---------------------------------------------------------------- blocks

def _c(p, name, x, dilation=1, relu=False):
    y = conv2d(x, p[f"{name}/w"], p[f"{name}/b"], dilation)
    return ad.relu(y) if relu else y


def detect_head(F, p: Mapping, prefix: str) -> DetectionSet:
    """Two 3x3 conv+ReLU layers, then a 1x1 conv to 1 objectness + 8 box channels."""
    h = _c(p, f"{prefix}/head/c1", F, relu=True)
    h = _c(p, f"{prefix}/head/c2", h, relu=True)
    out = _c(p, f"{prefix}/head/out", h)
    logit = out[:, :, 0]
    return DetectionSet(ad.sigmoid(logit), out[:, :, 1:], logit)


def backbone(img, p: Mapping, prefix: str):
    x = _c(p, f"{prefix}/backbone/c1", img, relu=True)
    x = _c(p, f"{prefix}/backbone/c2", x, relu=True)
    return _c(p, f"{prefix}/backbone/c3", x, relu=True)


def lift_to_bev(feat, depth_dist, p: Mapping, name: str, calib: CameraCalib, cfg: ModelConfig):
    """Frustum lift -> voxel resampling -> height collapse -> 1x1 conv."""
    vox = lift_to_voxel(feat, depth_dist, calib, cfg.camera_grid, cfg.bins)
    return _c(p, name, height_compress(vox))


def sam_forward(F, p: Mapping, prefix: str = "student/sam", rates=(1, 2, 3)):
    """Atrous cascade (ReLU between layers) -> deformable conv -> squeeze-excite."""
    x = F
    for i, r in enumerate(rates):
        x = _c(p, f"{prefix}/atrous{i}", x, dilation=r)
        if i < len(rates) - 1:
            x = ad.relu(x)
    x = deformable_conv2d(x, p[f"{prefix}/offset/w"], p[f"{prefix}/offset/b"],
                          p[f"{prefix}/deform/w"], p[f"{prefix}/deform/b"])
    return se_block(x, p[f"{prefix}/se/fc1/w"], p[f"{prefix}/se/fc1/b"],
                    p[f"{prefix}/se/fc2/w"], p[f"{prefix}/se/fc2/b"])


def ffm_forward(F1, F2_star, p: Mapping, prefix: str = "student/ffm"):
    """Element-wise sum then conv3x3-ReLU-conv3x3-ReLU-conv3x3."""
    F1, F2_star = as_tensor(F1), as_tensor(F2_star)
    if F1.shape != F2_star.shape:
        raise ValueError(f"FFM inputs differ in shape: {F1.shape} vs {F2_star.shape}")
    x = ad.add(F1, F2_star)
    x = _c(p, f"{prefix}/c0", x, relu=True)
    x = _c(p, f"{prefix}/c1", x, relu=True)
    return _c(p, f"{prefix}/c2", x)


# ---------------------------------------------------------------- models

def teacher_forward(p: Mapping, voxels, cfg: ModelConfig) -> dict:
    """``voxels``: the ``[nx,ny,nz,2]`` output of :func:`geometry.voxelize`."""
    voxels = as_tensor(voxels)
    if tuple(voxels.shape[:3]) != tuple(cfg.lidar_grid.shape):
        raise ValueError(f"voxel grid {voxels.shape[:3]} does not match config {cfg.lidar_grid.shape}")
    x = ad.relu(conv3d(voxels, p["teacher/vox/c1/w"], p["teacher/vox/c1/b"]))
    x = ad.relu(conv3d(x, p["teacher/vox/c2/w"], p["teacher/vox/c2/b"]))
    bev = _c(p, "teacher/hc", height_compress(x))
    return {"bev": bev, "det": detect_head(bev, p, "teacher")}


def gt_depth_distribution(depth, bins: DepthBinSpec, smoothing: float = 0.0) -> np.ndarray:
    """Per-pixel one-hot over depth bins (all-zero for sky / out of range)."""
    d = np.asarray(depth, dtype=np.float64)
    k = depth_to_bin(d, bins)
    H, W = d.shape
    out = np.zeros((H, W, bins.D))
    valid = k != NO_BIN
    if smoothing <= 0:
        ii, jj = np.nonzero(valid)
        out[ii, jj, k[valid]] = 1.0
        return out
    centers = np.arange(bins.D)
    kc = (d - bins.d_min) / bins.width - 0.5
    g = np.exp(-0.5 * ((centers[None, None, :] - kc[..., None]) / smoothing) ** 2)
    g /= g.sum(axis=-1, keepdims=True)
    out[valid] = g[valid]
    return out


def ta_forward(p: Mapping, image, gt_depth, calib: CameraCalib, cfg: ModelConfig) -> dict:
    image = as_tensor(image)
    if tuple(image.shape[:2]) != tuple(np.shape(gt_depth)[:2]):
        raise ValueError("depth map and image sizes differ")
    dist = gt_depth if np.ndim(gt_depth) == 3 else gt_depth_distribution(gt_depth, cfg.bins, cfg.depth_smoothing)
    feat = _c(p, "ta/reduce", backbone(image, p, "ta"))
    bev = lift_to_bev(feat, dist, p, "ta/collapse", calib, cfg)
    return {"bev": bev, "det": detect_head(bev, p, "ta")}


def student_forward(p: Mapping, image, calib: CameraCalib, cfg: ModelConfig, two_branch: bool = True) -> dict:
    """Returns ``bev1``, ``bev2``, ``bev2_star``, ``fused`` (all ``[H,W,C_bev]``),
    ``det`` and the predicted depth distribution ``depth``.

    The single-branch variant (``two_branch=False``) has no SAM or FFM and
    feeds branch 1 straight to the head.
    """
    f = backbone(as_tensor(image), p, "student")
    depth = ad.softmax(_c(p, "student/depth", f), axis=-1)
    bev1 = lift_to_bev(_c(p, "student/b1/reduce", f), depth, p, "student/b1/collapse", calib, cfg)
    out = {"depth": depth, "bev1": bev1}
    if two_branch:
        bev2 = lift_to_bev(_c(p, "student/b2/reduce", f), depth, p, "student/b2/collapse", calib, cfg)
        bev2_star = sam_forward(bev2, p, rates=cfg.atrous_rates)
        fused = ffm_forward(bev1, bev2_star, p)
        out.update(bev2=bev2, bev2_star=bev2_star, fused=fused)
    else:
        out["fused"] = bev1
    out["det"] = detect_head(out["fused"], p, "student")
    return out


def is_two_branch(params: Mapping) -> bool:
    return any(k.startswith("student/b2/") for k in params)
