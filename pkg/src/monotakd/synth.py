"""Procedural driving scenes: oriented boxes on a ground plane, a spinning
LiDAR, and a forward camera that renders a depth map and a 3-channel proxy
image. Every generator is a pure function of ``(seed, cfg)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .boxes import bev_corners, cast_rays, iou_bev
from .geometry import CameraCalib, forward_camera

SKY = -1.0  # depth-map sentinel for pixels that hit nothing
GROUND_ALBEDO = 0.25


@dataclass(frozen=True)
class SceneConfig:
    n_boxes: tuple = (1, 4)
    x_range: tuple = (6.0, 26.0)
    y_max: float = 12.0
    fov_slope: float = 0.75  # |y| <= fov_slope * x - 1 keeps boxes in view
    width: tuple = (1.5, 2.0)
    length: tuple = (3.2, 4.6)
    height: tuple = (1.3, 1.8)
    yaw: tuple = (-np.pi / 4, np.pi / 4)
    albedo: tuple = (0.5, 1.0)
    extents_lo: tuple = (2.0, -16.0, 0.0)
    extents_hi: tuple = (34.0, 16.0, 4.0)
    max_iou: float = 0.05
    max_tries: int = 2000


@dataclass(frozen=True)
class LidarConfig:
    mount: tuple = (0.0, 0.0, 1.6)
    n_azimuth: int = 360
    azimuth: tuple = (-np.pi / 3, np.pi / 3)
    n_elevation: int = 32
    elevation: tuple = (np.radians(-25.0), np.radians(4.0))
    noise: float = 0.02
    ground: bool = True
    max_range: float = 60.0


@dataclass(frozen=True)
class ImageConfig:
    hw: tuple = (48, 64)
    focal: float = 32.0
    noise: float = 0.01
    ground: bool = True
    d_ref: float = 2.0  # inverse-depth channel is d_ref / depth


@dataclass
class Scene:
    boxes: np.ndarray  # [K,7]
    albedo: np.ndarray  # [K]
    seed: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1)


@dataclass
class Views:
    image: np.ndarray  # [H,W,3]
    depth: np.ndarray  # [H,W], SKY where nothing is hit
    hit_id: np.ndarray = field(default=None, repr=False)


def scene_rng(seed: int, index: int | None = None, stream: int = 0) -> np.random.Generator:
    key = [int(seed), stream] if index is None else [int(seed), int(index), stream]
    return np.random.default_rng(np.random.SeedSequence(key))


def _fits(box, cfg: SceneConfig) -> bool:
    c = bev_corners(box)
    lo, hi = cfg.extents_lo, cfg.extents_hi
    if c[:, 0].min() < lo[0] or c[:, 0].max() > hi[0] or c[:, 1].min() < lo[1] or c[:, 1].max() > hi[1]:
        return False
    return box[2] + box[5] / 2 <= hi[2]


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig(), n_boxes: int | None = None) -> Scene:
    """Rejection-sample non-overlapping boxes resting on the ground."""
    rng = scene_rng(seed, stream=1)
    if n_boxes is None:
        n_boxes = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    boxes = []
    tries = 0
    while len(boxes) < n_boxes:
        tries += 1
        if tries > cfg.max_tries:
            raise RuntimeError(f"could not place {n_boxes} boxes in {cfg.max_tries} tries; config too crowded")
        x = rng.uniform(*cfg.x_range)
        ylim = min(cfg.y_max, cfg.fov_slope * x - 1.0)
        if ylim <= 0:
            continue
        y = rng.uniform(-ylim, ylim)
        w, l, h = rng.uniform(*cfg.width), rng.uniform(*cfg.length), rng.uniform(*cfg.height)
        yaw = rng.uniform(*cfg.yaw)
        box = np.array([x, y, h / 2, w, l, h, yaw])
        if not _fits(box, cfg):
            continue
        if any(iou_bev(box, b) >= cfg.max_iou for b in boxes):
            continue
        boxes.append(box)
    albedo = rng.uniform(*cfg.albedo, size=len(boxes))
    return Scene(np.array(boxes).reshape(-1, 7), albedo, seed)


def lidar_scan(scene: Scene, cfg: LidarConfig = LidarConfig()) -> np.ndarray:
    """First-return points ``[N,4]`` = (x, y, z, reflectance) from the mount."""
    az = np.linspace(*cfg.azimuth, cfg.n_azimuth)
    el = np.linspace(*cfg.elevation, cfg.n_elevation)
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origin = np.asarray(cfg.mount, dtype=np.float64)
    t, normal, hit = cast_rays(origin, dirs, scene.boxes, ground=cfg.ground, max_range=cfg.max_range)
    ok = np.isfinite(t)
    if not ok.any():
        return np.zeros((0, 4))
    t, normal, hit, dirs = t[ok], normal[ok], hit[ok], dirs[ok]
    if cfg.noise > 0:
        rng = scene_rng(scene.seed, stream=2)
        t = t + rng.normal(0.0, cfg.noise, size=t.shape)
    pts = origin + t[:, None] * dirs
    albedo = np.where(hit >= 0, scene.albedo[np.maximum(hit, 0)] if len(scene.albedo) else 0.0, GROUND_ALBEDO)
    refl = albedo * np.abs(np.sum(normal * dirs, axis=1))
    return np.concatenate([pts, refl[:, None]], axis=1)


def pixel_rays(calib: CameraCalib, hw) -> np.ndarray:
    """LiDAR-frame ray directions through pixel centres, scaled so camera z = 1."""
    H, W = hw
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cam = np.stack([(u - calib.cx) / calib.fx, (v - calib.cy) / calib.fy, np.ones_like(u)], axis=-1)
    return cam.reshape(-1, 3) @ calib.R  # R^T applied to row vectors


def render_views(scene: Scene, calib: CameraCalib, cfg: ImageConfig = ImageConfig()) -> Views:
    """Ray-cast the camera: metric depth map plus a proxy image.

    Image channels: ``d_ref / depth`` (normalised inverse depth), Lambertian
    shade ``|n . ray|``, and surface albedo, each with Gaussian pixel noise.
    Sky pixels are zero before noise.
    """
    H, W = cfg.hw
    dirs = pixel_rays(calib, (H, W))
    t, normal, hit = cast_rays(calib.center, dirs, scene.boxes, ground=cfg.ground)
    ok = np.isfinite(t)
    # rays have unit camera-z, so the ray parameter is the camera-frame depth
    depth = np.where(ok, t, SKY)
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    shade = np.where(ok, np.abs(np.sum(normal * unit, axis=1)), 0.0)
    box_albedo = scene.albedo[np.maximum(hit, 0)] if len(scene.albedo) else np.zeros(len(hit))
    albedo = np.where(hit >= 0, box_albedo, np.where(hit == -1, GROUND_ALBEDO, 0.0))
    with np.errstate(divide="ignore"):
        inv = np.where(ok, cfg.d_ref / np.where(ok, t, 1.0), 0.0)
    image = np.stack([inv, shade, albedo], axis=-1).reshape(H, W, 3)
    if cfg.noise > 0:
        rng = scene_rng(scene.seed, stream=3)
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return Views(image, depth.reshape(H, W), hit.reshape(H, W))


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 256
    n_eval: int = 64
    scene: SceneConfig = SceneConfig()
    lidar: LidarConfig = LidarConfig()
    image: ImageConfig = ImageConfig()

    def calib(self) -> CameraCalib:
        return forward_camera(self.image.hw, self.image.focal, self.lidar.mount)


def make_record(seed: int, index: int, cfg: DataConfig) -> dict:
    scene_seed = int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])
    scene = gen_scene(scene_seed, cfg.scene)
    points = lidar_scan(scene, cfg.lidar)
    views = render_views(scene, cfg.calib(), cfg.image)
    return {"boxes": scene.boxes, "albedo": scene.albedo, "points": points,
            "image": views.image, "depth": views.depth,
            "seed": np.array([scene_seed], dtype=np.int64)}


def make_dataset(seed: int, cfg: DataConfig = DataConfig()) -> dict:
    """``{"train": [records], "eval": [records]}``; eval uses a disjoint index range."""
    train = [make_record(seed, i, cfg) for i in range(cfg.n_train)]
    evals = [make_record(seed, 1_000_000 + i, cfg) for i in range(cfg.n_eval)]
    return {"train": train, "eval": evals}


def write_dataset(path, dataset: dict) -> Path:
    records = []
    for split in ("train", "eval"):
        for i, rec in enumerate(dataset.get(split, [])):
            for key in sorted(rec):
                records.append((f"{split}/{i:05d}/{key}", rec[key]))
    return container.write(path, records)


def read_dataset(path) -> dict:
    raw = container.read(path)
    out: dict = {"train": {}, "eval": {}}
    for name, arr in raw.items():
        split, idx, key = name.split("/", 2)
        out.setdefault(split, {}).setdefault(int(idx), {})[key] = arr
    return {split: [recs[i] for i in sorted(recs)] for split, recs in out.items()}
