"""Render one synthetic scene and look at it from above two ways.

The LiDAR route bins the point cloud into voxels. The camera route lifts
every pixel along its ray using the ground-truth depth, then resamples the
frustum onto the same voxel grid. Both end up on one bird's-eye raster,
which is what lets the distillation losses compare them cell by cell.

Run: python3 demos/lift_scene_to_bev.py
"""
import numpy as np

from monotakd import models as M
from monotakd import synth
from monotakd.geometry import lift_to_voxel, voxelize

cfg = synth.DataConfig()
mcfg = M.ModelConfig()
rec = synth.make_record(seed=7, index=0, cfg=cfg)
print(f"{len(rec['boxes'])} boxes, {len(rec['points'])} lidar points, image {rec['image'].shape}")

# LiDAR: point counts per voxel, summed over height; ground returns dropped
pts = rec["points"][rec["points"][:, 2] > 0.2]
lidar = voxelize(pts, mcfg.lidar_grid)[..., 0].sum(axis=2)

# camera: one-hot depth lifts a constant feature along each ray
dist = M.gt_depth_distribution(rec["depth"], mcfg.bins)
ones = np.ones(rec["image"].shape[:2] + (1,))
camera = lift_to_voxel(ones, dist, cfg.calib(), mcfg.camera_grid, mcfg.bins).numpy()[..., 0].sum(axis=2)


def show(bev, title):
    # forward (+x) up, left (+y) left
    img = bev[::-1, ::-1]
    ramp = " .:-=+*#"
    top = img.max() or 1.0
    print(title)
    for row in img:
        print("  " + "".join(ramp[min(int(7 * v / top + 0.999), 7)] for v in row))


show(lidar, "lidar occupancy")
show(camera, "camera lift with true depth")
for b in rec["boxes"]:
    print(f"box at x={b[0]:5.1f} y={b[1]:5.1f} yaw={np.degrees(b[6]):6.1f} deg")
