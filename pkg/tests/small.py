"""A scaled-down data and model configuration for fast end-to-end tests."""
import dataclasses

from monotakd import models as M
from monotakd import synth
from monotakd import train as T
from monotakd.geometry import DepthBinSpec, VoxelGridSpec

DATA = synth.DataConfig(
    n_train=6, n_eval=3,
    lidar=synth.LidarConfig(n_azimuth=90, n_elevation=12),
    image=synth.ImageConfig(hw=(12, 16), focal=8.0))
MODEL = M.ModelConfig(
    image_hw=(12, 16), backbone_channels=4, frustum_channels=3, c_bev=4, teacher_channels=2, head_channels=4,
    bins=DepthBinSpec(8, 2.0, 34.0),
    lidar_grid=VoxelGridSpec((2.0, -16.0, 0.0), (34.0, 16.0, 4.0), (8, 8, 2)),
    camera_grid=VoxelGridSpec((2.0, -16.0, 0.0), (34.0, 16.0, 4.0), (8, 8, 2)),
    se_reduction=2)
CALIB = DATA.calib()


def scenes(seed=0):
    ds = synth.make_dataset(seed, DATA)
    return T.prepare(ds["train"], MODEL), T.prepare(ds["eval"], MODEL)


def tcfg(stage, **kw):
    base = dict(stage=stage, epochs=2, batch_size=2, lr_max=5e-3, optimizer="adam", feature_epochs=1)
    base.update(kw)
    return T.TrainConfig(**base)


def frozen(train, seed=0):
    teacher = T.train_stage(tcfg("teacher", seed=seed), MODEL, train, CALIB).params
    ta = T.train_stage(dataclasses.replace(tcfg("ta", seed=seed), ta_align=False), MODEL, train, CALIB).params
    return teacher, ta, T.frozen_targets(train, teacher, ta, MODEL, CALIB)
