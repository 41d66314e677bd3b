"""Run configuration: one JSON document covering data, model, the three
training stages, evaluation and the ablation sweep.

Every section maps onto a dataclass; unknown keys and wrongly typed values
are rejected before any work starts.
"""
from __future__ import annotations

import json
import typing
from dataclasses import MISSING, asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path

from . import distill as dl
from .models import ModelConfig
from .synth import DataConfig, ImageConfig, LidarConfig, SceneConfig
from .train import EvalConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    n_train: int = 256
    n_eval: int = 64
    scene: SceneConfig = SceneConfig()
    lidar: LidarConfig = LidarConfig()
    image: ImageConfig = ImageConfig()


@dataclass(frozen=True)
class StageSection:
    epochs: int = 20
    batch_size: int = 4
    lr_max: float = 5e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 10.0
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    feature_epochs: int = 0


@dataclass(frozen=True)
class DistillSection:
    keep_quantile: float = 0.3
    qfl_beta: float = 2.0
    fg_thresh: float = 0.5
    heat_sigma: float = 1.0
    ta_align: bool = True
    depth_supervision: bool = False
    w_imd: float = 1.0
    w_cmrd: float = 1.0
    w_logit: float = 1.0

    def __post_init__(self):
        dl.MaskConfig(self.keep_quantile)
        if self.qfl_beta < 0 or not 0 < self.fg_thresh < 1 or not self.heat_sigma > 0:
            raise ValueError("need qfl_beta >= 0, 0 < fg_thresh < 1 and heat_sigma > 0")


@dataclass(frozen=True)
class AblationSection:
    """The sweep runs teacher, assistant and five students per seed on one
    core, so it keeps the default dataset but uses shorter schedules than a
    single run. The student keeps the one-third feature-only phase."""

    modes: tuple = dl.MODES
    seeds: tuple = (0, 1, 2)
    smooth_window: int = 5
    n_train: int = 256
    n_eval: int = 64
    teacher_epochs: int = 10
    ta_epochs: int = 15
    student_epochs: int = 10
    feature_epochs: int = 3


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelConfig = ModelConfig()
    teacher: StageSection = StageSection(epochs=20)
    ta: StageSection = StageSection(epochs=10)
    student: StageSection = StageSection(epochs=30, feature_epochs=10)
    distill: DistillSection = DistillSection()
    eval: EvalConfig = EvalConfig()
    ablation: AblationSection = AblationSection()
    mode: str = "IMD+CMRD"

    def __post_init__(self):
        if self.mode not in dl.MODES:
            raise ConfigError(f"mode: unknown ablation mode {self.mode!r}; expected one of {dl.MODES}")
        bad = [m for m in self.ablation.modes if m not in dl.MODES]
        if bad:
            raise ConfigError(f"ablation.modes: unknown mode(s) {bad}")
        if self.data.n_train < 1 or self.data.n_eval < 1:
            raise ConfigError("data: n_train and n_eval must be positive")
        if tuple(self.data.image.hw) != tuple(self.model.image_hw):
            raise ConfigError(f"data.image.hw {tuple(self.data.image.hw)} differs from model.image_hw "
                              f"{tuple(self.model.image_hw)}")
        for stage in ("teacher", "ta", "student"):
            self.train_config(stage)

    def data_config(self) -> DataConfig:
        d = self.data
        return DataConfig(n_train=d.n_train, n_eval=d.n_eval, scene=d.scene, lidar=d.lidar, image=d.image)

    def for_ablation(self) -> "RunConfig":
        """This configuration with the sweep's dataset size and schedules."""
        a = self.ablation
        return replace(self, data=replace(self.data, n_train=a.n_train, n_eval=a.n_eval),
                       teacher=replace(self.teacher, epochs=a.teacher_epochs),
                       ta=replace(self.ta, epochs=a.ta_epochs),
                       student=replace(self.student, epochs=a.student_epochs, feature_epochs=a.feature_epochs))

    def train_config(self, stage: str, mode: str | None = None, seed: int | None = None) -> TrainConfig:
        s: StageSection = getattr(self, stage)
        d = self.distill
        try:
            return TrainConfig(stage=stage, epochs=s.epochs, batch_size=s.batch_size, lr_max=s.lr_max,
                               optimizer=s.optimizer, momentum=s.momentum, clip_norm=s.clip_norm,
                               warmup_frac=s.warmup_frac, div_factor=s.div_factor,
                               feature_epochs=s.feature_epochs, seed=self.seed if seed is None else seed,
                               mode=mode or self.mode, keep_quantile=d.keep_quantile, qfl_beta=d.qfl_beta,
                               fg_thresh=d.fg_thresh, heat_sigma=d.heat_sigma, ta_align=d.ta_align,
                               depth_supervision=d.depth_supervision, w_imd=d.w_imd, w_cmrd=d.w_cmrd,
                               w_logit=d.w_logit)
        except ValueError as e:
            raise ConfigError(f"{stage}: {e}") from e

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(value, default, hint, path):
    if is_dataclass(default) or (isinstance(hint, type) and is_dataclass(hint)):
        cls = type(default) if is_dataclass(default) else hint
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return build(cls, value, path, base=default if is_dataclass(default) else None)
    if isinstance(default, bool) or hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or hint is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if value is None or default is None:
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def build(cls, data: dict, path: str = "", base=None):
    """Instantiate dataclass ``cls`` from ``data`` on top of ``base`` (or defaults)."""
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    hints = _hints(cls)
    kwargs = {}
    for name, value in data.items():
        f = names[name]
        if base is not None:
            default = getattr(base, name)
        elif f.default is not MISSING:
            default = f.default
        elif f.default_factory is not MISSING:
            default = f.default_factory()
        else:
            default = None
        kwargs[name] = _coerce(value, default, hints.get(name), f"{path}.{name}" if path else name)
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply flat overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for k, v in (overrides or {}).items():
        data[k] = v
    return build(RunConfig, data)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON ({e})") from e
    return build(RunConfig, data)
