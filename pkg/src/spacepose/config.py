"""INI experiment configuration: scene, sequences, model and per-stage training settings.

Sections::

    [scene]            SceneConfig fields plus fx, fy, cx, cy
    [sequence NAME]    split (train|test), guidance, tumbling and per-sequence scene overrides
    [model]            widths, hidden, layers, in_channels, first_kernel, dropout, cnn_only, az_step, el_step
    [stage1] [stage2] [stage3]   StageConfig fields

Tuple values are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from spacepose import geometry as geo
from spacepose import scenegen as sg
from spacepose.backbone import BackboneConfig
from spacepose.errors import ConfigError
from spacepose.model import ModelConfig
from spacepose.recurrent import ZoneoutConfig
from spacepose.trainer import StageConfig

GUIDANCE_KEYS = {"range", "start", "end", "lateral_periods"}
TUMBLING_KEYS = {"axis", "rate", "axis2", "rate2", "tilt", "precession_rate", "initial"}
SCENE_KEYS = {f.name for f in fields(sg.SceneConfig)} - {"intrinsics"}


@dataclass(frozen=True)
class SequenceSpec:
    seq_id: str
    split: str
    guidance: sg.GuidanceProfile
    tumbling: sg.TumblingProfile
    scene: sg.SceneConfig


@dataclass
class ExperimentConfig:
    scene: sg.SceneConfig = field(default_factory=sg.SceneConfig)
    sequences: list[SequenceSpec] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[int, StageConfig] = field(default_factory=lambda: {s: StageConfig(stage=s) for s in (1, 2, 3)})

    def split(self, name: str) -> list[SequenceSpec]:
        return [s for s in self.sequences if s.split == name]


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(","))
        if default is None:
            return None if text.lower() in ("", "none") else int(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc


def _fill(obj, values: dict[str, str], where: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        updates[key] = _coerce(known[key], text, key)
    return replace(obj, **updates) if updates else obj


def _scene(section, base: sg.SceneConfig, where: str) -> sg.SceneConfig:
    vals = dict(section)
    k = base.intrinsics
    kvals = {n: float(vals.pop(n)) for n in ("fx", "fy", "cx", "cy") if n in vals}
    if kvals:
        base = replace(base, intrinsics=geo.CameraIntrinsics(**{**dataclasses.asdict(k), **kvals}))
    return _fill(base, vals, where)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = ExperimentConfig()
    if cp.has_section("scene"):
        cfg.scene = _scene(cp["scene"], cfg.scene, "scene")
    for name in cp.sections():
        if name == "scene" or name in ("model", "stage1", "stage2", "stage3"):
            continue
        if not name.startswith("sequence "):
            raise ConfigError(f"unknown section [{name}]")
        cfg.sequences.append(_sequence(name.split(None, 1)[1].strip(), dict(cp[name]), cfg.scene))
    ids = [s.seq_id for s in cfg.sequences]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sequence ids")
    if cp.has_section("model"):
        cfg.model = _model(dict(cp["model"]))
    for s in (1, 2, 3):
        if cp.has_section(f"stage{s}"):
            cfg.stages[s] = _fill(StageConfig(stage=s), dict(cp[f"stage{s}"]), f"stage{s}")
    return cfg


def _sequence(seq_id: str, vals: dict, base: sg.SceneConfig) -> SequenceSpec:
    where = f"sequence {seq_id}"
    split = vals.pop("split", "train")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be train or test in [{where}]")
    g = {"kind": vals.pop("guidance", "fixed-range"), "approach": vals.pop("approach", "v-bar")}
    t = {"kind": vals.pop("tumbling", "single-axis")}
    gvals = {k: vals.pop(k) for k in list(vals) if k in GUIDANCE_KEYS}
    tvals = {k: vals.pop(k) for k in list(vals) if k in TUMBLING_KEYS}
    scene = _scene({k: v for k, v in vals.items() if k in SCENE_KEYS | {"fx", "fy", "cx", "cy"}}, base, where)
    extra = set(vals) - SCENE_KEYS - {"fx", "fy", "cx", "cy"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in [{where}]")
    gp = sg.GuidanceProfile(kind=g["kind"], approach=g["approach"], duration=scene.duration)
    gp = _fill(gp, gvals, where)
    tp = _fill(sg.TumblingProfile(kind=t["kind"]), tvals, where)
    return SequenceSpec(seq_id, split, gp, tp, scene)


def _model(vals: dict) -> ModelConfig:
    bb = {k: vals.pop(k) for k in list(vals) if k in ("widths", "in_channels", "first_kernel", "dropout")}
    backbone = _fill(BackboneConfig(), bb, "model")
    grid = _fill(geo.ViewsphereGrid(), {k: vals.pop(k) for k in list(vals) if k in ("az_step", "el_step")},
                 "model")
    zone = {}
    if "zoneout" in vals:
        z = float(vals.pop("zoneout"))
        zone = {"zoneout": ZoneoutConfig(z, z)}
    base = ModelConfig(backbone=backbone, grid=grid, **zone)
    return _fill(base, vals, "model")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------- the toy experiment

TOY_CONFIG = """\
[scene]
width = 64
height = 64
fx = 64
fy = 64
cx = 31.5
cy = 31.5
fps = 10
duration = 60

[sequence train_01]
split = train
guidance = fixed-range
approach = v-bar
tumbling = single-axis
sun_direction = -0.4, -0.5, -1
glare = 1.0
seed = 101

[sequence train_02]
split = train
guidance = fixed-range
approach = r-bar
tumbling = precession
sun_direction = 0.5, -0.3, -1
glare = 1.5
seed = 102

[sequence train_03]
split = train
guidance = forced-translation
approach = v-bar
tumbling = two-axis
sun_direction = 0.3, 0.2, -1
glare = 0.8
seed = 103

[sequence train_04]
split = train
guidance = forced-translation
approach = r-bar
tumbling = single-axis
sun_direction = 0.6, 0.05, -1
glare = 2.0
seed = 104

[sequence train_05]
split = train
guidance = fixed-range
approach = r-bar
tumbling = two-axis
sun_direction = -0.6, 0.4, -1
glare = 1.2
seed = 105

[sequence train_06]
split = train
guidance = forced-translation
approach = v-bar
tumbling = precession
sun_direction = -0.2, 0.3, -1
glare = 1.0
seed = 106

[sequence test_glare]
split = test
guidance = fixed-range
approach = r-bar
tumbling = single-axis
sun_direction = 0.5, 0.02, -1
glare = 3.0
seed = 201

[sequence test_approach]
split = test
guidance = forced-translation
approach = v-bar
tumbling = two-axis
sun_direction = -0.3, -0.4, -1
glare = 1.0
seed = 202

[model]
widths = 16, 32, 64, 128, 256
hidden = 128
layers = 2
in_channels = 4

[stage1]
epochs = 15
lr = 0.001
schedule = cyclical
batch = 16
n_s2 = 40
k_t = 4
seed = 1

[stage2]
epochs = 12
lr = 0.0005
schedule = cyclical
batch = 8
window = 8
stride = 4
partition_choices = 3.2, 6.4
freeze_bn = true
seed = 2

[stage3]
epochs = 6
lr = 0.00001
schedule = step
batch = 8
window = 8
stride = 4
partition_choices = 3.2, 6.4
freeze_bn = true
patience = 10
seed = 3
"""


def toy_config() -> ExperimentConfig:
    return parse_config(TOY_CONFIG)
