"""Training configuration: dataclasses, "key = value" files with [sections], and flag overrides.

Sections map to sub-configs: [train], [model], [mask], [loss], [scene]. A flag
``--key value`` sets the key in whichever section owns it (``train`` wins on
clashes); ``--section.key value`` is always unambiguous.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..backbone import BackboneConfig
from ..errors import ConfigError, MissingFileError
from ..masking import MaskConfig
from ..objective import LossConfig
from ..synthdata import KINDS, SceneSpec

SEED_ENV = "MVMIM_SEED"


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_scenes: int = 1
    lr_peak: float = 2e-4
    warmup_frac: float = 0.05
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    seed: int = 0
    min_views: int = 2
    max_views: int = 8
    kinds: str = "plane,two_plane"
    log_every: int = 10
    eval_every: int = 0  # 0: evaluate only at the end
    ckpt_every: int = 0  # 0: checkpoint only at the end
    n_val_scenes: int = 8
    val_views: int = 4
    out_dir: str = "run"
    model: BackboneConfig = field(default_factory=BackboneConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    @property
    def kind_list(self) -> tuple:
        return tuple(k.strip() for k in self.kinds.split(",") if k.strip())

    def scene_template(self) -> SceneSpec:
        return replace(self.scene, image_size=self.model.image_size)

    def validate(self) -> None:
        if self.steps < 0 or self.batch_scenes < 1:
            raise ConfigError("steps must be >= 0 and batch_scenes >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac {self.warmup_frac} outside [0, 1)")
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak must be positive")
        if not 1 <= self.min_views <= self.max_views <= 8:
            raise ConfigError(f"view range [{self.min_views}, {self.max_views}] must lie in [1, 8]")
        bad = set(self.kind_list) - set(KINDS)
        if bad or not self.kind_list:
            raise ConfigError(f"unknown scene kinds {sorted(bad)}")
        self.model.validate()
        self.mask.validate()
        self.loss.validate()
        self.scene_template().validate()

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = ("model", "mask", "loss", "scene")


def _section_fields(cfg: TrainConfig) -> dict:
    out = {"train": {f.name for f in fields(TrainConfig) if f.name not in _SECTIONS}}
    for s in _SECTIONS:
        out[s] = {f.name for f in fields(getattr(cfg, s))}
    return out


def _coerce(current, raw: str, key: str):
    try:
        if isinstance(current, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, dict):
            out = {}
            for item in raw.split(","):
                k, v = item.split(":")
                out[k.strip()] = float(v)
            return out
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def set_value(cfg: TrainConfig, key: str, raw: str) -> None:
    owners = _section_fields(cfg)
    if "." in key:
        section, name = key.split(".", 1)
    else:
        name = key
        hits = [s for s, names in owners.items() if name in names]
        if not hits:
            raise ConfigError(f"unknown config key {key!r}")
        section = "train" if "train" in hits else hits[0]
    if section not in owners or name not in owners[section]:
        raise ConfigError(f"unknown config key {key!r}")
    target = cfg if section == "train" else getattr(cfg, section)
    setattr(target, name, _coerce(getattr(target, name), raw, key))


def load_config(path=None, overrides: dict | None = None, env=None) -> TrainConfig:
    """Defaults, then the config file, then ``overrides`` (flag values as strings)."""
    env = os.environ if env is None else env
    cfg = TrainConfig()
    if env.get(SEED_ENV):
        set_value(cfg, "train.seed", env[SEED_ENV])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingFileError(f"config file not found: {p}")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(p)
        for section in parser.sections():
            for key, raw in parser.items(section):
                set_value(cfg, f"{section}.{key}", raw)
    for key, raw in (overrides or {}).items():
        set_value(cfg, key, str(raw))
    cfg.validate()
    return cfg


def parse_flag_overrides(args: list) -> dict:
    """``["--steps", "10", "--model.dim", "64"]`` -> {"steps": "10", "model.dim": "64"}."""
    out, i = {}, 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"flag {tok} needs a value")
            val = args[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out
