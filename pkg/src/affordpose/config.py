"""Run configuration: one YAML file, validated before anything runs.

Every key is optional; omitted keys take the defaults below.  Unknown keys
are rejected.  Example::

    seed: 0
    split: s1-like          # or "none"
    schedule: {T: 1000, beta_start: 1.0e-4, beta_end: 2.0e-2}
    net: {hidden: 128, blocks: 3, time_dim: 32}
    train: {steps: 5000, batch_size: 128, lr: 1.0e-3, p_uncond: 0.1}
    refine: {n_r_min: 100, n_r_max: 1000, eta: 1.0e-4, guidance_iters: 1,
             robust: false, robust_scale_px: 10.0, cfg_scale: 1.0}
    caption: {endpoint: null, model: affordance-captioner, api_key_env: AFFORDPOSE_API_KEY,
              fixtures: null, cache: null, max_tokens: 256, timeout: 30.0, attempts: 3}
    paths: {hand_model: null}
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .denoiser import NetConfig, TrainConfig
from .refinement import RefinementConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class NetSection:
    hidden: int = 128
    blocks: int = 3
    time_dim: int = 32


@dataclass(frozen=True)
class CaptionConfig:
    endpoint: str = None
    model: str = "affordance-captioner"
    api_key_env: str = "AFFORDPOSE_API_KEY"
    fixtures: str = None
    cache: str = None
    max_tokens: int = 256
    timeout: float = 30.0
    attempts: int = 3


@dataclass(frozen=True)
class PathsConfig:
    hand_model: str = None    # JSON rig; the built-in toy hand when unset


_TRAIN_KEYS = ("batch_size", "steps", "lr", "beta1", "beta2", "eps", "p_uncond", "lr_schedule")
_REFINE_KEYS = ("n_r_min", "n_r_max", "eta", "guidance_iters", "robust", "robust_scale_px", "cfg_scale")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    split: str = "s1-like"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    net: NetSection = field(default_factory=NetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def net_config(self):
        s = self.schedule
        return NetConfig(hidden=self.net.hidden, blocks=self.net.blocks, time_dim=self.net.time_dim,
                         T=s.T, beta_start=s.beta_start, beta_end=s.beta_end)

    def train_config(self):
        return replace(self.train, seed=self.seed)

    def refine_config(self):
        return replace(self.refine, seed=self.seed)

    def with_seed(self, seed):
        return self if seed is None else replace(self, seed=int(seed))

    def to_dict(self):
        d = asdict(self)
        d["train"] = {k: d["train"][k] for k in _TRAIN_KEYS}
        d["refine"] = {k: d["refine"][k] for k in _REFINE_KEYS}
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {
    "schedule": (ScheduleConfig, None),
    "net": (NetSection, None),
    "train": (TrainConfig, _TRAIN_KEYS),
    "refine": (RefinementConfig, _REFINE_KEYS),
    "caption": (CaptionConfig, None),
    "paths": (PathsConfig, None),
}


def _coerce(section, key, value, default):
    if default is None or value is None:
        return value
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {value!r}")
    return value


def _section(name, data):
    cls, allowed = _SECTIONS[name]
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping")
    defaults = cls()
    allowed = set(allowed or (f.name for f in fields(cls)))
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}")
    values = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in data.items()}
    try:
        return replace(defaults, **values)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(data):
    data = dict(data or {})
    unknown = sorted(set(data) - {"seed", "split", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    seed = _coerce("<top>", "seed", data.get("seed", 0), 0)
    split = data.get("split", "s1-like")
    if split not in ("s1-like", "none"):
        raise ConfigError(f"split must be 's1-like' or 'none', got {split!r}")
    cfg = RunConfig(seed=seed, split=split, **{k: _section(k, data.get(k)) for k in _SECTIONS})
    validate(cfg)
    return cfg


def validate(cfg):
    s = cfg.schedule
    if s.T < 1 or not 0 < s.beta_start <= s.beta_end < 1:
        raise ConfigError("schedule: need T >= 1 and 0 < beta_start <= beta_end < 1")
    if cfg.net.hidden < 1 or cfg.net.blocks < 0 or cfg.net.time_dim < 2 or cfg.net.time_dim % 2:
        raise ConfigError("net: hidden >= 1, blocks >= 0, time_dim even and >= 2")
    try:
        cfg.refine.validate(s.T)
    except ValueError as exc:
        raise ConfigError(f"refine: {exc}") from None
    if cfg.caption.max_tokens < 1 or cfg.caption.attempts < 1 or cfg.caption.timeout <= 0:
        raise ConfigError("caption: max_tokens, attempts and timeout must be positive")


def load_config(path=None):
    if path is None:
        return config_from_dict({})
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
