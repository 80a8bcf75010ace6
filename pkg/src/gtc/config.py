"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from typing import Optional

from gtc.quant import DEFAULT_EPS_ZERO
from gtc.train import MODES, TrainConfig

MODELS = ("lenet", "vgg16", "vae", "mlp")
DATASETS = ("mnist", "cifar10", "synth")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "lenet"
    model_scale: float = 0.5
    dataset: str = "mnist"
    data_dir: str = ""
    train_subset: int = 10000
    test_subset: int = 2000
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_dim: int = 784
    synth_variance: float = 0.05
    mode: str = "gtc"
    lr: float = 1e-4
    lambda1: float = 0.8
    lambda2: float = 0.04
    anneal_every: int = 0
    anneal_factor: float = 1.0
    optimizer: str = "adam"
    batch_size: int = 64
    iters: int = 5000
    seed: int = 0
    eps_zero: float = DEFAULT_EPS_ZERO
    log_every: int = 50
    eval_every: int = 500
    kl_weight: float = 1.0
    latent_dim: int = 10
    hidden: int = 32
    checkpoint_every: int = 0
    out_dir: str = "runs/gtc"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {', '.join(MODELS)}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {', '.join(DATASETS)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if not 0 < self.model_scale <= 1:
            raise ConfigError("model_scale must be in (0, 1]")
        if not self.eps_zero > 0:
            raise ConfigError("eps_zero must be positive")
        if self.checkpoint_every < 0 or (self.checkpoint_every and self.checkpoint_every % self.log_every):
            raise ConfigError("checkpoint_every must be a non-negative multiple of log_every")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lambda1=self.lambda1, lambda2=self.lambda2, optimizer=self.optimizer,
                           batch_size=self.batch_size, iters=self.iters, seed=self.seed,
                           anneal_every=self.anneal_every, anneal_factor=self.anneal_factor, mode=self.mode,
                           log_every=self.log_every, eval_every=self.eval_every, kl_weight=self.kl_weight)

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    cast = _CASTS[FIELD_TYPES[key]]
    try:
        if cast is int:
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {FIELD_TYPES[key]}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of typed overrides."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = coerce(key, raw)
    return out


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("gtc.configs").iterdir() if p.name.endswith(".cfg"))


def read_config_file(path: str) -> dict:
    """Read a config from ``path``, falling back to a bundled config of that name."""
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    name = os.path.basename(path)
    if name in bundled_configs():
        return parse_config_text(resources.files("gtc.configs").joinpath(name).read_text(encoding="utf-8"))
    raise ConfigError(f"config file not found: {path}")


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in cfg.as_dict().items())


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
