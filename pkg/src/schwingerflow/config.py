"""Flat key-value run configuration.

Files contain one `key = value` per line; `#` starts a comment. Unknown keys
and missing required keys are errors. Booleans are `true`/`false`; integer
tuples are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

REQUIRED_KEYS = ("L", "beta", "kappa", "estimator")


@dataclass
class RunConfig:
    # physics
    L: int = None
    beta: float = None
    kappa: float = None
    estimator: str = None          # rt | reinforce
    # numerics
    precision: str = "single"      # single | double
    seed: int = 0
    deterministic: bool = False
    # training
    batch_size: int = 32
    n_batches: int = 1
    n_steps: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_enabled: bool = True
    clip_norm: float = 1.0
    lr_decay: float = 1.0          # per-step multiplicative factor; 1 = off
    # architecture
    n_knots: int = 8
    n_layers: int = 48
    hidden_channels: int = 64
    dilations: tuple = (1, 2, 3)
    # sampling
    chain_batch: int = 64
    # io
    checkpoint_dir: str = "checkpoints"
    metrics_path: str = "metrics.csv"
    checkpoint_interval: int = 1000
    # profiling
    profile_sizes: tuple = (4, 8, 12)
    profile_batch: int = 4

    @property
    def effective_batch(self):
        return self.batch_size * self.n_batches

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self):
        for key in REQUIRED_KEYS:
            if getattr(self, key) is None:
                raise ConfigError(f"missing required key {key!r}")
        if self.estimator not in ("rt", "reinforce"):
            raise ConfigError(f"estimator must be rt or reinforce, got "
                              f"{self.estimator!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got "
                              f"{self.precision!r}")
        if self.L < 2:
            raise ConfigError("L must be at least 2")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if not 0 <= self.kappa < 1:
            raise ConfigError("kappa must lie in [0, 1)")
        for key in ("batch_size", "n_batches", "n_knots", "n_layers",
                    "hidden_channels", "chain_batch", "checkpoint_interval",
                    "profile_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be non-negative")
        if len(self.dilations) != 3:
            raise ConfigError("dilations must list three integers")
        return self


def _parse_value(key, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(tok) for tok in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"malformed value for {key!r}: {raw!r}")


def parse_config(text: str) -> RunConfig:
    types = {f.name: (type(f.default) if f.default is not None else None)
             for f in fields(RunConfig)}
    # required keys have None defaults; fix their types explicitly
    types.update({"L": int, "beta": float, "kappa": float, "estimator": str,
                  "dilations": tuple, "profile_sizes": tuple})
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, types[key]))
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def config_from_dict(d) -> RunConfig:
    cfg = RunConfig()
    for key, value in d.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, tuple(value) if isinstance(value, (list, tuple))
                else value)
    return cfg.validate()
