"""Line-oriented ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional

from .model import EncoderConfig
from .train import CURRICULUM_SIZES, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None, key: Optional[str] = None):
        self.lineno = lineno
        self.key = key
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class RunConfig:
    # encoder
    K: int = 8
    D: int = 16
    F: int = 32
    proj: int = 16
    use_ldp: bool = True
    query_readout: bool = True
    # optimizer and losses
    lr: float = 0.0005
    eps: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 0.1
    margin: float = 1.0
    # training loop
    iterations: int = 50
    batch_size: int = 32
    batches_per_iter: int = 2
    buffer_capacity: int = 128
    train_step_limit: int = 20000
    train_solution_cap: int = 64
    max_samples_per_search: int = 64
    val_step_limit: int = 2000
    val_every: int = 5
    curriculum: tuple = CURRICULUM_SIZES
    # search
    time_limit: float = 0.0
    step_limit: int = 0
    solution_cap: int = 0
    restart_threshold: int = 10
    restart_budget: int = 120
    restarts: bool = True
    seed: int = 0

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            K=self.K, D=self.D, F=self.F, proj=self.proj, use_ldp=self.use_ldp, query_readout=self.query_readout
        )

    def trainer(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def lines(self) -> list[str]:
        return [f"{k} = {_render(v)}" for k, v in dataclasses.asdict(self).items()]


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce(key: str, raw: str, lineno: Optional[int] = None) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown key {key!r}", lineno, key)
    kind = _TYPES[key]
    s = raw.strip()
    try:
        if kind is bool:
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(s)
        if kind is float:
            return float(s)
        if kind is tuple:
            vals = tuple(int(x) for x in s.split(",") if x.strip())
            if not vals:
                raise ValueError
            return vals
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw.strip()!r}", lineno, key) from None
    raise ConfigError(f"{key}: unsupported type", lineno, key)


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno)
        key, value = (x.strip() for x in body.split("=", 1))
        out[key] = coerce(key, value, lineno)
    return out


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (strings are coerced like file values)."""
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v) if isinstance(v, str) else _check(k, v)
    cfg = RunConfig(**values)
    for line in cfg.lines():
        log.info("config %s", line)
    return cfg


def _check(key: str, value: Any) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown key {key!r}", key=key)
    kind = _TYPES[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__}", key=key)
    return value
