"""Run configuration: flat ``section.key = value`` text with defaults for everything."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .metaupdater import MetaUpdaterConfig, TrainConfig
from .simulator import Benchmark, TrackerSimConfig, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    pixel_threshold: float = 20.0
    figures: bool = True


@dataclass(frozen=True)
class LoopConfig:
    K: int = 3
    gate_verifier: bool = True


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    tracker: TrackerSimConfig = field(default_factory=TrackerSimConfig)
    bench: Benchmark = field(default_factory=Benchmark)
    mu: MetaUpdaterConfig = field(default_factory=MetaUpdaterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, world=dataclasses.replace(self.world, seed=seed))


SECTIONS = ("world", "tracker", "bench", "mu", "train", "loop", "eval")
# the world seed always follows the top-level seed
_HIDDEN = {("world", "seed")}


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def keys() -> list[str]:
    base = RunConfig()
    out = ["seed"]
    for s in SECTIONS:
        for f in dataclasses.fields(getattr(base, s)):
            if (s, f.name) not in _HIDDEN:
                out.append(f"{s}.{f.name}")
    return out


def parse(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        values[k] = v
    return from_dict(values, source)


def from_dict(values: dict[str, str], source: str = "<config>") -> RunConfig:
    valid = set(keys())
    for k in values:
        if k not in valid:
            raise ConfigError(f"{source}: unknown key {k!r}")
    base = RunConfig()
    seed = _coerce(values["seed"], 0, "seed") if "seed" in values else base.seed
    parts = {}
    for s in SECTIONS:
        cur = getattr(base, s)
        upd = {}
        for f in dataclasses.fields(cur):
            k = f"{s}.{f.name}"
            if k in values:
                upd[f.name] = _coerce(values[k], getattr(cur, f.name), k)
        try:
            parts[s] = dataclasses.replace(cur, **upd) if upd else cur
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{source}: [{s}] {e}") from None
    if parts["loop"].K < 1:
        raise ConfigError(f"{source}: loop.K must be >= 1")
    if parts["train"].iterations < 1 or parts["train"].batch_size < 2:
        raise ConfigError(f"{source}: train.iterations must be >= 1 and train.batch_size >= 2")
    return RunConfig(**parts).with_seed(seed)


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse(text, str(p))


def dump(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for s in SECTIONS:
        sec = getattr(cfg, s)
        for f in dataclasses.fields(sec):
            if (s, f.name) not in _HIDDEN:
                v = getattr(sec, f.name)
                lines.append(f"{s}.{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
