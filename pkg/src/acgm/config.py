"""Run configuration: flat ``section.key = value`` text <-> validated dataclasses.

Example::

    # comments and blank lines are ignored
    env.name = coordgame
    train.episodes = 2000
    generator.k = 1
    run.seed = 3

Every key must belong to the schema; unknown keys, bad values and a missing
``env.name`` are reported together in one :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, get_type_hints

from .envs import ENVIRONMENTS

GRAPH_MODES = ("learned", "empty", "g528")


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class EnvSpec:
    name: str = ""
    agents: Optional[int] = None
    episode_len: Optional[int] = None
    seed: Optional[int] = None  # defaults to a stream derived from run.seed
    terminal_reward_only: bool = False


@dataclass
class HyperParams:
    gamma: float = 0.99
    lr: float = 5e-4
    rms_alpha: float = 0.99
    eps_start: float = 0.2
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    batch_size: int = 32
    target_sync: int = 200
    warmup: int = 100
    critic_warmup: int = 200  # critic-only update rounds before the actor learns
    capacity: int = 5000
    episodes: int = 1000
    eval_every: int = 100
    eval_episodes: int = 20
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    actor_hidden: int = 64
    critic_hidden: int = 64

    def problems(self) -> List[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("checkpoint_every", "critic_warmup"):
                if v < 0:
                    out.append(f"train.{f.name} must be >= 0")
            elif f.name == "eval_every":
                if v < 0:
                    out.append("train.eval_every must be >= 0")
            elif not (v > 0):
                out.append(f"train.{f.name} must be positive, got {v}")
        if not self.gamma < 1:
            out.append("train.gamma must be < 1")
        if not self.rms_alpha < 1:
            out.append("train.rms_alpha must be < 1")
        if self.eps_start > 1:
            out.append("train.eps_start must be <= 1")
        if self.eps_end > self.eps_start:
            out.append("train.eps_end must not exceed train.eps_start")
        return out


@dataclass
class GraphSpec:
    mode: str = "learned"
    k: int = 5
    xi: float = 1.0
    dual_every: int = 200  # generator updates per multiplier/penalty step
    warmup: int = 500  # policy update rounds before the generator starts learning
    hidden: int = 64
    heads: int = 8
    layers: int = 4
    attn_dim: int = 16
    decoder_hidden: int = 64

    def problems(self) -> List[str]:
        out = []
        if self.mode not in GRAPH_MODES:
            out.append(f"generator.mode must be one of {', '.join(GRAPH_MODES)}")
        if self.xi < 0:
            out.append("generator.xi must be >= 0")
        if self.warmup < 0:
            out.append("generator.warmup must be >= 0")
        for name in ("k", "dual_every", "hidden", "heads", "layers", "attn_dim", "decoder_hidden"):
            if getattr(self, name) < 1:
                out.append(f"generator.{name} must be >= 1")
        return out


@dataclass
class RunSpec:
    seed: int = 0
    out_dir: str = "runs/default"
    run_id: str = "run"


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    train: HyperParams = field(default_factory=HyperParams)
    generator: GraphSpec = field(default_factory=GraphSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def validate(self) -> "RunConfig":
        problems = []
        if not self.env.name:
            problems.append("env.name is required")
        elif self.env.name not in ENVIRONMENTS:
            problems.append(f"env.name must be one of {', '.join(sorted(ENVIRONMENTS))}")
        if self.env.agents is not None and self.env.agents < 1:
            problems.append("env.agents must be >= 1")
        if self.env.episode_len is not None and self.env.episode_len < 1:
            problems.append("env.episode_len must be >= 1")
        if self.env.name == "coordgame" and (self.env.agents not in (None, 2) or self.env.episode_len not in (None, 1)):
            problems.append("coordgame has exactly 2 agents and episode length 1")
        problems += self.train.problems() + self.generator.problems()
        if self.generator.mode == "g528" and self.env.agents not in (None, 10):
            problems.append("generator.mode = g528 needs env.agents = 10")
        if self.generator.mode == "g528" and self.env.name in ("coordgame", "nav") and self.env.agents is None:
            problems.append("generator.mode = g528 needs a 10-agent environment")
        if problems:
            raise ConfigError(problems)
        return self


SECTIONS = ("env", "train", "generator", "run")


def _convert(raw: str, typ, key: str):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected true/false, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
        if not math.isfinite(v):
            raise ValueError(f"{key}: must be finite")
        return v
    return raw


def _field_type(cls, name):
    hint = get_type_hints(cls)[name]
    args = getattr(hint, "__args__", None)
    if args and type(None) in args:  # Optional[T]
        return next(a for a in args if a is not type(None)), True
    return hint, False


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    problems = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'section.key = value'")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        block = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(block)}:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        typ, optional = _field_type(type(block), name)
        if optional and raw.lower() in ("none", ""):
            setattr(block, name, None)
            continue
        try:
            setattr(block, name, _convert(raw, typ, key))
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    lines = []
    for section in SECTIONS:
        block = getattr(cfg, section)
        for f in dataclasses.fields(block):
            v = getattr(block, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
