"""Run configuration: nested dataclasses loaded from YAML with env overrides.

Environment overrides use ``HRL4PFG_<SECTION>__<KEY>=<yaml value>``, e.g.
``HRL4PFG_TRAINER__EPOCHS=5`` or ``HRL4PFG_SEEDS=[0,1]``. Top-level keys take
the form ``HRL4PFG_<KEY>``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .env import EnvConfig

ENV_PREFIX = "HRL4PFG_"
VARIANTS = ("full", "wo-hie", "wo-tc", "wo-fm", "random")


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    hidden: int = 32
    lr_high_actor: float = 3e-4
    lr_high_critic: float = 3e-3
    lr_low_actor: float = 1e-3
    lr_low_critic: float = 3e-3
    optimizer: str = "adam"
    sigma2_floor: float = 1e-4
    init_log_var: float = -3.0
    L: int = 20
    lambda_f: float = 0.3
    lambda_g: float = 0.1
    tau: float = 0.01
    gamma: float = 0.9
    tracker_reduce: str = "last"
    # structured starts: target mean ~ tracked state, item logits ~ score_scale * v_i . p
    high_identity_init: bool = True
    low_score_scale: float = 0.0

    def validate(self) -> None:
        for name in ("lr_high_actor", "lr_high_critic", "lr_low_actor", "lr_low_critic"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"agents.{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("agents.gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("agents.tau must lie in (0, 1]")
        if self.L < 1 or self.hidden < 1:
            raise ConfigError("agents.L and agents.hidden must be >= 1")
        if self.lambda_f < 0 or self.lambda_g < 0:
            raise ConfigError("lambda weights must be >= 0")
        if self.sigma2_floor <= 0:
            raise ConfigError("agents.sigma2_floor must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("agents.optimizer must be adam or sgd")
        if self.low_score_scale < 0:
            raise ConfigError("agents.low_score_scale must be >= 0")
        if self.tracker_reduce not in ("last", "mean"):
            raise ConfigError("agents.tracker_reduce must be last or mean")


@dataclass
class TrainerConfig:
    M: int = 3
    epochs: int = 50
    episodes_per_epoch: int = 40
    batch_episodes: int = 4
    eval_episodes: int = 100
    eval_every: int = 1
    checkpoint_every: int = 0
    variant: str = "full"

    def validate(self) -> None:
        if self.M < 1:
            raise ConfigError("trainer.M must be >= 1")
        if self.epochs < 0:
            raise ConfigError("trainer.epochs must be >= 0")
        if self.episodes_per_epoch < 1 or self.batch_episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("episode counts must be >= 1")
        if self.eval_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("trainer.eval_every must be >= 1, checkpoint_every >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agents: AgentConfig = field(default_factory=AgentConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        try:
            self.env.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.agents.validate()
        self.trainer.validate()
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of ints")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


_SECTIONS = {"env": EnvConfig, "agents": AgentConfig, "trainer": TrainerConfig}


def _coerce(cls, name: str, value: Any, where: str):
    f = {f.name: f for f in dataclasses.fields(cls)}[name]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{where}.{name} cannot be null")
    if kind.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}.{name} must be an int")
        return value
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name} must be a number")
        return float(value)
    if kind.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} must be true or false")
        return value
    if kind.startswith("str"):
        return str(value)
    return value


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key {where}.{sorted(unknown)[0]}")
    return cls(**{k: _coerce(cls, k, v, where) for k, v in data.items()})


def from_dict(data: Mapping | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {"env", "agents", "trainer", "seeds", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]}")
    kwargs: dict[str, Any] = {}
    for sec, cls in _SECTIONS.items():
        if sec in data:
            kwargs[sec] = _build(cls, data[sec] or {}, sec)
    if "seeds" in data:
        seeds = data["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        kwargs["seeds"] = list(seeds)
    if "output_dir" in data:
        kwargs["output_dir"] = str(data["output_dir"])
    return RunConfig(**kwargs).validate()


def apply_env_overrides(data: dict, environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    data = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in data.items()}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(raw)
        if len(path) == 1:
            data[path[0]] = value
        elif len(path) == 2:
            if path[0] not in _SECTIONS:
                raise ConfigError(f"{key}: unknown section {path[0]!r}")
            # keys keep their case in the dataclass (e.g. ``L``, ``M``)
            names = {f.name.lower(): f.name for f in dataclasses.fields(_SECTIONS[path[0]])}
            if path[1] not in names:
                raise ConfigError(f"{key}: unknown key {path[0]}.{path[1]}")
            data.setdefault(path[0], {})[names[path[1]]] = value
        else:
            raise ConfigError(f"{key}: nesting deeper than section.key")
    return data


def load_config(path=None, environ: Mapping[str, str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
    return from_dict(apply_env_overrides(data, environ))
