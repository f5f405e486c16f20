"""Flat ``key = value`` experiment configuration.

Every key has a default (see :class:`ExperimentConfig`). Keys starting with
``env.`` are passed to :func:`ilb.envs.make_env`. A comma-separated value for
a sweep key expands into one config per combination.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from ..core import ILBError
from ..meta import BetaSchedule, ScheduleError

ALGORITHMS = ("dagger", "smile", "searn_greedy", "forward", "supervised")
LOSSES = ("zero_one", "squared", "hinge")
SWEEP_KEYS = ("algorithm", "schedule", "alpha", "seed", "lam")


class ConfigError(ILBError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config field {key!r}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    algorithm: str = "dagger"  # dagger | smile | searn_greedy | forward | supervised
    schedule: str = "indicator"  # indicator | geometric:p | constant:c (dagger only)
    alpha: float = 0.1  # mixture step for smile / searn_greedy
    env: str = "racer"
    learner: str = "ridge"  # ridge | svm | allpairs
    lam: float = 1e-3
    epochs: int = 5
    eta0: float = 0.1
    loss: str = "squared"
    N: int = 20
    m: int = 1  # trajectories per iteration
    T: int = 0  # 0 uses the environment's horizon
    m_val: int = 5
    eval_episodes: int = 0  # 0 reuses the validation rollouts for env metrics
    seed: int = 0
    out: str = "runs"
    name: str = ""  # run directory name; empty derives it from the algorithm
    env_options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        if self.loss not in LOSSES:
            raise ConfigError("loss", f"must be one of {LOSSES}")
        if self.learner not in ("ridge", "svm", "allpairs"):
            raise ConfigError("learner", "must be ridge, svm or allpairs")
        try:
            BetaSchedule.parse(self.schedule)
        except ScheduleError as exc:
            raise ConfigError("schedule", str(exc)) from exc
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha", "must lie in (0, 1]")
        for k in ("N", "m", "m_val"):
            if getattr(self, k) < 1:
                raise ConfigError(k, "must be >= 1")
        for k in ("T", "eval_episodes", "epochs"):
            if getattr(self, k) < 0:
                raise ConfigError(k, "must be >= 0")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")

    @property
    def beta_schedule(self) -> BetaSchedule:
        if self.algorithm == "supervised":
            return BetaSchedule("constant", 1.0)
        return BetaSchedule.parse(self.schedule)

    def label(self) -> str:
        if self.name:
            return self.name
        if self.algorithm == "dagger":
            return self.beta_schedule.label()
        if self.algorithm == "smile":
            return f"Sm{self.alpha:g}"
        if self.algorithm == "searn_greedy":
            return f"Se{self.alpha:g}"
        return {"supervised": "Sup", "forward": "Fwd"}[self.algorithm]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "env_options":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for k in sorted(self.env_options):
            lines.append(f"env.{k} = {self.env_options[k]}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(key, f"expected {kind}, got {text!r}") from exc
    return text


def _env_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_pairs(text: str) -> list[tuple[str, str, int]]:
    out = []
    for k, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(line, f"line {k}: expected 'key = value'")
        out.append((key.strip(), val.strip(), k))
    return out


def parse_configs(text: str, **overrides) -> list[ExperimentConfig]:
    """All configs described by ``text`` (several when sweep keys list values)."""
    base: dict = {}
    env_opts: dict = {}
    sweeps: dict[str, list] = {}
    for key, val, _ in parse_pairs(text):
        if key.startswith("env."):
            env_opts[key[4:]] = _env_value(val)
            continue
        if key not in _TYPES or key == "env_options":
            raise ConfigError(key, "unknown key")
        parts = [p.strip() for p in val.split(",")] if key in SWEEP_KEYS else [val]
        if key in SWEEP_KEYS and len(parts) > 1:
            sweeps[key] = [_coerce(key, p) for p in parts]
        else:
            base[key] = _coerce(key, parts[0])
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
            sweeps.pop(key, None)
    keys = list(sweeps)
    configs = []
    for combo in itertools.product(*(sweeps[k] for k in keys)) if keys else [()]:
        kw = dict(base, **dict(zip(keys, combo)))
        cfg = ExperimentConfig(**kw, env_options=dict(env_opts))
        configs.append(cfg)
    if "seed" in sweeps and not base.get("name"):
        for cfg in configs:
            cfg.name = f"{cfg.label()}_s{cfg.seed}"
    return configs


def load_configs(path: str | Path, **overrides) -> list[ExperimentConfig]:
    return parse_configs(Path(path).read_text(), **overrides)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    cfgs = load_configs(path, **overrides)
    if len(cfgs) != 1:
        raise ConfigError("config", f"expands to {len(cfgs)} runs; use the sweep entry point")
    return cfgs[0]
