"""Run configuration: one YAML file, typed sections, validation and hashing.

Precedence, lowest first: built-in defaults, the ``--config`` file, command
line flags. :func:`load_config` merges the first two; callers apply flags with
:func:`apply_overrides`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError

# Central scheduler action used to initialise the output head before PPO.
WARM_START = {"sigma_scale": 1.1, "accept_threshold": 0.3, "k_early": 16, "k_mid": 8, "k_late": 2}


@dataclass
class ScheduleSection:
    num_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.04
    kind: str = "linear"
    variance_mode: str = "posterior"


@dataclass
class EnvSection:
    agent_radius: float = 0.03
    object_radius: float = 0.05
    goal_radius: float = 0.05
    v_max: float = 0.03
    max_steps: int = 120
    goal: list = field(default_factory=lambda: [0.5, 0.5])
    randomize_goal: bool = False
    horizon: int = 8
    n_exec: int = 4
    min_start_dist: float = 0.2


@dataclass
class DataSection:
    episodes: int = 500
    noise: float = 0.5


@dataclass
class TargetSection:
    hidden: list = field(default_factory=lambda: [256, 256])
    iterations: int = 12000
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    lr_final_frac: float = 0.1


@dataclass
class DistillSection:
    hidden: list = field(default_factory=lambda: [128, 128])
    iterations: int = 8000
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    lr_final_frac: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    cost_weight: float = 0.125


@dataclass
class SpecSection:
    draft_horizon: int = 8
    accept_threshold: float = 0.3
    sigma_scale: float = 1.0
    accept_mode: str = "threshold"


@dataclass
class SchedulerSection:
    iterations: int = 10
    episodes_per_iter: int = 16
    window: int = 2
    boundaries: list = field(default_factory=lambda: [0.2, 0.8])
    lr: float = 3e-4
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 64
    entropy_coef: float = 0.0
    r_final: float = 100.0
    outcome_kind: str = "continuous"
    delta_t: int = 4
    warm_start: dict = field(default_factory=lambda: dict(WARM_START))
    warm_confidence: float = 8.0


@dataclass
class EvalSection:
    episodes: int = 200
    seed: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    target: TargetSection = field(default_factory=TargetSection)
    distill: DistillSection = field(default_factory=DistillSection)
    spec: SpecSection = field(default_factory=SpecSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        """Content hash of the canonical JSON form (output paths excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


SECTIONS = ("schedule", "env", "data", "target", "distill", "spec", "scheduler", "eval")


def config_from_dict(d: dict | None) -> RunConfig:
    """Build a config, collecting every unknown key and type error before raising."""
    d = dict(d or {})
    problems = []
    base = RunConfig()
    top = {}
    for key, value in d.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping, got {type(value).__name__}")
                continue
            sec = getattr(base, key)
            known = {f.name: f for f in fields(sec)}
            kw = {}
            for k, v in value.items():
                if k not in known:
                    problems.append(f"{key}.{k}: unknown field")
                    continue
                kw[k] = _coerce(f"{key}.{k}", getattr(sec, k), v, problems)
            top[key] = replace(sec, **kw)
        elif key in ("seed", "out", "workers"):
            top[key] = _coerce(key, getattr(base, key), value, problems)
        else:
            problems.append(f"{key}: unknown section")
    cfg = replace(base, **top)
    problems.extend(validate(cfg, raise_errors=False))
    if problems:
        raise ConfigError(problems)
    return cfg


def _coerce(name, default, value, problems):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{name}: expected a boolean, got {value!r}")
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{name}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{name}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            problems.append(f"{name}: expected a mapping, got {value!r}")
            return default
        return dict(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{name}: expected a list, got {value!r}")
            return default
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        problems.append(f"{name}: expected a string, got {value!r}")
        return default
    return value


def validate(cfg: RunConfig, raise_errors=True) -> list:
    """Semantic checks; returns (or raises with) the full list of problems."""
    p = []
    s = cfg.schedule
    if s.num_steps < 1:
        p.append("schedule.num_steps: must be >= 1")
    if not 0 < s.beta_start <= s.beta_end < 1:
        p.append("schedule.beta_start/beta_end: need 0 < beta_start <= beta_end < 1")
    if s.kind not in ("linear", "squaredcos"):
        p.append("schedule.kind: must be 'linear' or 'squaredcos'")
    if s.variance_mode not in ("posterior", "beta"):
        p.append("schedule.variance_mode: must be 'posterior' or 'beta'")
    e = cfg.env
    for name in ("agent_radius", "object_radius", "goal_radius", "v_max"):
        if not getattr(e, name) > 0:
            p.append(f"env.{name}: must be positive")
    if e.max_steps < 1:
        p.append("env.max_steps: must be >= 1")
    if not 1 <= e.n_exec <= e.horizon:
        p.append("env.n_exec: must lie in [1, horizon]")
    if len(e.goal) != 2:
        p.append("env.goal: must have two coordinates")
    if cfg.data.episodes < 1:
        p.append("data.episodes: must be >= 1")
    if cfg.data.noise < 0:
        p.append("data.noise: must be >= 0")
    for sec in ("target", "distill"):
        t = getattr(cfg, sec)
        if not t.hidden or any((not isinstance(h, int)) or h < 1 for h in t.hidden):
            p.append(f"{sec}.hidden: must be a nonempty list of positive integers")
        if t.iterations < 0:
            p.append(f"{sec}.iterations: must be >= 0")
        if t.batch_size < 1:
            p.append(f"{sec}.batch_size: must be >= 1")
        if not t.lr > 0:
            p.append(f"{sec}.lr: must be positive")
    d = cfg.distill
    if d.lambda1 < 0 or d.lambda2 < 0 or d.lambda1 + d.lambda2 <= 0:
        p.append("distill.lambda1/lambda2: must be >= 0 and not both zero")
    if not d.cost_weight > 0:
        p.append("distill.cost_weight: must be positive")
    sp = cfg.spec
    if sp.draft_horizon < 0:
        p.append("spec.draft_horizon: must be >= 0")
    if not 0 < sp.accept_threshold <= 1:
        p.append("spec.accept_threshold: must lie in (0, 1]")
    if not sp.sigma_scale > 0:
        p.append("spec.sigma_scale: must be positive")
    if sp.accept_mode not in ("threshold", "stochastic"):
        p.append("spec.accept_mode: must be 'threshold' or 'stochastic'")
    sc = cfg.scheduler
    if len(sc.boundaries) != 2 or not 0 < sc.boundaries[0] < sc.boundaries[1] < 1:
        p.append("scheduler.boundaries: need 0 < b1 < b2 < 1")
    if sc.outcome_kind not in ("discrete", "continuous"):
        p.append("scheduler.outcome_kind: must be 'discrete' or 'continuous'")
    for name in ("iterations", "episodes_per_iter", "window", "epochs", "minibatch", "delta_t"):
        if getattr(sc, name) < 1:
            p.append(f"scheduler.{name}: must be >= 1")
    from .scheduler import ActionSpec

    p += [f"scheduler.warm_start: {m}" for m in ActionSpec().problems(sc.warm_start)]
    if not sc.warm_confidence >= 0:
        p.append("scheduler.warm_confidence: must be >= 0")
    if cfg.eval.episodes < 1:
        p.append("eval.episodes: must be >= 1")
    if cfg.workers < 1:
        p.append("workers: must be >= 1")
    if p and raise_errors:
        raise ConfigError(p)
    return p


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: invalid YAML ({exc})"]) from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides (``{"spec.draft_horizon": 4}``); ``None`` values are skipped."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = d
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return config_from_dict(d)


def save_config(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dump())
    return path
