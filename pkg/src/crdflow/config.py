"""Run configuration: YAML documents validated into dataclasses.

Schedules are written as small expressions in the optimizer step ``i``,
e.g. ``min(0.25+0.005i, 0.999)`` or ``min(max(0.0075(i-75), 0), 0.999)``.
Only numbers, ``i``, + - * /, parentheses, ``min`` and ``max`` are accepted.
"""

from __future__ import annotations

import ast
import copy
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .objectives import ESTIMATORS, LOSSES, parse_tau
from .rewards import GaussianMixture, RewardFn, ToyTask, two_modes_1d
from .tensor_net import AdamWConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REQUIRED_KEYS = ("schema_version", "task", "reward")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


# ------------------------------------------------------------------ schedules

_IMPLICIT_MUL = re.compile(r"(\d|\))\s*(?=\(|i\b)")
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Constant, ast.Load,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.USub, ast.UAdd,
)


class Schedule:
    """Decay schedule eta(i) compiled from a restricted expression."""

    def __init__(self, source: str | float | int):
        self.source = str(source).strip()
        text = _IMPLICIT_MUL.sub(r"\1*", self.source)
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse schedule {self.source!r}: {exc.msg}") from None
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise ValueError(f"schedule {self.source!r}: {type(node).__name__} not allowed")
            if isinstance(node, ast.Name) and node.id not in ("i", "min", "max"):
                raise ValueError(f"schedule {self.source!r}: unknown name {node.id!r}")
            if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in ("min", "max")):
                raise ValueError(f"schedule {self.source!r}: only min/max calls allowed")
            if isinstance(node, ast.Call) and (node.keywords or len(node.args) < 2):
                raise ValueError(f"schedule {self.source!r}: min/max take two or more positional args")
            if isinstance(node, ast.Constant) and (isinstance(node.value, bool) or not isinstance(node.value, (int, float))):
                raise ValueError(f"schedule {self.source!r}: only numeric constants allowed")
        self._code = compile(tree, "<schedule>", "eval")

    def __call__(self, i: int) -> float:
        return float(eval(self._code, {"__builtins__": {}}, {"i": i, "min": min, "max": max}))

    def __eq__(self, other):
        return isinstance(other, Schedule) and self.source == other.source

    def __repr__(self):
        return f"Schedule({self.source!r})"


def constant_schedule(value: float) -> Schedule:
    return Schedule(repr(float(value)))


# ------------------------------------------------------------------ sections


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    time_dim: int = 8
    activation: str = "tanh"


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 2e-3
    p_uncond: float = 0.1
    checkpoint: str | None = None


@dataclass
class TrainConfig:
    K: int = 8
    groups_per_batch: int = 4
    steps: int = 2000
    beta_old: float = 1.0
    beta_init: float = 0.05
    adaptive_kl: bool = True
    tau: object = "inf"
    cfg_scale: float = 3.0
    eta_old: Schedule = field(default_factory=lambda: Schedule("min(0.5+0.002*i, 0.99)"))
    eta_samp: Schedule = field(default_factory=lambda: Schedule("min(0.002*i, 0.9)"))
    sampler_steps: int = 20
    loss: str = "crd"
    estimator: str = "adaptive_v"
    n_draws: int = 1
    infonca_beta: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 500


@dataclass
class EvalConfig:
    n_samples: int = 512
    sampler_steps: int = 20
    cfg_scale: float = 1.0
    ema_ratio: float | None = None


@dataclass
class RunConfig:
    task: ToyTask
    reward: RewardFn | list
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def rewards_list(self) -> list[RewardFn]:
        if isinstance(self.reward, RewardFn):
            return [self.reward] * self.task.n_prompts
        return list(self.reward)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train["eta_old"] = self.train.eta_old.source
        train["eta_samp"] = self.train.eta_samp.source
        train["tau"] = _tau_to_text(self.train.tau)
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "task": _task_to_dict(self.task),
            "reward": self.reward.to_dict() if isinstance(self.reward, RewardFn) else [r.to_dict() for r in self.reward],
            "model": asdict(self.model),
            "pretrain": asdict(self.pretrain),
            "train": train,
            "optimizer": asdict(self.optimizer),
            "eval": asdict(self.eval),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _tau_to_text(tau):
    tau = parse_tau(tau)
    if tau == "zero":
        return "zero"
    return "inf" if math.isinf(tau) else float(tau)


def _task_to_dict(task: ToyTask) -> dict:
    return {
        "name": task.name,
        "dim": task.dim,
        "prompts": [
            {"means": p.means.tolist(), "sigma": float(p.sigma), "weights": p.weights.tolist()} for p in task.prompts
        ],
    }


TASK_PRESETS = {"two_modes_1d": two_modes_1d}


def _parse_mixture(raw) -> GaussianMixture:
    means = np.atleast_2d(np.asarray(raw["means"], dtype=np.float64))
    n = means.shape[0]
    weights = raw.get("weights", [1.0 / n] * n)  # equal weights unless given
    return GaussianMixture(means, float(raw["sigma"]), weights)


def _parse_task(raw, errors):
    if isinstance(raw, str):
        if raw not in TASK_PRESETS:
            errors.append(f"task: unknown preset {raw!r} (known: {sorted(TASK_PRESETS)})")
            return None
        return TASK_PRESETS[raw]()
    if not isinstance(raw, dict):
        errors.append("task: expected a preset name or a mapping")
        return None
    unknown = set(raw) - {"name", "dim", "prompts", "preset", "sigma"}
    if unknown:
        errors.append(f"task: unknown keys {sorted(unknown)}")
    if "preset" in raw:
        if raw["preset"] not in TASK_PRESETS:
            errors.append(f"task.preset: unknown preset {raw['preset']!r}")
            return None
        kwargs = {"sigma": float(raw["sigma"])} if "sigma" in raw else {}
        return TASK_PRESETS[raw["preset"]](**kwargs)
    try:
        prompts = [_parse_mixture(p) for p in raw["prompts"]]
        return ToyTask(int(raw["dim"]), prompts, name=str(raw.get("name", "custom")))
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"task: {exc}")
        return None


def _parse_reward_one(raw, where, errors):
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected a mapping")
        return None
    allowed = {f.name for f in fields(RewardFn)}
    unknown = set(raw) - allowed
    if unknown:
        errors.append(f"{where}: unknown keys {sorted(unknown)}")
        return None
    try:
        return RewardFn(**raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _fill_section(cls, raw, name, errors, converters=None):
    """Build a dataclass section; unknown keys are errors, missing ones default with a notice."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        errors.append(f"{name}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, f in known.items():
        if key not in raw:
            log.info("config: %s.%s not set, using default", name, key)
            continue
        value = raw[key]
        if converters and key in converters:
            try:
                value = converters[key](value)
            except (TypeError, ValueError) as exc:
                errors.append(f"{name}.{key}: {exc}")
                continue
        kwargs[key] = value
    return cls(**kwargs)


def _as_float(v):
    if isinstance(v, bool):
        raise TypeError("expected a number")
    return float(v)


def _as_int(v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise TypeError("expected an integer")
    return int(v)


def _as_bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true/false")
    return v


def _optional(conv):
    return lambda v: None if v is None else conv(v)


def _tau(v):
    return _tau_to_text(v)


def from_dict(raw: dict | None) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    errors: list[str] = []
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        errors.extend(f"missing required key {k!r}" for k in missing)
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        errors.append(f"unknown top-level keys {sorted(unknown)}")
    if "schema_version" in raw and raw["schema_version"] != SCHEMA_VERSION:
        errors.append(f"schema_version {raw['schema_version']!r} unsupported (expected {SCHEMA_VERSION})")

    task = _parse_task(raw["task"], errors) if "task" in raw else None
    reward = None
    if "reward" in raw:
        if isinstance(raw["reward"], list):
            reward = [_parse_reward_one(r, f"reward[{k}]", errors) for k, r in enumerate(raw["reward"])]
            if task is not None and len(reward) != task.n_prompts:
                errors.append(f"reward: {len(reward)} entries for {task.n_prompts} prompts")
        else:
            reward = _parse_reward_one(raw["reward"], "reward", errors)
    if isinstance(task, ToyTask):
        for rf in reward if isinstance(reward, list) else [reward]:
            if rf is not None:
                for vec in (rf.target, rf.rival, rf.direction):
                    if vec is not None and vec.shape != (task.dim,):
                        errors.append(f"reward: vector {vec.tolist()} does not match task dim {task.dim}")

    ints, floats, bools = _as_int, _as_float, _as_bool
    model = _fill_section(ModelConfig, raw.get("model"), "model", errors,
                          {"hidden": lambda v: [ints(h) for h in v], "time_dim": ints, "activation": str})
    pretrain = _fill_section(PretrainConfig, raw.get("pretrain"), "pretrain", errors,
                             {"steps": ints, "batch_size": ints, "lr": floats, "p_uncond": floats,
                              "checkpoint": _optional(str)})
    train = _fill_section(TrainConfig, raw.get("train"), "train", errors, {
        "K": ints, "groups_per_batch": ints, "steps": ints, "beta_old": floats, "beta_init": floats,
        "adaptive_kl": bools, "tau": _tau, "cfg_scale": floats, "eta_old": Schedule, "eta_samp": Schedule,
        "sampler_steps": ints, "loss": str, "estimator": str, "n_draws": ints, "infonca_beta": floats,
        "log_every": ints, "checkpoint_every": ints,
    })
    optimizer = _fill_section(AdamWConfig, raw.get("optimizer"), "optimizer", errors,
                              {k: floats for k in ("lr", "beta1", "beta2", "weight_decay", "eps")})
    ev = _fill_section(EvalConfig, raw.get("eval"), "eval", errors,
                       {"n_samples": ints, "sampler_steps": ints, "cfg_scale": floats, "ema_ratio": _optional(floats)})
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        errors.append("seed: expected an integer")

    errors.extend(_semantic_errors(model, pretrain, train, optimizer, ev))
    if errors:
        raise ConfigError(errors)
    return RunConfig(task=task, reward=reward, schema_version=SCHEMA_VERSION, seed=seed, model=model,
                     pretrain=pretrain, train=train, optimizer=optimizer, eval=ev)


def _semantic_errors(model, pretrain, train, opt, ev) -> list[str]:
    e = []
    if train.K < 2:
        e.append("train.K must be >= 2")
    if train.beta_old <= 0:
        e.append("train.beta_old must be > 0")
    if train.beta_init < 0:
        e.append("train.beta_init must be >= 0")
    if train.cfg_scale < 0:
        e.append("train.cfg_scale must be >= 0")
    if train.loss not in LOSSES:
        e.append(f"train.loss must be one of {LOSSES}")
    if train.estimator not in ESTIMATORS:
        e.append(f"train.estimator must be one of {ESTIMATORS}")
    if train.loss == "two_sample" and train.K != 2:
        e.append("train.loss two_sample requires train.K == 2")
    for name in ("groups_per_batch", "sampler_steps", "n_draws", "log_every", "checkpoint_every"):
        if getattr(train, name) < 1:
            e.append(f"train.{name} must be >= 1")
    if train.steps < 0 or pretrain.steps < 0:
        e.append("step budgets must be >= 0")
    for name in ("eta_old", "eta_samp"):
        sched = getattr(train, name)
        if isinstance(sched, Schedule):
            bad = [i for i in range(train.steps + 1) if not 0.0 <= sched(i) <= 1.0]
            if bad:
                e.append(f"train.{name} leaves [0, 1] at step {bad[0]}")
    if not 0.0 <= pretrain.p_uncond < 1.0:
        e.append("pretrain.p_uncond must be in [0, 1)")
    if pretrain.batch_size < 1:
        e.append("pretrain.batch_size must be >= 1")
    if not model.hidden or any(h < 1 for h in model.hidden):
        e.append("model.hidden must list positive widths")
    if model.time_dim < 2 or model.time_dim % 2:
        e.append("model.time_dim must be a positive even number")
    if model.activation not in ("tanh", "silu"):
        e.append("model.activation must be tanh or silu")
    if opt.lr < 0 or opt.weight_decay < 0:
        e.append("optimizer.lr and weight_decay must be >= 0")
    if not (0 <= opt.beta1 < 1 and 0 <= opt.beta2 < 1):
        e.append("optimizer betas must be in [0, 1)")
    if ev.n_samples < 1 or ev.sampler_steps < 1:
        e.append("eval.n_samples and eval.sampler_steps must be >= 1")
    if ev.ema_ratio is not None and not 0.0 <= ev.ema_ratio <= 1.0:
        e.append("eval.ema_ratio must be in [0, 1]")
    return e


def loads(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {exc.problem}") from None
    return from_dict(raw)


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), str(path))


def builtin_config(name: str = "desk") -> RunConfig:
    text = resources.files("crdflow.configs").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return loads(text, f"<builtin {name}>")


def replace_section(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with dotted overrides, e.g. ``train__steps=10``."""
    out = copy.deepcopy(cfg)
    for key, value in sections.items():
        section, attr = key.split("__")
        setattr(getattr(out, section), attr, value)
    return out
