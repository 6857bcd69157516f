"""Pretraining and CRD fine-tuning with moving-reference and sampling EMAs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, constant_schedule
from .flow import SamplerConfig, draw_noised, fm_pretrain_loss, guided_velocity, ode_sample
from .io import (
    METRICS_COLUMNS,
    MetricsRow,
    MetricsWriter,
    RunDir,
    read_checkpoint,
    save_group_dump,
    truncate_metrics,
    write_checkpoint,
)
from .objectives import ObjectiveSettings, batch_inputs, group_loss_fn, reference_velocities
from .rewards import GroupBatch, eval_reward
from .tensor_net import (
    AdamState,
    MlpSpec,
    NonFiniteLossError,
    ParamSet,
    adamw_step,
    forward,
    grad,
    init_params,
)

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Training hit a non-finite value; the run directory holds a dump."""


# ------------------------------------------------------------------ EMA


@dataclass
class EmaState:
    params: ParamSet
    schedule: Callable[[int], float]
    role: str

    def decay(self, i: int) -> float:
        eta = float(self.schedule(i))
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"{self.role} decay {eta} outside [0, 1] at step {i}")
        return eta


def ema_update(state: EmaState, current: ParamSet, i: int) -> EmaState:
    """theta_ema <- eta * theta_ema + (1 - eta) * theta with eta = schedule(i)."""
    if state.params.spec != current.spec:
        raise ValueError("EMA and current parameters have different architectures")
    eta = state.decay(i)
    new = {}
    for k, a in state.params.tensors.items():
        b = current.tensors[k]
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {k}")
        mix = np.clip(eta * a + (1.0 - eta) * b, np.minimum(a, b), np.maximum(a, b))
        # equal entries stay bit-identical (rounding would otherwise nudge them)
        new[k] = np.where(a == b, a, mix)
    return EmaState(ParamSet(current.spec, new), state.schedule, state.role)


# ------------------------------------------------------------------ pretraining


def model_spec(cfg: RunConfig) -> MlpSpec:
    return MlpSpec(
        data_dim=cfg.task.dim,
        n_prompts=cfg.task.n_prompts,
        hidden=tuple(cfg.model.hidden),
        time_dim=cfg.model.time_dim,
        activation=cfg.model.activation,
    )


def _streams(seed: int):
    pre, train, init = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(pre), np.random.default_rng(train), np.random.default_rng(init)


def pretrain(cfg: RunConfig, steps: int | None = None, history: list | None = None) -> ParamSet:
    """Flow-matching pretraining of phi on the task's data."""
    pre_rng, _, init_rng = _streams(cfg.seed)
    params = init_params(model_spec(cfg), init_rng)
    opt = AdamState.zeros(params)
    steps = cfg.pretrain.steps if steps is None else steps
    for i in range(steps):
        x0, c = cfg.task.sample(cfg.pretrain.batch_size, pre_rng)
        value, loss_fn, inputs = fm_pretrain_loss(params, x0, c, pre_rng, cfg.pretrain.p_uncond)
        if not np.isfinite(value) or value > 1e6:
            raise NumericAbort(f"pretraining diverged at step {i}: loss={value!r}")
        tape = grad(loss_fn, params, *inputs)
        params, opt = adamw_step(
            params, tape, opt, lr=cfg.pretrain.lr, beta1=cfg.optimizer.beta1,
            beta2=cfg.optimizer.beta2, weight_decay=0.0, eps=cfg.optimizer.eps,
        )
        if history is not None:
            history.append(value)
    return params


# ------------------------------------------------------------------ fine-tuning


@dataclass
class TrainState:
    theta: ParamSet
    old: EmaState
    samp: EmaState
    phi: ParamSet
    opt: AdamState
    rng: np.random.Generator
    step: int = 0
    eval_ema: EmaState | None = None


def objective_settings(cfg: RunConfig) -> ObjectiveSettings:
    t = cfg.train
    return ObjectiveSettings(
        loss=t.loss, estimator=t.estimator, beta_old=t.beta_old, tau=t.tau, beta_init=t.beta_init,
        adaptive_kl=t.adaptive_kl, cfg_scale=t.cfg_scale, infonca_beta=t.infonca_beta,
    )


def init_state(cfg: RunConfig, phi: ParamSet) -> TrainState:
    """theta, theta_old and theta_samp all start as copies of phi."""
    _, train_rng, _ = _streams(cfg.seed)
    eval_ema = None
    if cfg.eval.ema_ratio is not None:
        eval_ema = EmaState(phi.copy(), constant_schedule(cfg.eval.ema_ratio), "eval")
    return TrainState(
        theta=phi.copy(),
        old=EmaState(phi.copy(), cfg.train.eta_old, "old"),
        samp=EmaState(phi.copy(), cfg.train.eta_samp, "samp"),
        phi=phi,
        opt=AdamState.zeros(phi),
        rng=train_rng,
        eval_ema=eval_ema,
    )


@dataclass
class StepResult:
    groups: list[GroupBatch]
    loss: float
    terms: dict = field(default_factory=dict)
    beta_hat: np.ndarray | None = None  # per-sample KL strength, group order

    @property
    def mean_raw_reward(self) -> float:
        return float(np.mean(np.concatenate([g.r_raw for g in self.groups])))


def sample_groups(state: TrainState, cfg: RunConfig) -> list[GroupBatch]:
    """Roll out K samples per prompt from theta_samp (never theta_old)."""
    t = cfg.train
    rng = state.rng
    d = cfg.task.dim
    prompts = rng.integers(cfg.task.n_prompts, size=t.groups_per_batch)
    c_rows = np.repeat(prompts, t.K)
    x1 = rng.standard_normal((t.groups_per_batch * t.K, d))
    x0 = ode_sample(state.samp.params, c_rows, len(c_rows), SamplerConfig(t.sampler_steps, 1.0), x1=x1)
    r_raw = eval_reward(cfg.rewards_list(), c_rows, x0)
    groups = []
    for g, c in enumerate(prompts):
        sl = slice(g * t.K, (g + 1) * t.K)
        groups.append(GroupBatch(int(c), x0[sl], r_raw[sl]).attach_noise(rng, t.n_draws))
    return groups


def train_step(state: TrainState, cfg: RunConfig, i: int) -> StepResult:
    """One iteration: rollout, rewards, implicit rewards vs theta_old, AdamW, EMAs.

    Mutates ``state`` in place and returns the groups and loss terms.
    """
    groups = sample_groups(state, cfg)
    settings = objective_settings(cfg)
    phi = state.phi if settings.beta_init > 0 else None
    try:
        v_old, v_cfg = reference_velocities(groups, state.old.params, phi, settings.cfg_scale)
        loss_fn = group_loss_fn(groups, v_old, v_cfg, settings)
        x, t, c = batch_inputs(groups)
        tape = grad(loss_fn, state.theta, x, t, c)
        for name, g in tape.grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"gradient[{name}]", float("nan"))
    except FloatingPointError as exc:
        exc.groups = groups
        raise
    o = cfg.optimizer
    state.theta, state.opt = adamw_step(
        state.theta, tape, state.opt, lr=o.lr, beta1=o.beta1, beta2=o.beta2,
        weight_decay=o.weight_decay, eps=o.eps,
    )
    state.old = ema_update(state.old, state.theta, i)
    state.samp = ema_update(state.samp, state.theta, i)
    if state.eval_ema is not None:
        state.eval_ema = ema_update(state.eval_ema, state.theta, i)
    state.step = i + 1
    beta_hat = np.concatenate(loss_fn.beta_hats)
    log.debug("step %d beta_hat %s", i, beta_hat)
    return StepResult(groups, tape.loss, tape.terms, beta_hat)


def evaluate(params: ParamSet, phi: ParamSet, cfg: RunConfig, rng: np.random.Generator,
             n: int | None = None) -> tuple[float, float]:
    """Mean raw reward of samples from ``params`` and the KL-to-phi proxy.

    The proxy is mean |v - v_phi^CFG|^2 on forward-diffused copies of those samples.
    """
    n = cfg.eval.n_samples if n is None else n
    c = rng.integers(cfg.task.n_prompts, size=n)
    x1 = rng.standard_normal((n, cfg.task.dim))
    x0 = ode_sample(params, c, n, SamplerConfig(cfg.eval.sampler_steps, cfg.eval.cfg_scale), x1=x1)
    reward = float(np.mean(eval_reward(cfg.rewards_list(), c, x0)))
    noised = draw_noised(x0, rng)
    v = forward(params, noised.x_t, noised.t, c)
    v_ref = guided_velocity(phi, noised.x_t, noised.t, c, cfg.train.cfg_scale)
    kl = float(np.mean(np.sum((v - v_ref) ** 2, axis=1)))
    return reward, kl


FINAL_EVAL_KEY = 2**32 - 1


def _eval_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xE7A1, step])


# ------------------------------------------------------------------ checkpoints


def save_state(state: TrainState, path: Path) -> Path:
    models = {"theta": state.theta, "old": state.old.params, "samp": state.samp.params, "phi": state.phi}
    if state.eval_ema is not None:
        models["eval_ema"] = state.eval_ema.params
    return write_checkpoint(path, models, state.opt, {"step": state.step, "rng": state.rng.bit_generator.state})


def load_state(path: Path, cfg: RunConfig) -> TrainState:
    models, opt, meta = read_checkpoint(path)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    eval_ema = None
    if "eval_ema" in models:
        eval_ema = EmaState(models["eval_ema"], constant_schedule(cfg.eval.ema_ratio or 0.0), "eval")
    return TrainState(
        theta=models["theta"],
        old=EmaState(models["old"], cfg.train.eta_old, "old"),
        samp=EmaState(models["samp"], cfg.train.eta_samp, "samp"),
        phi=models["phi"],
        opt=opt,
        rng=rng,
        step=meta["step"],
        eval_ema=eval_ema,
    )


def load_phi(path: Path | str) -> ParamSet:
    """phi from a pretrain checkpoint directory (or any checkpoint holding ``phi``)."""
    models, _, _ = read_checkpoint(Path(path))
    return models["phi"]


# ------------------------------------------------------------------ driver


@dataclass
class RunResult:
    theta: ParamSet
    state: TrainState
    rows: list[MetricsRow]
    summary: dict
    run_dir: RunDir


def run(cfg: RunConfig, out: Path | str, resume: Path | str | None = None,
        phi: ParamSet | None = None) -> RunResult:
    """Pretrain (or load phi), fine-tune to the step budget, log and checkpoint."""
    rd = RunDir(out).create()
    if resume is None or not rd.config_path.exists():
        rd.write_config(cfg.to_yaml())
    if resume is not None:
        state = load_state(Path(resume), cfg)
        truncate_metrics(rd.metrics_path, state.step)
        truncate_metrics(rd.timing_path, state.step)
    else:
        if phi is None:
            phi = load_phi(cfg.pretrain.checkpoint) if cfg.pretrain.checkpoint else pretrain(cfg)
        state = init_state(cfg, phi)
        if not rd.checkpoint_path("pretrained").exists():
            write_checkpoint(rd.checkpoint_path("pretrained"), {"phi": state.phi})

    rows: list[MetricsRow] = []
    t = cfg.train
    start = time.perf_counter()
    append = resume is not None
    with MetricsWriter(rd.metrics_path, METRICS_COLUMNS, append) as metrics, \
            MetricsWriter(rd.timing_path, ["step", "wall_time"], append) as timing:
        for i in range(state.step, t.steps):
            try:
                res = train_step(state, cfg, i)
            except FloatingPointError as exc:
                dump = rd.path / f"abort_step_{i:06d}.json"
                save_group_dump(dump, getattr(exc, "groups", []))
                raise NumericAbort(f"step {i}: {exc} (groups dumped to {dump})") from exc
            step = i + 1
            if step % t.log_every == 0 or step == t.steps:
                eval_reward_, kl = evaluate(state.theta, state.phi, cfg, _eval_rng(cfg.seed, step))
                row = MetricsRow(
                    step=step,
                    mean_raw_reward=res.mean_raw_reward,
                    eval_reward=eval_reward_,
                    crd_loss=float(res.terms.get(t.loss, np.nan)),
                    kl_loss=float(res.terms.get("kl", 0.0)),
                    implicit_reward_mean=float(res.terms["implicit_reward_mean"]),
                    implicit_reward_std=float(res.terms["implicit_reward_std"]),
                    kl_to_phi=kl,
                    wall_time=time.perf_counter() - start,
                )
                rows.append(row)
                metrics.write(row.__dict__)
                timing.write({"step": step, "wall_time": row.wall_time})
                log.info("step %d reward %.4f eval %.4f kl_phi %.4g", step, row.mean_raw_reward,
                         row.eval_reward, row.kl_to_phi)
            if step % t.checkpoint_every == 0 and step != t.steps:
                save_state(state, rd.checkpoint_path(step))

    final_path = rd.checkpoint_path(state.step)
    if not final_path.exists():
        save_state(state, final_path)
    summary = summarize(state, cfg)
    rd.write_summary(summary)
    return RunResult(state.theta, state, rows, summary, rd)


def summarize(state: TrainState, cfg: RunConfig) -> dict:
    """Baseline (phi) versus final rewards on identical evaluation draws."""
    base_r, base_kl = evaluate(state.phi, state.phi, cfg, _eval_rng(cfg.seed, FINAL_EVAL_KEY))
    eval_r, eval_kl = evaluate(state.theta, state.phi, cfg, _eval_rng(cfg.seed, FINAL_EVAL_KEY))
    samp_r, _ = evaluate(state.samp.params, state.phi, cfg, _eval_rng(cfg.seed, FINAL_EVAL_KEY))
    return {
        "steps": state.step,
        "baseline_reward": base_r,
        "baseline_kl_to_phi": base_kl,
        "final_eval_reward": eval_r,
        "final_samp_reward": samp_r,
        "final_kl_to_phi": eval_kl,
    }
