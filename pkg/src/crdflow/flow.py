"""Rectified-flow forward process, pretraining loss, CFG and the Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_net import NULL_PROMPT, ParamSet, forward


class SamplingError(FloatingPointError):
    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at Euler step {step} (t={t:.4f})")
        self.step = step
        self.t = t


@dataclass
class NoisedSample:
    """Forward-diffused batch. Arrays are (n, d) except ``t`` which is (n,)."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray


@dataclass
class SamplerConfig:
    num_steps: int = 20
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


def forward_diffuse(x0, t, eps) -> NoisedSample:
    """x_t = t*eps + (1-t)*x0 with target velocity eps - x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have the same shape")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    tb = t[..., None] if (t.ndim and x0.ndim == 2) else t
    x_t = tb * eps + (1.0 - tb) * x0
    return NoisedSample(x0=x0, eps=eps, t=t, x_t=x_t, v_target=eps - x0)


def draw_noised(x0: np.ndarray, rng: np.random.Generator) -> NoisedSample:
    """t ~ U[0,1], eps ~ N(0, I) per row, then forward_diffuse."""
    x0 = np.atleast_2d(x0)
    t = rng.uniform(0.0, 1.0, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return forward_diffuse(x0, t, eps)


def cfg_velocity(v_cond, v_uncond, s: float) -> np.ndarray:
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ValueError("v_cond and v_uncond must have equal shapes")
    return v_uncond + s * (v_cond - v_uncond)


def guided_velocity(params: ParamSet, x_t, t, c, s: float) -> np.ndarray:
    """v^CFG with the convention v_u + s (v_c - v_u). s == 1 skips the null branch."""
    v_c = forward(params, x_t, t, c)
    if s == 1.0:
        return v_c
    return cfg_velocity(v_c, forward(params, x_t, t, NULL_PROMPT), s)


def fm_pretrain_loss(
    params: ParamSet,
    x0: np.ndarray,
    c,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
):
    """Flow-matching MSE on a batch; returns (loss, loss_fn, inputs).

    Prompts are replaced by the null prompt with probability ``p_uncond``.
    ``loss_fn`` maps network outputs to (value, d value/d outputs, terms) so the
    same closure drives both evaluation and :func:`tensor_net.grad`.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    c[rng.uniform(size=n) < p_uncond] = NULL_PROMPT
    noised = draw_noised(x0, rng)
    loss_fn = mse_to_target(noised.v_target)
    value, _, _ = loss_fn(forward(params, noised.x_t, noised.t, c))
    return value, loss_fn, (noised.x_t, noised.t, c)


def mse_to_target(v_target: np.ndarray):
    n = v_target.shape[0]

    def loss_fn(v):
        diff = v - v_target
        value = float(np.sum(diff * diff) / n)
        return value, 2.0 * diff / n, {"fm": value}

    return loss_fn


def ode_sample(
    params: ParamSet,
    c,
    n: int,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    x1: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration of dx/dt = v(x, t | c) from t=1 to t=0.

    Initial states come from ``x1`` if given, otherwise from ``rng`` (or a
    generator seeded with ``cfg.seed``). Rows are independent, so batching
    the group members gives the same result as running them one by one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d = params.spec.data_dim
    if x1 is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        x1 = rng.standard_normal((n, d))
    x = np.array(x1, dtype=np.float64).reshape(n, d)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    return euler_integrate(
        lambda x, t: guided_velocity(params, x, t, c, cfg.cfg_scale), x, cfg.num_steps
    )


def euler_integrate(velocity, x1: np.ndarray, num_steps: int) -> np.ndarray:
    """x <- x - dt * velocity(x, t) on the uniform grid t = 1, 1-dt, ..., dt."""
    x = np.array(x1, dtype=np.float64)
    dt = 1.0 / num_steps
    for k in range(num_steps):
        t = 1.0 - k * dt
        x = x - dt * velocity(x, t)
        if not np.all(np.isfinite(x)):
            raise SamplingError(k, t)
    return x
