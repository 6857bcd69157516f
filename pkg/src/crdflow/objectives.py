"""Centered reward distillation losses and their building blocks.

Notation used throughout: for one prompt group of K samples, ``r`` are the
group-normalized external rewards, ``R`` the ELBO implicit rewards of the
training net against the moving reference, and ``w`` the centering weights.

Output-space closures (``*_fn``) map the training net's stacked velocity
predictions to ``(value, d value / d v, terms)`` for :func:`tensor_net.grad`.
Reference velocities are captured as constants, so gradients reach only
``v_theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .flow import cfg_velocity
from .rewards import GroupBatch
from .tensor_net import NULL_PROMPT, ParamSet, forward

EPS_L1 = 1e-8
ESTIMATORS = ("plain", "adaptive_v", "adaptive_x0")
LOSSES = ("crd", "infonca", "two_sample")


@dataclass(frozen=True)
class CenteringWeights:
    w: np.ndarray
    tau: float | str

    def __iter__(self):
        return iter(self.w)


def parse_tau(tau) -> float | str:
    """Accept a positive float, ``inf``/``"inf"`` or ``"zero"`` (the one-hot limit)."""
    if isinstance(tau, str):
        key = tau.strip().lower()
        if key in ("inf", "infinity"):
            return math.inf
        if key == "zero":
            return "zero"
        tau = float(key)
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"temperature must be > 0 (use 'zero' for the one-hot limit), got {tau}")
    return tau


def softmax_weights(r, tau=math.inf) -> CenteringWeights:
    """w_i proportional to exp(r_i / tau).

    ``tau=inf`` gives exactly 1/K; ``tau="zero"`` puts all mass on the first
    maximal reward.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two samples")
    tau = parse_tau(tau)
    K = r.size
    if tau == "zero":
        w = np.zeros(K)
        w[int(np.argmax(r))] = 1.0
    elif math.isinf(tau):
        w = np.full(K, 1.0 / K)
    else:
        z = r / tau
        e = np.exp(z - z.max())
        w = e / e.sum()
    return CenteringWeights(w, tau)


def centered_residuals(values, w) -> np.ndarray:
    w = np.asarray(w.w if isinstance(w, CenteringWeights) else w, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != w.shape:
        raise ValueError("values and weights must have the same length")
    return values - w @ values


# ---------------------------------------------------------------- ELBO rewards


def _denoise_error(e: np.ndarray, t: np.ndarray, tag: str, sg_den: np.ndarray | None = None):
    """Per-row weighted squared error and its derivative w.r.t. ``e``.

    ``e`` is (..., d). For the adaptive tags the L1 denominator is a
    stop-gradient constant; ``sg_den`` overrides it (used to freeze it at a
    reference point).
    """
    if tag not in ESTIMATORS:
        raise ValueError(f"unknown estimator {tag!r}")
    sq = np.sum(e * e, axis=-1)
    if tag == "plain":
        return sq, 2.0 * e
    d = e.shape[-1]
    den = np.maximum(np.sum(np.abs(e), axis=-1), EPS_L1) if sg_den is None else sg_den
    q = d * sq / den
    dq = 2.0 * d * e / den[..., None]
    if tag == "adaptive_x0":
        q = q * t
        dq = dq * t[..., None]
    return q, dq


def l1_denominator(e: np.ndarray) -> np.ndarray:
    return np.maximum(np.sum(np.abs(e), axis=-1), EPS_L1)


def implicit_reward_terms(v_theta, v_old, v_target, t, beta_old: float, tag: str, sg_den=None):
    """Implicit rewards R (K,) and dR/dv_theta for draws shaped (K, M, d).

    R_i = -beta_old * mean_m [q(v_theta - v_target) - q(v_old - v_target)].
    """
    v_theta = np.asarray(v_theta, dtype=np.float64)
    M = v_theta.shape[1]
    q_th, dq_th = _denoise_error(v_theta - v_target, t, tag, sg_den)
    q_old, _ = _denoise_error(np.asarray(v_old) - v_target, t, tag)
    R = -beta_old * np.mean(q_th - q_old, axis=1)
    dR = -beta_old * dq_th / M
    return R, dR


def implicit_reward(params_theta: ParamSet, params_old: ParamSet, noised, c, beta_old: float, tag: str = "adaptive_v"):
    """ELBO estimate of beta_old * log p_theta / p_old from one forward-diffused draw per row.

    Returns a float for a single (unbatched) draw, else one value per row.
    """
    single = np.ndim(noised.x_t) == 1
    x_t = np.atleast_2d(noised.x_t)
    vt = np.atleast_2d(noised.v_target)
    t = np.broadcast_to(np.asarray(noised.t, dtype=np.float64), (x_t.shape[0],))
    v_th = forward(params_theta, x_t, t, c)
    v_old = forward(params_old, x_t, t, c)
    R, _ = implicit_reward_terms(v_th[:, None], v_old[:, None], vt[:, None], t[:, None], beta_old, tag)
    return float(R[0]) if single else R


# ---------------------------------------------------------------- reward matching


def crd_loss_from_rewards(r, R, w) -> float:
    """(1/K) sum_i (centered r_i - centered R_i)^2 for given weights."""
    res = centered_residuals(r, w) - centered_residuals(R, w)
    return float(np.mean(res * res))


def _crd_value_and_dR(r, R, w):
    w = np.asarray(w, dtype=np.float64)
    res = (r - w @ r) - (R - w @ R)
    K = r.size
    g = -2.0 * res / K
    return float(np.mean(res * res)), g - w * g.sum()


def two_sample_distill_loss(r1, r2, R1, R2) -> float:
    diff = (r1 - r2) - (R1 - R2)
    return 0.5 * diff * diff


class InfoNcaValue(NamedTuple):
    cross_entropy: float
    kl: float


def _log_softmax(z, log_w):
    z = z + log_w
    m = z.max()
    return z - (m + math.log(np.sum(np.exp(z - m))))


def infonca_loss(r, r_theta, beta: float = 1.0, w=None) -> InfoNcaValue:
    """Cross-entropy from q*(r/beta) to q_theta(r_theta/beta) over the K candidates.

    ``w`` are the candidate weights (default all ones). The KL form differs
    from the cross-entropy by the entropy of q*, which does not depend on r_theta.
    """
    r = np.asarray(r, dtype=np.float64)
    r_theta = np.asarray(r_theta, dtype=np.float64)
    if r.size < 2 or r.shape != r_theta.shape:
        raise ValueError("need K >= 2 matching rewards")
    w = np.ones_like(r) if w is None else np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    log_q_star = _log_softmax(r / beta, log_w)
    log_q_th = _log_softmax(r_theta / beta, log_w)
    q_star = np.exp(log_q_star)
    mask = q_star > 0
    ce = float(-np.sum(q_star[mask] * log_q_th[mask]))
    kl = float(np.sum(q_star[mask] * (log_q_star[mask] - log_q_th[mask])))
    return InfoNcaValue(ce, kl)


def infonca_weights(r, beta: float = 1.0, w=None) -> np.ndarray:
    """The teacher distribution q* alone."""
    r = np.asarray(r, dtype=np.float64)
    w = np.ones_like(r) if w is None else np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.exp(_log_softmax(r / beta, np.log(w)))


def _infonca_value_and_dR(r, R, beta):
    ones = np.zeros_like(r)
    log_q_star = _log_softmax(r / beta, ones)
    log_q_th = _log_softmax(R / beta, ones)
    q_star = np.exp(log_q_star)
    ce = float(-np.sum(q_star * log_q_th))
    return ce, (np.exp(log_q_th) - q_star) / beta


# ---------------------------------------------------------------- KL anchor


def adaptive_kl_strength(r_raw, beta_init: float, adaptive: bool = True) -> np.ndarray:
    r_raw = np.asarray(r_raw, dtype=np.float64)
    return r_raw * beta_init if adaptive else np.full_like(r_raw, beta_init)


def kl_anchor_terms(v_theta, v_cfg, beta_hat):
    """(1/K) sum_i beta_hat_i mean_m |v_theta - v_cfg|^2 and its v_theta gradient."""
    K, M = v_theta.shape[:2]
    diff = v_theta - v_cfg
    sq = np.mean(np.sum(diff * diff, axis=-1), axis=1)
    value = float(np.sum(beta_hat * sq) / K)
    grad = 2.0 * beta_hat[:, None, None] * diff / (K * M)
    return value, grad, sq


# ---------------------------------------------------------------- group losses


@dataclass
class ObjectiveSettings:
    loss: str = "crd"
    estimator: str = "adaptive_v"
    beta_old: float = 1.0
    tau: float | str = math.inf
    beta_init: float = 0.05
    adaptive_kl: bool = True
    cfg_scale: float = 3.0
    infonca_beta: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        self.tau = parse_tau(self.tau)
        if self.beta_old <= 0:
            raise ValueError("beta_old must be > 0")
        if self.beta_init < 0:
            raise ValueError("beta_init must be >= 0")


def group_inputs(group: GroupBatch):
    """Stacked (K*M, d) states, times and prompt ids for one group's draws."""
    if group.x_t is None:
        raise ValueError("group has no forward-diffused draws attached")
    K, M, d = group.x_t.shape
    return group.x_t.reshape(K * M, d), group.t.reshape(K * M), np.full(K * M, group.c)


def batch_inputs(groups: Sequence[GroupBatch]):
    parts = [group_inputs(g) for g in groups]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def reference_velocities(groups, params_old: ParamSet, params_phi: ParamSet | None, cfg_scale: float):
    """Frozen v_old and v_phi^CFG on the stacked group inputs."""
    x, t, c = batch_inputs(groups)
    v_old = forward(params_old, x, t, c)
    v_cfg = None
    if params_phi is not None:
        v_cfg = cfg_velocity(forward(params_phi, x, t, c), forward(params_phi, x, t, NULL_PROMPT), cfg_scale)
    return v_old, v_cfg


def group_loss_fn(
    groups: Sequence[GroupBatch],
    v_old: np.ndarray,
    v_cfg: np.ndarray | None,
    settings: ObjectiveSettings,
    sg_reference: np.ndarray | None = None,
):
    """Closure for the total loss averaged over groups.

    ``sg_reference`` (stacked outputs) pins the stop-gradient denominators at
    that point instead of recomputing them from the evaluated outputs; this is
    what a finite-difference check must hold fixed.
    """
    shapes = [g.x_t.shape for g in groups]
    offsets = np.cumsum([0] + [K * M for K, M, _ in shapes])
    G = len(groups)
    use_kl = settings.beta_init > 0 and v_cfg is not None
    beta_hats = [adaptive_kl_strength(g.r_raw, settings.beta_init, settings.adaptive_kl) for g in groups]
    weights = [softmax_weights(g.r, settings.tau).w for g in groups]

    def loss_fn(v):
        dv = np.zeros_like(v)
        match_total = kl_total = 0.0
        R_all = []
        for gi, (g, (K, M, d)) in enumerate(zip(groups, shapes)):
            sl = slice(offsets[gi], offsets[gi + 1])
            v_th = v[sl].reshape(K, M, d)
            sg_den = None
            if sg_reference is not None and settings.estimator != "plain":
                sg_den = l1_denominator(sg_reference[sl].reshape(K, M, d) - g.v_target)
            R, dR_dv = implicit_reward_terms(
                v_th, v_old[sl].reshape(K, M, d), g.v_target, g.t, settings.beta_old, settings.estimator, sg_den
            )
            R_all.append(R)
            if settings.loss == "crd":
                val, dL_dR = _crd_value_and_dR(g.r, R, weights[gi])
            elif settings.loss == "two_sample":
                if K != 2:
                    raise ValueError("two_sample loss needs K == 2")
                diff = (g.r[0] - g.r[1]) - (R[0] - R[1])
                val, dL_dR = 0.5 * diff * diff, np.array([-diff, diff])
            else:
                val, dL_dR = _infonca_value_and_dR(g.r, R, settings.infonca_beta)
            match_total += val
            g_v = dL_dR[:, None, None] * dR_dv
            if use_kl:
                kv, kg, _ = kl_anchor_terms(v_th, v_cfg[sl].reshape(K, M, d), beta_hats[gi])
                kl_total += kv
                g_v = g_v + kg
            dv[sl] = (g_v / G).reshape(K * M, d)
        R_cat = np.concatenate(R_all)
        terms = {
            settings.loss: match_total / G,
            "kl": kl_total / G,
            "implicit_reward_mean": float(R_cat.mean()),
            "implicit_reward_std": float(R_cat.std()),
        }
        return (match_total + kl_total) / G, dv, terms

    loss_fn.beta_hats = beta_hats
    return loss_fn


# ---------------------------------------------------------------- parameter-level API


def _group_velocities(group, params):
    x, t, c = group_inputs(group)
    K, M, d = group.x_t.shape
    return forward(params, x, t, c).reshape(K, M, d)


def crd_loss(group: GroupBatch, params_theta, params_old, beta_old=1.0, tau=math.inf, tag="adaptive_v") -> float:
    v_th = _group_velocities(group, params_theta)
    v_old = _group_velocities(group, params_old)
    R, _ = implicit_reward_terms(v_th, v_old, group.v_target, group.t, beta_old, tag)
    return crd_loss_from_rewards(group.r, R, softmax_weights(group.r, tau))


def kl_anchor_loss(group: GroupBatch, params_theta, params_phi, s=4.5, beta_init=0.1, adaptive=True) -> float:
    v_th = _group_velocities(group, params_theta)
    x, t, c = group_inputs(group)
    K, M, d = group.x_t.shape
    v_cfg = cfg_velocity(
        forward(params_phi, x, t, c), forward(params_phi, x, t, NULL_PROMPT), s
    ).reshape(K, M, d)
    value, _, _ = kl_anchor_terms(v_th, v_cfg, adaptive_kl_strength(group.r_raw, beta_init, adaptive))
    return value


class LossBreakdown(NamedTuple):
    total: float
    crd: float
    kl: float


def total_loss(group: GroupBatch, params_theta, params_old, params_phi, settings: ObjectiveSettings) -> LossBreakdown:
    crd = crd_loss(group, params_theta, params_old, settings.beta_old, settings.tau, settings.estimator)
    kl = 0.0
    if settings.beta_init > 0:
        kl = kl_anchor_loss(group, params_theta, params_phi, settings.cfg_scale, settings.beta_init, settings.adaptive_kl)
    return LossBreakdown(crd + kl, crd, kl)
