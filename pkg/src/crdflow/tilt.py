"""Exact exponential tilting on finite distributions.

Used as a closed-form check of the KL-regularized optimum, the reward /
log-ratio identity, and how repeated tilting against a moving reference
compounds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass
class DiscreteDist:
    p: np.ndarray
    labels: list = field(default=None)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or self.p.size == 0:
            raise ValueError("probability vector must be 1-D and nonempty")
        if np.any(self.p < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.p.sum()!r}, not 1")
        if self.labels is None:
            self.labels = list(range(self.p.size))

    @classmethod
    def from_logits(cls, log_p: np.ndarray, labels=None) -> "DiscreteDist":
        log_p = np.asarray(log_p, dtype=np.float64)
        m = log_p.max()
        p = np.exp(log_p - m)
        return cls(p / p.sum(), labels)

    @property
    def log_p(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.p)


def _log_tilt(log_p_ref: np.ndarray, r: np.ndarray, coef: float):
    """Normalized log p_ref + coef * r and the log normalizer."""
    z = log_p_ref + coef * r
    m = np.max(z)
    log_z = m + math.log(np.sum(np.exp(z - m)))
    return z - log_z, log_z


def tilt(p_ref: DiscreteDist, r, beta: float) -> tuple[DiscreteDist, float]:
    """p* proportional to p_ref * exp(r / beta); returns (p*, log Z)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != p_ref.p.shape:
        raise ValueError("one reward per atom required")
    if not np.any(p_ref.p > 0):
        raise ValueError("reference distribution has no mass")
    log_p, log_z = _log_tilt(p_ref.log_p, r, 1.0 / beta)
    return DiscreteDist(_normalized_exp(log_p), p_ref.labels), log_z


def tilt_log_probs(p_ref: DiscreteDist, r, beta: float) -> np.ndarray:
    log_p, _ = _log_tilt(p_ref.log_p, np.asarray(r, dtype=np.float64), 1.0 / beta)
    return log_p


def _normalized_exp(log_p):
    p = np.exp(log_p)
    return p / p.sum()


def verify_ratio_identity(p_ref: DiscreteDist, p_star: DiscreteDist, r, beta: float, log_z: float | None = None) -> float:
    """max_i |r_i - beta log(p*_i / p_ref_i) - beta log Z|.

    ``log_z`` defaults to the normalizer of tilting ``p_ref`` by ``r``. Atoms
    with zero probability in either distribution are skipped with a warning.
    """
    r = np.asarray(r, dtype=np.float64)
    if log_z is None:
        _, log_z = _log_tilt(p_ref.log_p, r, 1.0 / beta)
    ok = (p_ref.p > 0) & (p_star.p > 0)
    n_bad = int(np.sum(~ok))
    if n_bad:
        warnings.warn(f"{n_bad} zero-probability atoms excluded from the ratio check", stacklevel=2)
    dev = r[ok] - beta * (np.log(p_star.p[ok]) - np.log(p_ref.p[ok])) - beta * log_z
    return float(np.max(np.abs(dev))) if dev.size else 0.0


def verify_centered_identity(p_ref: DiscreteDist, p_star: DiscreteDist, r, beta: float, w) -> float:
    """Deviation between centered rewards and centered beta log-ratios; needs no normalizer."""
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    log_ratio = beta * (np.log(p_star.p) - np.log(p_ref.p))
    return float(np.max(np.abs((r - w @ r) - (log_ratio - w @ log_ratio))))


def iterate_tilt(p0: DiscreteDist, r, beta: float, epochs: int) -> DiscreteDist:
    """Tilt ``epochs`` times, each time against the previous epoch's optimum."""
    if epochs == 0:
        return DiscreteDist(p0.p.copy(), p0.labels)
    return DiscreteDist(_normalized_exp(iterate_tilt_log_probs(p0, r, beta, epochs)), p0.labels)


def iterate_tilt_log_probs(p0: DiscreteDist, r, beta: float, epochs: int) -> np.ndarray:
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    r = np.asarray(r, dtype=np.float64)
    log_p = p0.log_p
    for _ in range(epochs):
        log_p, _ = _log_tilt(log_p, r, 1.0 / beta)
    return log_p


class DistMetrics(NamedTuple):
    tv: float
    kl: float
    kl_infinite: bool


def dist_metrics(p: DiscreteDist, q: DiscreteDist) -> DistMetrics:
    """Total variation and KL(p || q) with 0 log 0 = 0."""
    if p.p.shape != q.p.shape:
        raise ValueError("distributions must share a support")
    tv = 0.5 * float(np.sum(np.abs(p.p - q.p)))
    support = p.p > 0
    if np.any(q.p[support] == 0):
        return DistMetrics(tv, math.inf, True)
    kl = float(np.sum(p.p[support] * (np.log(p.p[support]) - np.log(q.p[support]))))
    return DistMetrics(tv, kl, False)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool


def run_oracle_suite(seed: int = 0, n_random: int = 200) -> list[CheckResult]:
    """Randomized checks of the tilt identities; used by the ``tilt-check`` command."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(n_random):
        M = int(rng.integers(2, 65))
        p = DiscreteDist(rng.dirichlet(np.ones(M)))
        r = rng.uniform(0, 1, M)
        beta = float(rng.uniform(0.1, 5.0))
        ps, log_z = tilt(p, r, beta)
        worst = max(worst, verify_ratio_identity(p, ps, r, beta, log_z))
    results.append(CheckResult("ratio identity", worst, 1e-10, worst <= 1e-10))

    worst = 0.0
    for _ in range(n_random):
        M = int(rng.integers(2, 65))
        p = DiscreteDist(rng.dirichlet(np.ones(M)))
        r = rng.uniform(0, 1, M)
        beta = float(rng.uniform(0.1, 5.0))
        ps, _ = tilt(p, r, beta)
        w = rng.dirichlet(np.ones(M))
        worst = max(worst, verify_centered_identity(p, ps, r, beta, w))
    results.append(CheckResult("centered identity", worst, 1e-10, worst <= 1e-10))

    worst = 0.0
    for _ in range(n_random // 4):
        M = int(rng.integers(2, 65))
        p = DiscreteDist(rng.dirichlet(np.ones(M)))
        r = rng.uniform(0, 1, M)
        beta = float(rng.uniform(0.5, 5.0))
        K = int(rng.integers(1, 101))
        it = iterate_tilt_log_probs(p, r, beta, K)
        one = tilt_log_probs(p, r, beta / K)
        worst = max(worst, float(np.max(np.abs(it - one))))
    results.append(CheckResult("composition law", worst, 1e-10, worst <= 1e-10))

    violations = 0
    for _ in range(n_random // 4):
        M = int(rng.integers(2, 65))
        p = DiscreteDist(rng.dirichlet(np.ones(M)))
        r = rng.uniform(0, 1, M)
        best = int(np.argmax(r))
        mass = [iterate_tilt(p, r, 1.0, K).p[best] for K in range(0, 51)]
        violations += int(np.sum(np.diff(mass) < 0))
    results.append(CheckResult("monotone concentration", float(violations), 0.0, violations == 0))

    worst = 0.0
    for _ in range(n_random):
        M = int(rng.integers(2, 65))
        p = DiscreteDist(rng.dirichlet(np.ones(M)))
        q = DiscreteDist(rng.dirichlet(np.ones(M)))
        m = dist_metrics(p, q)
        tv = sum(abs(a - b) for a, b in zip(p.p, q.p)) / 2
        kl = sum(a * math.log(a / b) for a, b in zip(p.p, q.p) if a > 0)
        worst = max(worst, abs(m.tv - tv), abs(m.kl - kl))
    results.append(CheckResult("distance metrics", worst, 1e-12, worst <= 1e-12))
    return results
