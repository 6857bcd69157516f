"""Toy conditional tasks, bounded analytic rewards, group normalization and Best-of-N."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_STD = 1e-8

REWARD_TAGS = ("mode_preference", "target_region", "direction")


@dataclass
class GaussianMixture:
    means: np.ndarray  # (n_components, d)
    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.sigma * rng.standard_normal((n, self.means.shape[1]))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means


@dataclass
class ToyTask:
    dim: int
    prompts: list[GaussianMixture]
    name: str = "custom"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("toy tasks are 1-D or 2-D")
        if not self.prompts:
            raise ValueError("at least one prompt required")
        for p in self.prompts:
            if p.means.shape[1] != self.dim:
                raise ValueError("component means must match the task dimension")

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Training pairs (x0, c) with prompts drawn uniformly."""
        c = rng.integers(self.n_prompts, size=n)
        x = np.empty((n, self.dim))
        for k, mix in enumerate(self.prompts):
            idx = np.flatnonzero(c == k)
            if idx.size:
                x[idx] = mix.sample(idx.size, rng)
        return x, c


def two_modes_1d(sigma: float = 0.3) -> ToyTask:
    return ToyTask(1, [GaussianMixture([[-1.0], [1.0]], sigma, [0.5, 0.5])], name="two_modes_1d")


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class RewardFn:
    """Analytic reward in [0, 1].

    mode_preference: sigmoid of the signed distance to the hyperplane bisecting
        ``target`` and ``rival`` (positive on the target side).
    target_region: sigmoid((radius - |x - center|) / smoothness).
    direction: sigmoid((x . u - offset) / smoothness) with u = direction/|direction|.
    """

    tag: str
    target: np.ndarray | None = None
    rival: np.ndarray | None = None
    radius: float = 0.5
    direction: np.ndarray | None = None
    offset: float = 0.0
    smoothness: float = 0.1

    def __post_init__(self):
        if self.tag not in REWARD_TAGS:
            raise ValueError(f"unknown reward tag {self.tag!r}; expected one of {REWARD_TAGS}")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")
        for name in ("target", "rival", "direction"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.atleast_1d(np.asarray(v, dtype=np.float64)))
        need = {"mode_preference": ("target", "rival"), "target_region": ("target",), "direction": ("direction",)}
        missing = [k for k in need[self.tag] if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.tag} reward needs {missing}")
        if self.tag == "mode_preference" and np.allclose(self.target, self.rival):
            raise ValueError("target and rival modes coincide")
        if self.tag == "direction" and not np.any(self.direction):
            raise ValueError("direction must be nonzero")

    def __eq__(self, other):
        if not isinstance(other, RewardFn):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def signed_score(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.tag == "mode_preference":
            axis = self.target - self.rival
            axis = axis / np.linalg.norm(axis)
            mid = 0.5 * (self.target + self.rival)
            return (x - mid) @ axis
        if self.tag == "target_region":
            return self.radius - np.linalg.norm(x - self.target, axis=1)
        u = self.direction / np.linalg.norm(self.direction)
        return x @ u - self.offset

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.signed_score(x) / self.smoothness)

    def to_dict(self) -> dict:
        d: dict = {"tag": self.tag, "smoothness": float(self.smoothness)}
        if self.tag == "mode_preference":
            d.update(target=self.target.tolist(), rival=self.rival.tolist())
        elif self.tag == "target_region":
            d.update(target=self.target.tolist(), radius=float(self.radius))
        else:
            d.update(direction=self.direction.tolist(), offset=float(self.offset))
        return d


def eval_reward(fn: RewardFn | Sequence[RewardFn], c, x) -> np.ndarray | float:
    """Raw reward r(c, x) in [0, 1]; ``fn`` may be one reward or one per prompt."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(fn, RewardFn):
        out = fn(x)
    else:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x.shape[0],))
        out = np.empty(x.shape[0])
        for k, f in enumerate(fn):
            idx = np.flatnonzero(c == k)
            if idx.size:
                out[idx] = f(x[idx])
    return float(out[0]) if single else out


def group_normalize(r_raw) -> np.ndarray:
    """(r - mean) / max(std, 1e-8) with the population std; constant groups map to 0."""
    r = np.asarray(r_raw, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centered = r - r.mean()
    std = np.sqrt(np.mean(centered * centered))
    return centered / max(std, EPS_STD)


@dataclass
class GroupBatch:
    c: int
    samples: np.ndarray  # (K, d)
    r_raw: np.ndarray
    r: np.ndarray = field(default=None)
    # (K, n_draws) times and (K, n_draws, d) noise/states; filled by the trainer
    t: np.ndarray | None = None
    eps: np.ndarray | None = None
    x_t: np.ndarray | None = None
    v_target: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        self.r_raw = np.asarray(self.r_raw, dtype=np.float64)
        if self.samples.shape[0] < 2:
            raise ValueError("K must be >= 2")
        if self.r_raw.shape != (self.samples.shape[0],):
            raise ValueError("one raw reward per sample required")
        if self.r is None:
            self.r = group_normalize(self.r_raw)

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    def attach_noise(self, rng: np.random.Generator, n_draws: int = 1) -> "GroupBatch":
        K, d = self.samples.shape
        self.t = rng.uniform(0.0, 1.0, size=(K, n_draws))
        self.eps = rng.standard_normal((K, n_draws, d))
        x0 = self.samples[:, None, :]
        tb = self.t[..., None]
        self.x_t = tb * self.eps + (1.0 - tb) * x0
        self.v_target = self.eps - x0
        return self

    def to_dict(self) -> dict:
        out = {"c": int(self.c)}
        for k in ("samples", "r_raw", "r", "t", "eps", "x_t", "v_target"):
            v = getattr(self, k)
            out[k] = None if v is None else np.asarray(v).tolist()
        return out


def bon_select(samples, rewards, n: int) -> int:
    """Index of the best of the first ``n`` samples; ties go to the lowest index."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if n < 1:
        raise ValueError("N must be >= 1")
    if n > len(rewards) or n > len(samples):
        raise ValueError(f"N={n} exceeds the {len(rewards)} available samples")
    return int(np.argmax(rewards[:n]))


@dataclass
class BonCurve:
    n: np.ndarray
    best: np.ndarray
    mean: np.ndarray

    def rows(self):
        return zip(self.n.tolist(), self.best.tolist(), self.mean.tolist())


def bon_curve(
    model: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]],
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray],
    n_max: int,
    repeats: int,
    rng: np.random.Generator,
) -> BonCurve:
    """Best-of-N and plain mean reward for N = 1..n_max, averaged over ``repeats``.

    ``model(n, rng)`` returns ``(samples, prompts)``; ``reward(c, x)`` scores them.
    """
    if n_max < 1:
        raise ValueError("N_max must be >= 1")
    best = np.zeros(n_max)
    mean = np.zeros(n_max)
    for _ in range(repeats):
        x, c = model(n_max, rng)
        r = np.asarray(reward(c, x), dtype=np.float64)
        best += np.maximum.accumulate(r)
        mean += np.cumsum(r) / np.arange(1, n_max + 1)
    return BonCurve(np.arange(1, n_max + 1), best / repeats, mean / repeats)


def expected_best_of_n(probs, rewards, n: int) -> float:
    """E[max of n iid rewards] for a discrete outcome model, via order statistics."""
    probs = np.asarray(probs, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    order = np.argsort(rewards, kind="stable")
    r_sorted = rewards[order]
    cdf = np.cumsum(probs[order])
    cdf_prev = np.concatenate([[0.0], cdf[:-1]])
    return float(np.sum(r_sorted * (cdf**n - cdf_prev**n)))
