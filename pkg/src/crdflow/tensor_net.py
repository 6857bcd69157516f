"""Small dense MLP with hand-written reverse mode and an AdamW optimizer.

Every loss used in this package depends on the trainable parameters only
through the network's outputs on a fixed batch of inputs, so gradients are
obtained by (1) evaluating the net with a cache, (2) asking the loss for
dL/d(outputs), and (3) back-propagating that through the layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

NULL_PROMPT = -1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda h, a: 1.0 - a * a),
    "silu": (
        lambda h: h / (1.0 + np.exp(-h)),
        lambda h, a: (1.0 / (1.0 + np.exp(-h))) * (1.0 + h * (1.0 - 1.0 / (1.0 + np.exp(-h)))),
    ),
}


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term evaluates to NaN or inf."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class MlpSpec:
    data_dim: int
    n_prompts: int
    hidden: tuple[int, ...] = (64, 64)
    time_dim: int = 8
    activation: str = "tanh"

    def __post_init__(self):
        if self.data_dim < 1 or self.n_prompts < 1:
            raise ValueError("data_dim and n_prompts must be positive")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even (sin/cos pairs)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def input_dim(self) -> int:
        # one extra slot for the null (unconditional) prompt
        return self.data_dim + self.time_dim + self.n_prompts + 1

    @property
    def output_dim(self) -> int:
        return self.data_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        widths = [self.input_dim, *self.hidden, self.output_dim]
        shapes = []
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"W{k}", (n_in, n_out)))
            shapes.append((f"b{k}", (n_out,)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "n_prompts": self.n_prompts,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "activation": self.activation,
        }


@dataclass
class ParamSet:
    """Named float64 tensors of one MLP, in layer order."""

    spec: MlpSpec
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.spec.layer_shapes()
        if [n for n, _ in expected] != list(self.tensors):
            raise ValueError("tensor names do not match the architecture")
        for name, shape in expected:
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.spec, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        out, pos = {}, 0
        for k, a in self.tensors.items():
            out[k] = np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return ParamSet(self.spec, out)

    def same_values(self, other: "ParamSet") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


@dataclass
class GradTape:
    grads: dict[str, np.ndarray]
    loss: float
    terms: dict[str, float] = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])


def init_params(spec: MlpSpec, rng: np.random.Generator, zero_output: bool = False) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    tensors = {}
    n_layers = len(spec.hidden) + 1
    for name, shape in spec.layer_shapes():
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
            if zero_output and name == f"W{n_layers - 1}":
                tensors[name][:] = 0.0
        else:
            tensors[name] = np.zeros(shape)
    return ParamSet(spec, tensors)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    freqs = math.pi * (2.0 ** np.arange(dim // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def build_inputs(spec: MlpSpec, x: np.ndarray, t, c) -> np.ndarray:
    """Concatenate [x, sinusoidal(t), one-hot(prompt)] row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if x.shape[1] != spec.data_dim:
        raise ValueError(f"x has dimension {x.shape[1]}, expected {spec.data_dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if np.any((c < NULL_PROMPT) | (c >= spec.n_prompts)):
        raise ValueError(f"prompt id out of range [-1, {spec.n_prompts})")
    onehot = np.zeros((n, spec.n_prompts + 1))
    onehot[np.arange(n), np.where(c == NULL_PROMPT, spec.n_prompts, c)] = 1.0
    return np.concatenate([x, time_features(t, spec.time_dim), onehot], axis=1)


def _forward_cached(params: ParamSet, inputs: np.ndarray):
    act, dact = _ACTIVATIONS[params.spec.activation]
    n_layers = len(params.spec.hidden) + 1
    cache = [inputs]
    pre = []
    h = inputs
    for k in range(n_layers):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < n_layers - 1:
            pre.append(z)
            h = act(z)
            cache.append(h)
        else:
            h = z
    return h, (cache, pre)


def forward(params: ParamSet, x_t, t, c) -> np.ndarray:
    """Predicted velocity v(x_t, t | c).

    Accepts a single vector (returns a vector) or a batch of row vectors
    with per-row or broadcast ``t`` and ``c``.
    """
    single = np.ndim(x_t) == 1
    out, _ = _forward_cached(params, build_inputs(params.spec, x_t, t, c))
    return out[0] if single else out


def backprop(params: ParamSet, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    act, dact = _ACTIVATIONS[params.spec.activation]
    acts, pre = cache
    n_layers = len(params.spec.hidden) + 1
    grads: dict[str, np.ndarray] = {}
    delta = d_out
    for k in reversed(range(n_layers)):
        grads[f"W{k}"] = acts[k].T @ delta
        grads[f"b{k}"] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params[f"W{k}"].T) * dact(pre[k - 1], acts[k])
    return {name: grads[name] for name in params.tensors}


OutputLoss = Callable[[np.ndarray], "tuple[float, np.ndarray, dict[str, float]]"]


def grad(loss_fn: OutputLoss, params: ParamSet, x_t, t, c) -> GradTape:
    """Exact gradient of ``loss_fn(v_theta(x_t, t | c))`` w.r.t. ``params``.

    ``loss_fn`` maps the (n, d) output batch to ``(value, dvalue/doutput,
    terms)``. Stop-gradient factors are the loss's responsibility: they are
    simply left out of the output derivative it returns.
    """
    out, cache = _forward_cached(params, build_inputs(params.spec, x_t, t, c))
    value, d_out, terms = loss_fn(out)
    for name, v in {**terms, "loss": value}.items():
        if not np.isfinite(v):
            raise NonFiniteLossError(name, float(v))
    if not np.all(np.isfinite(d_out)):
        raise NonFiniteLossError("d_output", float("nan"))
    return GradTape(backprop(params, cache, d_out), float(value), dict(terms))


@dataclass
class AdamWConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adamw_step(
    params: ParamSet,
    grads: GradTape,
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One Adam update with decoupled weight decay."""
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads.grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        p = p - lr * weight_decay * p
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return ParamSet(params.spec, new_p), AdamState(new_m, new_v, step)


# -- checkpoint format: <stem>.json manifest + <stem>.bin little-endian f64 blob


def save_params(params: ParamSet, stem: Path | str) -> None:
    stem = Path(stem)
    manifest = {
        "format": "crdflow-params",
        "version": 1,
        "architecture": params.spec.to_dict(),
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in params.tensors.items()],
        "blob": stem.name + ".bin",
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.tensors.values())
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_params(stem: Path | str) -> ParamSet:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    arch = manifest["architecture"]
    spec = MlpSpec(
        data_dim=arch["data_dim"],
        n_prompts=arch["n_prompts"],
        hidden=tuple(arch["hidden"]),
        time_dim=arch["time_dim"],
        activation=arch["activation"],
    )
    raw = (stem.parent / manifest["blob"]).read_bytes()
    flat = np.frombuffer(raw, dtype="<f8")
    tensors, pos = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        tensors[entry["name"]] = flat[pos : pos + size].astype(np.float64).reshape(shape)
        pos += size
    if pos != flat.size:
        raise ValueError(f"{stem}: blob has {flat.size} values, manifest lists {pos}")
    return ParamSet(spec, tensors)
