"""Dense numerics for the pipeline: seeded RNG helpers, a small MLP with
hand-derived forward/backward passes, and the two optimizers used for
training (SGD with momentum, Adam).

Matrices are plain float64 numpy arrays of shape (rows, cols). Weights are
stored as (in_dim, out_dim) so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- rng

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit sub-seed from a master seed and any labels.

    Uses blake2b over the repr of the labels, so the result does not depend on
    PYTHONHASHSEED or platform.
    """
    h = hashlib.blake2b(repr((int(master),) + tuple(labels)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def chain_rngs(master: int, label: str, start: int, n: int) -> list[np.random.Generator]:
    """One generator per chain, seeded from (master, label, chain index)."""
    return [make_rng(derive_seed(master, label, i)) for i in range(start, start + n)]


def standard_normal(rng, n: int, d: int) -> np.ndarray:
    """Draw an (n, d) block of N(0, 1).

    ``rng`` is either a single Generator (rows drawn as one block) or a sequence
    of n per-row Generators, so chains stay reproducible regardless of how they
    are batched.
    """
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal((n, d))
    if len(rng) != n:
        raise ShapeError(f"expected {n} row generators, got {len(rng)}")
    return np.stack([g.standard_normal(d) for g in rng]) if n else np.zeros((0, d))


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a


# ---------------------------------------------------------------- mlp

@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input dim does not chain")
        if self.activations and self.activations[-1] != "identity":
            raise ValueError("final layer activation must be identity")

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "Mlp":
        """He-style init for relu layers, Glorot for tanh/identity; zero biases."""
        if len(dims) != len(activations) + 1:
            raise ShapeError("need len(dims) == len(activations) + 1")
        weights, biases = [], []
        for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
            scale = np.sqrt(2.0 / d_in) if act == "relu" else np.sqrt(2.0 / (d_in + d_out))
            weights.append(rng.standard_normal((d_in, d_out)) * scale)
            biases.append(np.zeros(d_out))
        return cls(weights, biases, list(activations))

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, [W0, b0, W1, b1, ...]; arrays are shared, not copied."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[1]

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "activations": list(self.activations),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        dims = d["dims"]
        weights = [np.asarray(w, dtype=np.float64).reshape(dims[i], dims[i + 1])
                   for i, w in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(weights, biases, list(d["activations"]))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # x @ W + b per layer
    outputs: list[np.ndarray] = field(default_factory=list)  # post-activation per layer


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_backward(name: str, z: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[ForwardCache, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input dim {net.input_dim}")
    cache = ForwardCache()
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        cache.inputs.append(h)
        z = h @ w + b
        h = _act(act, z)
        cache.preacts.append(z)
        cache.outputs.append(h)
    return cache, h


def mlp_backward(net: Mlp, cache: ForwardCache, upstream: np.ndarray,
                 from_layer: int | None = None, want_params: bool = True):
    """Reverse pass for a scalar ``sum(upstream * output)``.

    ``from_layer`` selects which layer's post-activation output the upstream
    refers to (default: the last layer). Returns ``(param_grads, input_grad)``;
    param_grads is a list of (dW, db) for layers 0..from_layer, summed over the
    batch, or None when ``want_params`` is False.
    """
    last = len(net.weights) - 1 if from_layer is None else from_layer
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.outputs[last].shape:
        raise ShapeError(f"upstream shape {g.shape} != layer output {cache.outputs[last].shape}")
    grads = [None] * (last + 1) if want_params else None
    for i in range(last, -1, -1):
        g = _act_backward(net.activations[i], cache.preacts[i], cache.outputs[i], g)
        if want_params:
            grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        g = g @ net.weights[i].T
    return grads, g


def mlp_param_grad(net: Mlp, cache: ForwardCache, upstream: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    return mlp_backward(net, cache, upstream)[0]


def mlp_input_grad(net: Mlp, cache: ForwardCache, upstream: np.ndarray,
                   from_layer: int | None = None) -> np.ndarray:
    return mlp_backward(net, cache, upstream, from_layer=from_layer, want_params=False)[1]


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out += [dw, db]
    return out


# ---------------------------------------------------------------- optimizers

class SgdMomentum:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v (in place)."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.velocity) or len(grads) != len(params):
            raise ShapeError("parameter/gradient count mismatch")
        for p, g, v in zip(params, grads, self.velocity):
            if p.shape != g.shape or p.shape != v.shape:
                raise ShapeError(f"shape mismatch {p.shape} / {g.shape}")
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p
            p -= self.lr * v


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- io

def save_json(obj, path) -> None:
    """Write JSON atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n")
    tmp.replace(path)


def save_mlp(net: Mlp, path, extra: dict | None = None) -> None:
    d = net.to_dict()
    if extra:
        d.update(extra)
    save_json(d, path)


def load_mlp(path) -> Mlp:
    return Mlp.from_dict(json.loads(Path(path).read_text()))
