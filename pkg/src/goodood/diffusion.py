"""Conditional noise-prediction diffusion on 2-D points.

Linear beta schedule, q(x_t | x_0) noising, an MLP denoiser conditioned on a
sinusoidal time embedding and a learned class-embedding table (the last row is
the null token used for classifier-free guidance), and the DDIM reverse step.
Timesteps are 1-indexed, with alpha_bar(0) defined as 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import (Adam, Mlp, flatten_grads, mlp_backward, mlp_forward, save_json,
                      standard_normal)

log = logging.getLogger(__name__)

NULL = -1  # class id meaning "no condition"


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside 1..{self.T}")

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}


def make_schedule(T: int, beta_1: float, beta_T: float) -> NoiseSchedule:
    if T < 1 or not (0 < beta_1 <= beta_T < 1):
        raise ScheduleError("need T >= 1 and 0 < beta_1 <= beta_T < 1")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1]))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(t) == 0:
        ab = schedule.alpha_bar(int(t))
        if t == 0:
            raise ScheduleError("t must be >= 1")
    else:
        t = np.asarray(t)
        if t.min() < 1 or t.max() > schedule.T:
            raise ScheduleError("t out of range")
        ab = schedule.alpha_bars[t - 1][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_sigma(t: int, eta: float, schedule: NoiseSchedule) -> float:
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)


def ddim_step(x_t, x0_hat, eps_hat, t: int, eta: float, rng, schedule: NoiseSchedule) -> np.ndarray:
    """One DDIM reverse step from t to t-1.

    Noise is drawn from ``rng`` only when eta > 0, so eta = 0 consumes no
    randomness. ``eps_hat`` is accepted for interface symmetry; the direction
    term is recomputed from (x_t, x0_hat), which is identical when x0_hat came
    from predict_x0.
    """
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    sigma = ddim_sigma(t, eta, schedule)
    var_dir = 1.0 - ab_prev - sigma * sigma
    if var_dir < -1e-12:
        raise ScheduleError(f"sigma_t^2 exceeds 1 - abar_(t-1) at t={t}")
    direction = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(var_dir, 0.0)) * direction
    if eta > 0:
        out = out + sigma * standard_normal(rng, x_t.shape[0], x_t.shape[1])
    return out


# ---------------------------------------------------------------- denoiser

def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, [sin(t w_i), cos(t w_i)] with w_i = 10000^(-i/half)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class Denoiser:
    net: Mlp
    class_table: np.ndarray  # (num_classes + 1, class_dim); last row is the null token
    time_dim: int
    data_dim: int = 2

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0] - 1

    def class_index(self, c, n: int) -> np.ndarray:
        """Map class ids (NULL or None for the null token) to table rows."""
        if c is None:
            c = NULL
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if np.any((c < NULL) | (c >= self.num_classes)):
            raise ValueError(f"invalid class id; expected 0..{self.num_classes - 1} or NULL")
        return np.where(c == NULL, self.num_classes, c)

    def inputs(self, x, t, rows) -> np.ndarray:
        n = x.shape[0]
        temb = time_embedding(np.broadcast_to(t, (n,)), self.time_dim)
        return np.concatenate([x, temb, self.class_table[rows]], axis=1)

    def eps(self, x, t, c) -> np.ndarray:
        rows = self.class_index(c, x.shape[0])
        return mlp_forward(self.net, self.inputs(x, t, rows))[1]

    def forward_cached(self, x, t, c):
        """(cache, eps) so input VJPs can be taken later with ``input_vjp``."""
        rows = self.class_index(c, x.shape[0])
        return mlp_forward(self.net, self.inputs(x, t, rows))

    def input_vjp(self, cache, upstream) -> np.ndarray:
        """upstream^T d eps / d x_t (data columns only)."""
        g = mlp_backward(self.net, cache, upstream, want_params=False)[1]
        return g[:, :self.data_dim]

    def to_dict(self) -> dict:
        d = self.net.to_dict()
        d.update(class_table=self.class_table.tolist(), time_dim=self.time_dim,
                 data_dim=self.data_dim)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Denoiser":
        return cls(Mlp.from_dict(d), np.asarray(d["class_table"], dtype=np.float64),
                   int(d["time_dim"]), int(d.get("data_dim", 2)))


def save_denoiser(den: Denoiser, schedule: NoiseSchedule, path) -> None:
    d = den.to_dict()
    d["schedule"] = schedule.to_dict()
    save_json(d, path)


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule]:
    d = json.loads(Path(path).read_text())
    return Denoiser.from_dict(d), NoiseSchedule(np.asarray(d["schedule"]["betas"]))


def init_denoiser(num_classes: int, rng, hidden=(128, 128), time_dim: int = 16,
                  class_dim: int = 8, data_dim: int = 2) -> Denoiser:
    dims = [data_dim + time_dim + class_dim, *hidden, data_dim]
    net = Mlp.init(dims, ["tanh"] * len(hidden) + ["identity"], rng)
    table = 0.1 * rng.standard_normal((num_classes + 1, class_dim))
    return Denoiser(net, table, time_dim, data_dim)


def denoiser_loss_grads(den: Denoiser, x0, c, t, eps, schedule: NoiseSchedule):
    """Noise-prediction MSE (mean over batch and data dims) and its gradients.

    Gradients are returned as ``net.params() + [class_table]``.
    """
    b, d = x0.shape
    rows = den.class_index(c, b)
    xt = q_sample(x0, t, eps, schedule)
    cache, out = mlp_forward(den.net, den.inputs(xt, t, rows))
    diff = out - eps
    loss = float(np.sum(diff * diff) / (b * d))
    grads, gin = mlp_backward(den.net, cache, 2.0 * diff / (b * d))
    gtable = np.zeros_like(den.class_table)
    np.add.at(gtable, rows, gin[:, d + den.time_dim:])
    return loss, flatten_grads(grads) + [gtable]


def train_denoiser(points, labels, num_classes: int, schedule: NoiseSchedule, epochs: int,
                   batch: int, lr: float, cond_dropout: float, rng, hidden=(128, 128),
                   time_dim: int = 16, class_dim: int = 8, denoiser: Denoiser | None = None):
    """Fit eps_theta(x_t, c, t) by MSE against the injected noise.

    Each sample's class is replaced by the null token with probability
    ``cond_dropout``. Uses Adam; the class-embedding table is trained jointly.
    Returns (denoiser, per-epoch mean loss list).
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(points)
    if n == 0:
        raise ValueError("empty training data")
    den = denoiser or init_denoiser(num_classes, rng, hidden, time_dim, class_dim, points.shape[1])
    params = den.net.params() + [den.class_table]
    opt = Adam(params, lr=lr)
    d = den.data_dim
    losses = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            b = len(idx)
            x0 = points[idx]
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal((b, d))
            drop = rng.random(b) < cond_dropout
            c = np.where(drop, NULL, labels[idx])
            loss, grads = denoiser_loss_grads(den, x0, c, t, eps, schedule)
            opt.step(params, grads)
            total += loss * b
            count += b
        losses.append(total / count)
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"denoiser loss diverged at epoch {epoch}")
        log.debug("denoiser epoch %d loss %.5f", epoch, losses[-1])
    return den, losses


# ---------------------------------------------------------------- sampling

def cfg_epsilon(den: Denoiser, x_t, c, t: int, beta: float) -> np.ndarray:
    """(1 + beta) eps(x_t, c, t) - beta eps(x_t, null, t)."""
    rows = den.class_index(c, x_t.shape[0])
    eps_c = den.eps(x_t, t, c)
    if beta == 0.0 or np.all(rows == den.num_classes):
        return eps_c
    eps_null = den.eps(x_t, t, NULL)
    return (1.0 + beta) * eps_c - beta * eps_null


def sample(den: Denoiser, schedule: NoiseSchedule, c, beta: float, eta: float, n: int,
           rng) -> np.ndarray:
    """Unguided conditional DDIM sampling from x_T ~ N(0, I)."""
    x = standard_normal(rng, n, den.data_dim)
    for t in range(schedule.T, 0, -1):
        eps_hat = cfg_epsilon(den, x, c, t, beta)
        x0 = predict_x0(x, t, eps_hat, schedule)
        x = ddim_step(x, x0, eps_hat, t, eta, rng, schedule)
    return x
