"""Training-free guidance of the reverse diffusion toward OOD regions.

Each reverse step computes the CFG noise estimate and the Tweedie clean
estimate x0, then evaluates a Gaussian-smoothed OOD score at x0 (free energy
or scaled k-NN distance). Its gradient is applied twice:

* variance guidance: rho_t * d score(x0(x_t)) / d x_t, chained through the
  Tweedie map and the denoiser's input Jacobian, added as delta_t / sqrt(alpha_t);
* mean guidance: mu_t * d score / d x0 (optionally iterated), added as
  sqrt(abar_(t-1)) * delta_0.

Both push the sample uphill on the score, i.e. away from the ID data.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import (NULL, Denoiser, NoiseSchedule, ddim_step, predict_x0)
from .numcore import standard_normal
from .scores import Classifier, EmbeddingBank, energy, knn_distance, score_and_grad

log = logging.getLogger(__name__)

TARGETS = ("image_energy", "feature_knn")

IMAGE_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
FEATURE_GRID = (0.2, 0.4, 1.0, 1.5, 2.0, 3.0, 4.0)


@dataclass
class GuidanceConfig:
    target: str = "image_energy"
    rho_bar: float = 1.0
    mu_bar: float = 1.0
    gamma_bar: float = 0.1
    n_smooth: int = 4
    n_recur: int = 1
    n_iter: int = 1
    feat_scale: float = 100.0
    cfg_beta: float = 0.0
    eta: float = 1.0
    condition: int | list[int] | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if min(self.rho_bar, self.mu_bar, self.gamma_bar) < 0:
            raise ValueError("guidance strengths must be non-negative")
        if min(self.n_smooth, self.n_recur, self.n_iter) < 1:
            raise ValueError("n_smooth, n_recur and n_iter must be >= 1")

    @property
    def guided(self) -> bool:
        return self.rho_bar > 0 or self.mu_bar > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GuidedBatchResult:
    samples: np.ndarray
    energy: np.ndarray
    knn: np.ndarray | None
    config: GuidanceConfig
    seed: int | None = None
    n_requested: int = 0
    aborted: list[dict] = field(default_factory=list)

    @property
    def n_aborted(self) -> int:
        return len(self.aborted)


def time_coeff(t: int, schedule: NoiseSchedule, base: float) -> float:
    """base * alpha_t / sum_s alpha_s; sums to ``base`` over t = 1..T."""
    return base * schedule.alpha(t) / float(np.sum(schedule.alphas))


def smoothed_score_grad(kind: str, x, t: int, gamma_bar: float, n_smooth: int, rng,
                        clf: Classifier, bank: EmbeddingBank | None = None,
                        schedule: NoiseSchedule | None = None, feat_scale: float = 1.0):
    """Monte-Carlo Gaussian smoothing of a score and its input gradient.

    Averages over x + gamma_bar * sqrt(1 - abar_t) * delta_j, j = 1..n_smooth.
    With gamma_bar = 0 no randomness is consumed and the plain score is used.
    Returns (value, grad) per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if gamma_bar == 0.0:
        return score_and_grad(kind, clf, x, bank, feat_scale)
    scale = gamma_bar * np.sqrt(1.0 - schedule.alpha_bar(t)) if schedule is not None else gamma_bar
    delta = standard_normal(rng, n, d * n_smooth).reshape(n, n_smooth, d)
    xp = (x[:, None, :] + scale * delta).reshape(n * n_smooth, d)
    val, grad = score_and_grad(kind, clf, xp, bank, feat_scale)
    return val.reshape(n, n_smooth).mean(axis=1), grad.reshape(n, n_smooth, d).mean(axis=1)


def _cfg_forward(den: Denoiser, x, c, t, beta):
    rows = den.class_index(c, x.shape[0])
    cache_c, eps_c = den.forward_cached(x, t, c)
    if beta == 0.0 or np.all(rows == den.num_classes):
        return eps_c, [(1.0, cache_c)]
    cache_0, eps_0 = den.forward_cached(x, t, NULL)
    return (1.0 + beta) * eps_c - beta * eps_0, [(1.0 + beta, cache_c), (-beta, cache_0)]


def _tweedie_vjp(den: Denoiser, caches, g, t, schedule):
    """g^T d x0 / d x_t for x0 = (x_t - sqrt(1 - abar) eps_hat(x_t)) / sqrt(abar)."""
    ab = schedule.alpha_bar(t)
    eps_vjp = sum(w * den.input_vjp(cache, g) for w, cache in caches)
    return (g - np.sqrt(1.0 - ab) * eps_vjp) / np.sqrt(ab)


def guided_sample(den: Denoiser, schedule: NoiseSchedule, clf: Classifier,
                  bank: EmbeddingBank | None, config: GuidanceConfig, n: int, rng,
                  seed: int | None = None) -> GuidedBatchResult:
    """Guided DDIM sampling of ``n`` chains.

    ``rng`` is a Generator or a list of n per-chain Generators. Chains that go
    non-finite are frozen at zero, reported in ``aborted`` and dropped from the
    output; the random stream consumption of the remaining chains is unchanged.
    """
    cfg = config
    if cfg.target == "feature_knn" and bank is None:
        raise ValueError("feature_knn guidance needs an embedding bank")
    d = den.data_dim
    c = NULL if cfg.condition is None else cfg.condition
    alive = np.ones(n, dtype=bool)
    aborted = []

    x = standard_normal(rng, n, d)
    for t in range(schedule.T, 0, -1):
        rho_t = time_coeff(t, schedule, cfg.rho_bar)
        mu_t = time_coeff(t, schedule, cfg.mu_bar)
        a_t = schedule.alpha(t)
        for r in range(cfg.n_recur):
            eps_hat, caches = _cfg_forward(den, x, c, t, cfg.cfg_beta)
            x0 = predict_x0(x, t, eps_hat, schedule)
            x_prev = ddim_step(x, x0, eps_hat, t, cfg.eta, rng, schedule)
            if cfg.guided:
                with np.errstate(all="ignore"):
                    _, g = smoothed_score_grad(cfg.target, x0, t, cfg.gamma_bar, cfg.n_smooth,
                                               rng, clf, bank, schedule, cfg.feat_scale)
                    delta_0 = mu_t * g
                    for _ in range(cfg.n_iter - 1):
                        _, g_i = smoothed_score_grad(cfg.target, x0 + delta_0, t, cfg.gamma_bar,
                                                     cfg.n_smooth, rng, clf, bank, schedule,
                                                     cfg.feat_scale)
                        delta_0 = delta_0 + mu_t * g_i
                    delta_t = (rho_t * _tweedie_vjp(den, caches, g, t, schedule)
                               if rho_t > 0 else 0.0)
                    x_prev = x_prev + delta_t / np.sqrt(a_t) + np.sqrt(schedule.alpha_bar(t - 1)) * delta_0
            if r < cfg.n_recur - 1:
                x = np.sqrt(a_t) * x_prev + np.sqrt(1.0 - a_t) * standard_normal(rng, n, d)
            else:
                x = x_prev
            bad = alive & ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                for i in np.flatnonzero(bad):
                    aborted.append({"chain": int(i), "t": t, "seed": seed})
                    log.warning("guided chain %d went non-finite at t=%d (seed=%s, config=%s)",
                                i, t, seed, cfg.to_dict())
                alive &= ~bad
            if not alive.all():
                x[~alive] = 0.0

    samples = x[alive]
    en, kn = final_scores(clf, bank, samples)
    return GuidedBatchResult(samples, en, kn, cfg, seed, n, aborted)


def final_scores(clf: Classifier, bank: EmbeddingBank | None, x):
    if len(x) == 0:
        return np.zeros(0), (np.zeros(0) if bank is not None else None)
    en = energy(clf.logits(x))
    kn = knn_distance(bank, clf, x) if bank is not None else None
    return np.atleast_1d(en), kn


def balanced_grid(target: str, values, per_config_n: int, classes, base: GuidanceConfig | None = None):
    """Plan of (config, class, count) triples.

    image_energy uses the full Cartesian product rho_bar x mu_bar over
    ``values``; feature_knn uses the diagonal rho_bar = mu_bar.
    """
    values = list(values)
    if not values:
        raise ValueError("empty value grid")
    base = base or GuidanceConfig(target=target)
    if target == "image_energy":
        pairs = [(r, m) for r in values for m in values]
    elif target == "feature_knn":
        pairs = [(v, v) for v in values]
    else:
        raise ValueError(f"unknown target {target!r}")
    plan = []
    for rho, mu in pairs:
        cfg = replace(base, target=target, rho_bar=float(rho), mu_bar=float(mu))
        for c in classes:
            plan.append((replace(cfg, condition=int(c)), int(c), int(per_config_n)))
    return plan


def grid_configs(plan) -> list[GuidanceConfig]:
    """Distinct (rho_bar, mu_bar) configs of a plan, in plan order, condition cleared."""
    seen, out = set(), []
    for cfg, _, _ in plan:
        key = (cfg.rho_bar, cfg.mu_bar)
        if key not in seen:
            seen.add(key)
            out.append(replace(cfg, condition=None))
    return out
