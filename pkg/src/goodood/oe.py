"""Outlier-exposure fine-tuning with a logistic energy loss.

A small MLP psi maps the free energy of each sample to a logit for "ID";
OOD samples are pushed toward psi < 0 and ID samples toward psi > 0. The
classifier and psi are updated jointly on CE + lambda * OOD loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .numcore import Mlp, SgdMomentum, flatten_grads, mlp_backward, mlp_forward
from .scores import Classifier, accuracy, cross_entropy_grad, energy_upstream, logsumexp

log = logging.getLogger(__name__)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_psi(rng, hidden: int = 16) -> Mlp:
    return Mlp.init([1, hidden, hidden, 1], ["relu", "relu", "identity"], rng)


def zero_psi(hidden: int = 16) -> Mlp:
    return Mlp([np.zeros((1, hidden)), np.zeros((hidden, hidden)), np.zeros((hidden, 1))],
               [np.zeros(hidden), np.zeros(hidden), np.zeros(1)], ["relu", "relu", "identity"])


def oe_loss(e_id, e_ood, psi: Mlp) -> float:
    """mean_ood softplus(psi(E)) + mean_id softplus(-psi(E))."""
    return oe_loss_grads(e_id, e_ood, psi)[0]


def oe_loss_grads(e_id, e_ood, psi: Mlp):
    """Loss, psi parameter grads, dL/dE_id, dL/dE_ood."""
    e_id = np.asarray(e_id, dtype=np.float64).reshape(-1, 1)
    e_ood = np.asarray(e_ood, dtype=np.float64).reshape(-1, 1)
    if len(e_id) == 0 or len(e_ood) == 0:
        raise ValueError("oe_loss needs non-empty ID and OOD batches")
    c_id, s_id = mlp_forward(psi, e_id)
    c_ood, s_ood = mlp_forward(psi, e_ood)
    loss = float(softplus(s_ood).mean() + softplus(-s_id).mean())
    up_ood = sigmoid(s_ood) / len(e_ood)
    up_id = -sigmoid(-s_id) / len(e_id)
    g_ood, de_ood = mlp_backward(psi, c_ood, up_ood)
    g_id, de_id = mlp_backward(psi, c_id, up_id)
    grads = [(a + c, b + d) for (a, b), (c, d) in zip(g_ood, g_id)]
    return loss, grads, de_id[:, 0], de_ood[:, 0]


def total_loss(ce: float, ood: float, lam: float) -> float:
    return ce + lam * ood


def cosine_lr(epoch: int, epochs: int, lr_init: float) -> float:
    """Cosine decay from lr_init at epoch 0 to 0 at the final epoch."""
    if epochs <= 1:
        return lr_init
    return 0.5 * lr_init * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


@dataclass
class OeTrainConfig:
    lam: float = 2.5
    lr: float = 1e-4
    epochs: int = 50
    batch_id: int = 128
    batch_ood: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float | None = None  # max global L2 norm of the joint gradient

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")


def joint_loss_grads(clf: Classifier, psi: Mlp, x_id, y_id, x_ood, lam: float):
    """CE + lam * OE loss on one batch, with gradients for classifier and psi.

    Returns (total, ce, ood, classifier grads, psi grads); gradients follow the
    ``params()`` order of each network.
    """
    cache_id, logit_id = mlp_forward(clf.net, x_id)
    cache_ood, logit_ood = mlp_forward(clf.net, x_ood)
    ce, g_logit_id = cross_entropy_grad(logit_id, y_id)
    e_id, e_ood = -logsumexp(logit_id), -logsumexp(logit_ood)
    ood, psi_grads, de_id, de_ood = oe_loss_grads(e_id, e_ood, psi)
    g_logit_id = g_logit_id + lam * de_id[:, None] * energy_upstream(logit_id)
    g_logit_ood = lam * de_ood[:, None] * energy_upstream(logit_ood)
    gi = mlp_backward(clf.net, cache_id, g_logit_id)[0]
    go = mlp_backward(clf.net, cache_ood, g_logit_ood)[0]
    clf_grads = [(a + c, b + d) for (a, b), (c, d) in zip(gi, go)]
    psi_grads = [(lam * a, lam * b) for a, b in psi_grads]
    return total_loss(ce, ood, lam), ce, ood, flatten_grads(clf_grads), flatten_grads(psi_grads)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def finetune(clf: Classifier, psi: Mlp, id_points, id_labels, ood_points, config: OeTrainConfig,
             rng, val=None):
    """Jointly fine-tune copies of (classifier, psi) with SGD-momentum and cosine lr.

    Each step takes an ID batch from a per-epoch permutation and an OOD batch
    drawn uniformly (with replacement) from the synthesized pool. Returns
    (classifier', psi', log rows with epoch, ce, ood_loss, val_acc, lr).
    """
    id_points = np.asarray(id_points, dtype=np.float64)
    id_labels = np.asarray(id_labels, dtype=np.int64)
    ood_points = np.asarray(ood_points, dtype=np.float64)
    if len(id_points) == 0 or len(ood_points) == 0:
        raise ValueError("finetune needs non-empty ID and OOD data")
    clf = Classifier(clf.net.copy(), clf.embed_layer)
    psi = psi.copy()
    params = clf.net.params() + psi.params()
    opt = SgdMomentum(params, config.lr, config.momentum, config.weight_decay)
    n = len(id_points)
    log_rows = []
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(epoch, config.epochs, config.lr)
        perm = rng.permutation(n)
        ce_sum = ood_sum = 0.0
        steps = 0
        for start in range(0, n, config.batch_id):
            idx = perm[start:start + config.batch_id]
            oidx = rng.integers(0, len(ood_points), size=config.batch_ood)
            _, ce, ood, g_clf, g_psi = joint_loss_grads(clf, psi, id_points[idx], id_labels[idx],
                                                        ood_points[oidx], config.lam)
            grads = g_clf + g_psi
            if config.grad_clip:
                clip_global_norm(grads, config.grad_clip)
            opt.step(params, grads)
            ce_sum += ce
            ood_sum += ood
            steps += 1
        if not (math.isfinite(ce_sum) and math.isfinite(ood_sum)):
            raise FloatingPointError(f"fine-tuning diverged at epoch {epoch}")
        row = {"epoch": epoch, "ce": ce_sum / steps, "ood_loss": ood_sum / steps,
               "val_acc": accuracy(clf, *val) if val is not None else float("nan"),
               "lr": opt.lr}
        log_rows.append(row)
        log.debug("finetune %s", row)
    return clf, psi, log_rows
