"""Differentiable OOD scores on a classifier: free energy and k-NN distance
in normalized embedding space, each with its exact input gradient."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import (Adam, Mlp, flatten_grads, mlp_backward, mlp_forward, save_json)

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


class DegenerateFeatureError(ValueError):
    pass


class UndefinedGradientError(ValueError):
    pass


@dataclass
class Classifier:
    """An Mlp whose ``embed_layer`` output is the feature embedding and whose
    final affine layer produces the logits."""

    net: Mlp
    embed_layer: int = -2

    def __post_init__(self):
        if self.embed_layer < 0:
            self.embed_layer += len(self.net.weights)

    @property
    def num_classes(self) -> int:
        return self.net.output_dim

    def forward(self, x):
        """(cache, logits, embeddings) from one forward pass."""
        cache, logits = mlp_forward(self.net, x)
        return cache, logits, cache.outputs[self.embed_layer]

    def logits(self, x) -> np.ndarray:
        return mlp_forward(self.net, x)[1]

    def to_dict(self) -> dict:
        d = self.net.to_dict()
        d["embed_layer"] = self.embed_layer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        return cls(Mlp.from_dict(d), int(d.get("embed_layer", -2)))


def save_classifier(clf: Classifier, path) -> None:
    save_json(clf.to_dict(), path)


def load_classifier(path) -> Classifier:
    return Classifier.from_dict(json.loads(Path(path).read_text()))


def init_classifier(num_classes: int, rng, hidden: int = 64, embed: int = 16,
                    in_dim: int = 2) -> Classifier:
    # embedding layer is linear so its norm never collapses to exactly zero
    net = Mlp.init([in_dim, hidden, hidden, embed, num_classes],
                   ["relu", "relu", "identity", "identity"], rng)
    return Classifier(net, embed_layer=2)


# ---------------------------------------------------------------- energy

def logsumexp(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def energy(logits) -> np.ndarray | float:
    """E = -log sum_k exp(f_k). Works on one logit vector or a batch (rows)."""
    out = -logsumexp(logits)
    return float(out) if np.ndim(out) == 0 else out


def energy_upstream(logits: np.ndarray) -> np.ndarray:
    """dE/dlogits = -softmax(logits); each row sums to -1."""
    return -softmax(logits)


def grad_energy_wrt_input(clf: Classifier, x):
    """Per-sample energy and its gradient with respect to the input."""
    cache, logits, _ = clf.forward(x)
    g = mlp_backward(clf.net, cache, energy_upstream(logits), want_params=False)[1]
    return -logsumexp(logits), g


# ---------------------------------------------------------------- k-NN

def _normalize(f: np.ndarray):
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms < ZERO_NORM):
        raise DegenerateFeatureError("embedding with (near-)zero norm")
    return f / norms[:, None], norms


@dataclass
class EmbeddingBank:
    vectors: np.ndarray  # (n, e), unit rows
    k: int

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.vectors)
        if not 1 <= self.k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={n}")
        if not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("bank rows must be unit norm")
        self._sq = np.einsum("ij,ij->i", self.vectors, self.vectors)

    def to_dict(self) -> dict:
        return {"k": self.k, "vectors": self.vectors.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingBank":
        return cls(np.asarray(d["vectors"], dtype=np.float64), int(d["k"]))

    def kth_neighbor(self, z: np.ndarray):
        """Distances to and rows of the k-th nearest bank vector for each z."""
        sq = (np.einsum("ij,ij->i", z, z)[:, None] + self._sq[None, :]
              - 2.0 * z @ self.vectors.T)
        idx = np.argpartition(sq, self.k - 1, axis=1)[:, self.k - 1]
        nb = self.vectors[idx]
        # exact distance to the selected row, not the expanded-square estimate
        return np.linalg.norm(z - nb, axis=1), nb


def save_bank(bank: EmbeddingBank, path) -> None:
    save_json(bank.to_dict(), path)


def load_bank(path) -> EmbeddingBank:
    return EmbeddingBank.from_dict(json.loads(Path(path).read_text()))


def embed(clf: Classifier, x) -> np.ndarray:
    return _normalize(clf.forward(x)[2])[0]


def build_bank(clf: Classifier, id_points, k: int) -> EmbeddingBank:
    return EmbeddingBank(embed(clf, id_points), k)


def knn_distance(bank: EmbeddingBank, clf: Classifier, x) -> np.ndarray:
    return bank.kth_neighbor(embed(clf, x))[0]


def grad_knn_wrt_input(clf: Classifier, bank: EmbeddingBank, x, min_dist: float = 1e-9):
    """Per-sample D_k and dD_k/dx, with the neighbor held fixed.

    dD/df = (I - z z^T)(z - z_k) / (D ||f||), pushed back through the network
    from the embedding layer.
    """
    cache, _, f = clf.forward(x)
    z, norms = _normalize(f)
    d, nb = bank.kth_neighbor(z)
    if np.any(d <= min_dist):
        raise UndefinedGradientError("k-NN distance is zero; gradient undefined")
    r = (z - nb) / d[:, None]
    up = (r - z * np.sum(z * r, axis=1, keepdims=True)) / norms[:, None]
    g = mlp_backward(clf.net, cache, up, from_layer=clf.embed_layer, want_params=False)[1]
    return d, g


def score_and_grad(kind: str, clf: Classifier, x, bank: EmbeddingBank | None = None,
                   feat_scale: float = 1.0):
    """Guidance target value and input gradient: energy, or feat_scale * D_k."""
    if kind == "image_energy":
        return grad_energy_wrt_input(clf, x)
    if kind == "feature_knn":
        if bank is None:
            raise ValueError("feature_knn target needs an embedding bank")
        d, g = grad_knn_wrt_input(clf, bank, x)
        return feat_scale * d, feat_scale * g
    raise ValueError(f"unknown score kind {kind!r}")


# ---------------------------------------------------------------- training

def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits (already divided by batch)."""
    n = len(labels)
    lse = logsumexp(logits)
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def train_classifier(points, labels, num_classes: int, rng, epochs: int = 100, batch: int = 128,
                     lr: float = 1e-3, hidden: int = 64, embed_dim: int = 16, val=None):
    """Cross-entropy training with Adam. Returns (classifier, log rows).

    Log rows are dicts with epoch, loss and (if ``val`` = (points, labels) is
    given) val_acc.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(points)
    if n == 0:
        raise ValueError("empty training data")
    clf = init_classifier(num_classes, rng, hidden, embed_dim, points.shape[1])
    params = clf.net.params()
    opt = Adam(params, lr=lr)
    rows = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            cache, logits = mlp_forward(clf.net, points[idx])
            loss, g = cross_entropy_grad(logits, labels[idx])
            grads = mlp_backward(clf.net, cache, g)[0]
            opt.step(params, flatten_grads(grads))
            total += loss * len(idx)
        row = {"epoch": epoch, "loss": total / n}
        if val is not None:
            row["val_acc"] = accuracy(clf, *val)
        rows.append(row)
    return clf, rows


def accuracy(clf: Classifier, points, labels) -> float:
    pred = np.argmax(clf.logits(points), axis=1)  # argmax ties -> lowest index
    return float(np.mean(pred == np.asarray(labels)))
