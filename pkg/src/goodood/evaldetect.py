"""Detection metrics and the KL-weighted unified score.

Orientation everywhere: higher score = more OOD.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .numcore import save_json
from .scores import Classifier

log = logging.getLogger(__name__)


def minmax_normalize(scores, ref_min: float, ref_max: float):
    """Map to [0, 1] against reference bounds, clipping outside values.

    Returns (normalized, degenerate). A degenerate range (ref_max <= ref_min)
    yields all 0.5 with ``degenerate`` set.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not ref_max > ref_min:
        log.warning("degenerate normalization range [%r, %r]", ref_min, ref_max)
        return np.full(s.shape, 0.5), True
    return np.clip((s - ref_min) / (ref_max - ref_min), 0.0, 1.0), False


def kl_hist(test_scores, id_scores, bins: int = 50, eps: float = 1e-6) -> float:
    """KL(q_test || q_id) from smoothed histograms on the shared [min, max] range."""
    a = np.asarray(test_scores, dtype=np.float64)
    b = np.asarray(id_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("kl_hist needs non-empty inputs")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    p, _ = np.histogram(a, bins=bins, range=(lo, hi))
    q, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def unified_weight(kl: float, a: float) -> float:
    if kl < 0 or a < 0:
        raise ValueError("kl and a must be non-negative")
    return 1.0 - math.exp(-a * kl)


def unified_score(knn_norm, energy_norm, w: float):
    return w * np.asarray(knn_norm) + (1.0 - w) * np.asarray(energy_norm)


def _check_pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty score array")
    return a, b


def fpr_at_95_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or below the nearest-rank 95th percentile of ID."""
    a, b = _check_pair(id_scores, ood_scores)
    rank = math.ceil(tpr * a.size)
    tau = np.sort(a)[max(rank, 1) - 1]
    return float(np.mean(b <= tau))


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + 0.5 P(ood == id), via average ranks (Mann-Whitney U)."""
    a, b = _check_pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def id_accuracy(clf: Classifier, points, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty validation set")
    pred = np.argmax(clf.logits(points), axis=1)
    return float(np.mean(pred == labels))


# ---------------------------------------------------------------- reports

@dataclass
class ScoreReport:
    test_set: str
    model: str
    id_energy: np.ndarray
    id_knn: np.ndarray
    ood_energy: np.ndarray
    ood_knn: np.ndarray
    id_acc: float
    a: float = 1.0
    bins: int = 50
    eps: float = 1e-6
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kl = kl_hist(self.ood_knn, self.id_knn, self.bins, self.eps)
        self.w = unified_weight(self.kl, self.a)
        e_all = np.concatenate([self.id_energy, self.ood_energy])
        k_all = np.concatenate([self.id_knn, self.ood_knn])
        e_norm, deg_e = minmax_normalize(e_all, e_all.min(), e_all.max())
        k_norm, deg_k = minmax_normalize(k_all, k_all.min(), k_all.max())
        self.degenerate = deg_e or deg_k
        self.unified = unified_score(k_norm, e_norm, self.w)
        n = len(self.id_energy)
        self.id_unified, self.ood_unified = self.unified[:n], self.unified[n:]
        self.summary = {"test_set": self.test_set, "model": self.model, "kl": self.kl,
                        "w": self.w, "a": self.a, "id_acc": self.id_acc,
                        "n_id": int(n), "n_ood": int(len(self.ood_energy)),
                        "degenerate_normalization": bool(self.degenerate), "scores": {}}
        for name in ("energy", "knn", "unified"):
            i, o = self.scores(name)
            self.summary["scores"][name] = {"fpr95": fpr_at_95_tpr(i, o), "auroc": auroc(i, o)}

    def scores(self, name: str):
        if name == "energy":
            return self.id_energy, self.ood_energy
        if name == "knn":
            return self.id_knn, self.ood_knn
        if name == "unified":
            return self.id_unified, self.ood_unified
        raise ValueError(f"unknown score {name!r}")

    def metrics(self, name: str) -> dict:
        return self.summary["scores"][name]

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "source", "energy", "knn", "unified"])
        n = len(self.id_energy)
        for i in range(n):
            w.writerow([i, "id_val", repr(float(self.id_energy[i])), repr(float(self.id_knn[i])),
                        repr(float(self.id_unified[i]))])
        for j in range(len(self.ood_energy)):
            w.writerow([n + j, "ood_test", repr(float(self.ood_energy[j])),
                        repr(float(self.ood_knn[j])), repr(float(self.ood_unified[j]))])
        return buf.getvalue()

    def histograms(self, bins: int = 50) -> dict:
        """Bin edges and masses for ID vs OOD, per score, on a shared range."""
        out = {}
        for name in ("energy", "knn", "unified"):
            i, o = self.scores(name)
            lo, hi = float(min(i.min(), o.min())), float(max(i.max(), o.max()))
            if hi <= lo:
                hi = lo + 1.0
            hi_, edges = np.histogram(i, bins=bins, range=(lo, hi))
            ho_, _ = np.histogram(o, bins=bins, range=(lo, hi))
            out[name] = {"edges": edges.tolist(), "id_mass": (hi_ / hi_.sum()).tolist(),
                         "ood_mass": (ho_ / ho_.sum()).tolist()}
        return out

    def write(self, directory, stem: str | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = stem or self.test_set
        tmp = d / f"{stem}.csv.tmp"
        tmp.write_text(self.per_sample_csv())
        tmp.replace(d / f"{stem}.csv")
        save_json(self.summary, d / f"{stem}.json")
        save_json(self.histograms(), d / f"{stem}_hist.json")
