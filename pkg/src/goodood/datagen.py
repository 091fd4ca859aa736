"""Synthetic 2-D ring-of-Gaussians data: ID splits, OOD test sets, CSV I/O."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import make_rng, save_json

OOD_KINDS = ("between_modes", "far_ring", "held_out_classes")


class MalformedRowError(ValueError):
    pass


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite points")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, LabeledDataset)
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.labels, other.labels))


@dataclass
class OodTestSet:
    points: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite points")


def ring_centers(num_classes: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_gaussian_ring(seed: int, num_classes: int, n_per_class: int, radius: float,
                      sigma: float, split: str = "train") -> LabeledDataset:
    """Class c ~ N(R (cos 2πc/C, sin 2πc/C), σ² I), n_per_class points each."""
    if num_classes < 2 or sigma <= 0 or radius <= 0 or n_per_class < 0:
        raise ValueError("need num_classes >= 2, sigma > 0, radius > 0, n_per_class >= 0")
    rng = make_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.standard_normal((len(labels), 2))
    points = ring_centers(num_classes, radius)[labels] + sigma * noise
    meta = dict(seed=seed, num_classes=num_classes, n_per_class=n_per_class,
                radius=radius, sigma=sigma, split=split)
    return LabeledDataset(points, labels, split, meta)


def subset_classes(ds: LabeledDataset, classes, relabel: bool = True) -> LabeledDataset:
    classes = list(classes)
    keep = np.isin(ds.labels, classes)
    labels = ds.labels[keep]
    if relabel:
        lut = {c: i for i, c in enumerate(classes)}
        labels = np.array([lut[int(l)] for l in labels], dtype=np.int64)
    meta = dict(ds.meta, classes=classes)
    return LabeledDataset(ds.points[keep], labels, ds.split, meta)


def gen_ood_test(kind: str, seed: int, m: int, params: dict) -> OodTestSet:
    """OOD test points for one of ``OOD_KINDS``.

    params:
      num_classes, radius, sigma   ring geometry (all kinds)
      seen                         class ids on the ring that are in-distribution
                                   (default: all of them)
    between_modes draws Gaussians at the angular midpoints between consecutive
    seen centers; far_ring draws uniformly on the circle of radius 2R (plus
    ``ring_jitter`` radial noise, default 0); held_out_classes draws ring
    classes not in ``seen``.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown OOD kind {kind!r}; expected one of {OOD_KINDS}")
    C = int(params["num_classes"])
    R = float(params["radius"])
    sigma = float(params.get("sigma", 0.35))
    seen = sorted(int(c) for c in params.get("seen", range(C)))
    rng = make_rng(seed)
    meta = dict(kind=kind, seed=seed, m=m, **{k: v for k, v in params.items()})
    meta["seen"] = seen

    if kind == "far_ring":
        jitter = float(params.get("ring_jitter", 0.0))
        ang = rng.uniform(0.0, 2.0 * np.pi, m)
        r = 2.0 * R + jitter * rng.standard_normal(m)
        pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        return OodTestSet(pts, kind, meta)

    if kind == "between_modes":
        seen_set = set(seen)
        mids = [c + 0.5 for c in range(C) if c in seen_set and (c + 1) % C in seen_set]
        if not mids:
            raise ValueError("no pair of adjacent seen classes to place midpoints between")
        ang = 2.0 * np.pi * np.asarray(mids) / C
        centers = R * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        idx = np.arange(m) % len(centers)
        pts = centers[idx] + sigma * rng.standard_normal((m, 2))
        meta["centers"] = centers.tolist()
        return OodTestSet(pts, kind, meta)

    held = [c for c in range(C) if c not in set(seen)]
    if not held:
        raise ValueError("held_out_classes needs at least one unseen class")
    labels = np.asarray(held)[np.arange(m) % len(held)]
    pts = ring_centers(C, R)[labels] + sigma * rng.standard_normal((m, 2))
    meta["held_out"] = held
    meta["source_labels"] = labels.tolist()
    return OodTestSet(pts, kind, meta)


# ---------------------------------------------------------------- csv

def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(data, path, meta: bool = True) -> None:
    """x1,x2,label (LabeledDataset) or x1,x2 (OodTestSet / plain array).

    Floats are written with repr, which round-trips doubles exactly. Metadata,
    when present, goes to a sibling ``<name>.json``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(data, LabeledDataset):
        w.writerow(["x1", "x2", "label"])
        for (a, b), l in zip(data.points, data.labels):
            w.writerow([_fmt(a), _fmt(b), int(l)])
    else:
        pts = data.points if isinstance(data, OodTestSet) else np.asarray(data)
        w.writerow(["x1", "x2"])
        for a, b in pts:
            w.writerow([_fmt(a), _fmt(b)])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)
    if meta and getattr(data, "meta", None):
        save_json(data.meta, path.with_suffix(".json"))


def _parse_rows(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRowError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, header, row


def load_csv(path, split: str = "train") -> LabeledDataset:
    path = Path(path)
    pts, labels = [], []
    for lineno, _, row in _parse_rows(path):
        if len(row) != 3:
            raise MalformedRowError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
        try:
            pts.append((float(row[0]), float(row[1])))
            labels.append(int(row[2]))
        except ValueError as e:
            raise MalformedRowError(f"{path}: line {lineno}: {e}") from None
    meta = _load_meta(path)
    return LabeledDataset(np.array(pts).reshape(-1, 2), np.array(labels, dtype=np.int64),
                          meta.get("split", split), meta)


def load_points(path) -> np.ndarray:
    """Read the x1,x2 columns of any dataset CSV (extra columns ignored)."""
    path = Path(path)
    pts = []
    for lineno, _, row in _parse_rows(path):
        if len(row) < 2:
            raise MalformedRowError(f"{path}: line {lineno}: expected at least 2 fields")
        try:
            pts.append((float(row[0]), float(row[1])))
        except ValueError as e:
            raise MalformedRowError(f"{path}: line {lineno}: {e}") from None
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _load_meta(path: Path) -> dict:
    mp = path.with_suffix(".json")
    return json.loads(mp.read_text()) if mp.exists() else {}
