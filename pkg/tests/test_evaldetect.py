import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goodood.evaldetect import (ScoreReport, auroc, fpr_at_95_tpr, id_accuracy, kl_hist,
                                minmax_normalize, unified_score, unified_weight)
from goodood.numcore import Mlp, make_rng
from goodood.scores import Classifier

from oracles import auroc_pairs, auroc_trapezoid, fpr95_brute, kl_two_bin


def test_minmax_examples():
    out, deg = minmax_normalize([0, 5, 10], 0, 10)
    assert out.tolist() == [0, 0.5, 1] and not deg
    assert minmax_normalize([-3.0, 12.0], 0, 10)[0].tolist() == [0.0, 1.0]
    out, deg = minmax_normalize([1.0, 1.0], 1.0, 1.0)
    assert deg and out.tolist() == [0.5, 0.5]


def test_minmax_affine_invariance(rng):
    s = rng.standard_normal(20)
    a, b = 3.5, -2.0
    n1, _ = minmax_normalize(s, s.min(), s.max())
    n2, _ = minmax_normalize(a * s + b, a * s.min() + b, a * s.max() + b)
    assert np.allclose(n1, n2, atol=1e-14)


def test_kl_examples(rng):
    s = rng.standard_normal(300)
    assert kl_hist(s, s.copy()) <= 1e-9
    a, b = np.zeros(1000), np.ones(1000)
    kl = kl_hist(a, b, bins=2, eps=1e-6)
    assert kl > 5
    assert kl == pytest.approx(kl_two_bin([1000, 0], [0, 1000], 1e-6), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30),
       st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_kl_nonnegative(a, b):
    assert kl_hist(a, b) >= 0


def test_unified_weight():
    assert unified_weight(0.0, 1.0) == 0.0
    assert unified_weight(math.log(2), 1.0) == pytest.approx(0.5, abs=1e-15)
    ws = [unified_weight(k, 1.0) for k in (0.1, 0.5, 2.0)]
    assert ws == sorted(ws)
    assert unified_weight(1.0, 0.5) < unified_weight(1.0, 2.0)
    with pytest.raises(ValueError):
        unified_weight(-1.0, 1.0)


def test_unified_score_examples(rng):
    d, e = rng.random(10), rng.random(10)
    assert np.array_equal(unified_score(d, e, 0.0), e)
    assert np.array_equal(unified_score(d, e, 1.0), d)
    assert unified_score(np.array([0.2]), np.array([0.8]), 0.5)[0] == pytest.approx(0.5, abs=1e-15)


def test_fpr95_examples():
    ids = np.arange(1, 101, dtype=float)
    assert fpr_at_95_tpr(ids, [50, 96, 200]) == pytest.approx(1 / 3, abs=1e-15)
    assert fpr_at_95_tpr(ids, [101, 500]) == 0.0
    assert abs(fpr_at_95_tpr(ids, ids) - 0.95) <= 1 / 100


def test_auroc_examples():
    assert auroc([0, 1, 2], [3, 4]) == 1.0
    assert auroc([1, 2, 3], [1, 2, 3]) == 0.5
    with pytest.raises(ValueError):
        auroc([], [1.0])
    with pytest.raises(ValueError):
        fpr_at_95_tpr([1.0], [])


def test_metric_oracles_random_instances():
    rng = make_rng(77)
    for _ in range(200):
        n, m = rng.integers(1, 25, size=2)
        a = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))  # rounding forces ties
        b = np.round(rng.standard_normal(m) + rng.random(), int(rng.integers(0, 3)))
        assert abs(fpr_at_95_tpr(a, b) - fpr95_brute(a, b)) <= 1e-12
        ref = auroc_pairs(a, b)
        assert abs(auroc(a, b) - ref) <= 1e-12
        assert abs(auroc_trapezoid(a, b) - ref) <= 1e-12


def test_auroc_monotone_transform_invariance(rng):
    a, b = rng.standard_normal(40), rng.standard_normal(30) + 0.5
    assert auroc(a, b) == auroc(np.exp(2 * a) + 1, np.exp(2 * b) + 1)


def test_fpr_nonincreasing_under_ood_shift(rng):
    a, b = rng.standard_normal(60), rng.standard_normal(40)
    vals = [fpr_at_95_tpr(a, b + c) for c in (0.0, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals, reverse=True)


def test_id_accuracy():
    eye = Classifier(Mlp([np.eye(3), np.eye(3)], [np.zeros(3)] * 2, ["identity"] * 2), 0)
    labels = np.array([0, 1, 2, 1])
    assert id_accuracy(eye, np.eye(3)[labels] * 5, labels) == 1.0
    const = Classifier(Mlp([np.zeros((2, 4)), np.zeros((4, 8))], [np.zeros(4), np.zeros(8)],
                           ["relu", "identity"]), 0)
    labels = np.repeat(np.arange(8), 5)
    assert id_accuracy(const, np.ones((40, 2)), labels) == pytest.approx(1 / 8)


def test_id_accuracy_matches_loop(rng):
    net = Mlp.init([2, 5, 4], ["relu", "identity"], rng)
    clf = Classifier(net, 0)
    x, y = rng.standard_normal((50, 2)), rng.integers(0, 4, 50)
    loop = 0
    for xi, yi in zip(x, y):
        logits = clf.logits(xi[None])[0]
        best = max(range(4), key=lambda k: (logits[k], -k))
        loop += best == yi
    assert id_accuracy(clf, x, y) == loop / 50


def _report(rng, a=1.0):
    return ScoreReport("far_ring", "pretrained", rng.standard_normal(100), rng.random(100) * 0.2,
                       rng.standard_normal(80) + 1, rng.random(80) * 0.3 + 0.1, 0.97, a=a)


def test_report_a_zero_is_energy_only(rng):
    rep = _report(rng, a=0.0)
    assert rep.w == 0.0
    assert rep.metrics("unified") == rep.metrics("energy")


def test_report_unified_in_convex_hull(rng):
    rep = _report(rng)
    e = np.concatenate([rep.id_energy, rep.ood_energy])
    k = np.concatenate([rep.id_knn, rep.ood_knn])
    en = (e - e.min()) / (e.max() - e.min())
    kn = (k - k.min()) / (k.max() - k.min())
    lo, hi = np.minimum(en, kn), np.maximum(en, kn)
    assert np.all(rep.unified >= lo - 1e-15) and np.all(rep.unified <= hi + 1e-15)


def test_energy_shift_coherence(rng):
    from goodood.scores import energy
    logits_id, logits_ood = rng.standard_normal((30, 4)) * 3, rng.standard_normal((20, 4)) * 3
    base = auroc(energy(logits_id), energy(logits_ood)), fpr_at_95_tpr(energy(logits_id), energy(logits_ood))
    shifted = (auroc(energy(logits_id + 7.25), energy(logits_ood + 7.25)),
               fpr_at_95_tpr(energy(logits_id + 7.25), energy(logits_ood + 7.25)))
    assert base == shifted


def test_report_files(tmp_path, rng):
    import json
    rep = _report(rng)
    rep.write(tmp_path)
    lines = (tmp_path / "far_ring.csv").read_text().splitlines()
    assert lines[0] == "sample_id,source,energy,knn,unified" and len(lines) == 181
    summary = json.loads((tmp_path / "far_ring.json").read_text())
    assert set(summary["scores"]) == {"energy", "knn", "unified"}
    hist = json.loads((tmp_path / "far_ring_hist.json").read_text())
    assert abs(sum(hist["knn"]["id_mass"]) - 1) < 1e-12
