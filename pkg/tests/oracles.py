"""Independent reference implementations of the detection metrics."""

import math


def fpr95_brute(id_scores, ood_scores):
    ids = sorted(id_scores)
    n = len(ids)
    # smallest ID score with at least 95% of ID scores <= it
    for tau in ids:
        if sum(1 for s in ids if s <= tau) >= 0.95 * n - 1e-9:
            break
    return sum(1 for s in ood_scores if s <= tau) / len(ood_scores)


def auroc_pairs(id_scores, ood_scores):
    total = 0.0
    for o in ood_scores:
        for i in id_scores:
            total += 1.0 if o > i else 0.5 if o == i else 0.0
    return total / (len(id_scores) * len(ood_scores))


def auroc_trapezoid(id_scores, ood_scores):
    """Area under the ROC traced by sweeping the threshold over all distinct scores."""
    thresholds = sorted(set(id_scores) | set(ood_scores), reverse=True)
    pts = [(0.0, 0.0)]
    for t in thresholds:
        tpr = sum(1 for s in ood_scores if s >= t) / len(ood_scores)
        fpr = sum(1 for s in id_scores if s >= t) / len(id_scores)
        pts.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def kl_two_bin(p_counts, q_counts, eps):
    p = [(c + eps) for c in p_counts]
    q = [(c + eps) for c in q_counts]
    sp, sq = sum(p), sum(q)
    return sum((a / sp) * math.log((a / sp) / (b / sq)) for a, b in zip(p, q))
