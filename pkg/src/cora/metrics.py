"""Ranking metrics for binary relevance scores.

AUC uses the rank-sum (Mann-Whitney) form with average ranks, so tied scores
earn half credit. UAUC averages per-user AUC over users whose records contain
both classes; single-class users are skipped and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def auc(labels, scores) -> float:
    """Probability a random positive outranks a random negative (ties 0.5).

    Raises MetricError when either class is absent.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise MetricError(f"shape mismatch {labels.shape} vs {scores.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    # average rank within each tied run, 1-based
    j = 0
    while j < scores.size:
        k = j
        while k + 1 < scores.size and sorted_scores[k + 1] == sorted_scores[j]:
            k += 1
        ranks[order[j:k + 1]] = 0.5 * (j + k) + 1.0
        j = k + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class UaucResult:
    value: float
    n_users_used: int
    n_users_skipped: int


def uauc(user_ids, labels, scores) -> UaucResult:
    """Mean per-user AUC over users with both classes present."""
    user_ids = np.asarray(user_ids)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if not (user_ids.shape == labels.shape == scores.shape):
        raise MetricError("user_ids/labels/scores must align")
    per_user: dict = {}
    for u, y, s in zip(user_ids.tolist(), labels.tolist(), scores.tolist()):
        per_user.setdefault(u, ([], []))
        per_user[u][0].append(y)
        per_user[u][1].append(s)
    vals = []
    skipped = 0
    for u in per_user:
        ys, ss = per_user[u]
        if 0 < sum(ys) < len(ys):
            vals.append(auc(ys, ss))
        else:
            skipped += 1
    if not vals:
        raise MetricError("no user has both classes")
    return UaucResult(float(np.mean(vals)), len(vals), skipped)


@dataclass
class GroupMetrics:
    n: int
    auc: float | None
    uauc: float | None
    uauc_users_used: int = 0
    uauc_users_skipped: int = 0

    def to_dict(self) -> dict:
        return {"n": self.n, "auc": self.auc, "uauc": self.uauc,
                "uauc_users_used": self.uauc_users_used,
                "uauc_users_skipped": self.uauc_users_skipped}


@dataclass
class MetricsReport:
    overall: GroupMetrics
    warm: GroupMetrics | None = None
    cold: GroupMetrics | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def enc(g):
            return None if g is None else g.to_dict()
        return json.dumps({"overall": enc(self.overall), "warm": enc(self.warm),
                           "cold": enc(self.cold), **self.extra}, indent=2)


def _group(user_ids, labels, scores) -> GroupMetrics:
    n = len(labels)
    g = GroupMetrics(n=n, auc=None, uauc=None)
    if n == 0:
        return g
    try:
        g.auc = auc(labels, scores)
    except MetricError:
        pass
    try:
        r = uauc(user_ids, labels, scores)
        g.uauc, g.uauc_users_used, g.uauc_users_skipped = r.value, r.n_users_used, r.n_users_skipped
    except MetricError:
        pass
    return g


def evaluate(user_ids, labels, scores, warm_flags=None) -> MetricsReport:
    """Overall metrics, plus warm/cold slices when flags are given.

    A slice metric is None (absent from the report, not fabricated) when the
    slice is empty or single-class.
    """
    user_ids = np.asarray(user_ids)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    report = MetricsReport(overall=_group(user_ids, labels, scores))
    if warm_flags is not None:
        warm_flags = np.asarray(warm_flags, dtype=bool)
        if warm_flags.shape != labels.shape:
            raise MetricError("warm_flags must align with labels")
        report.warm = _group(user_ids[warm_flags], labels[warm_flags], scores[warm_flags])
        report.cold = _group(user_ids[~warm_flags], labels[~warm_flags], scores[~warm_flags])
    return report
