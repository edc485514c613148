"""Evaluation metrics: AUC, accuracy, mastery spread (MND), ordering
agreement (DOA).

MND is the mean squared distance between mastery rows over all ordered
student pairs, scaled by the concept count; it measures how far apart a
model places different students.  DOA checks, per concept, whether a
student with higher diagnosed mastery beats a student with lower
mastery on the exercises covering that concept more often than not.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError


def _scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    if labels.size == 0:
        raise UndefinedMetricError("no predictions to score")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Rank-based AUC; tied scores count half.

    Equivalent to the Mann-Whitney statistic: average ranks of the
    positive class, shifted and scaled into [0, 1].
    """
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    rank_positions = np.arange(1, labels.size + 1, dtype=np.float64)
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = rank_positions[i : j + 1].mean()
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of predictions on the right side of the threshold."""
    scores, labels = _scores_labels(scores, labels)
    return float(((scores >= threshold).astype(np.int64) == labels).mean())


def mnd(mastery: np.ndarray) -> float:
    """Mean squared mastery distance over ordered student pairs, per concept.

    (1/N) * (1/(N-1)) * sum_{u != v} ||mas_u - mas_v||^2 / Z, computed
    through the identity sum_{u,v} ||x_u - x_v||^2 =
    2N * sum_u ||x_u||^2 - 2 ||sum_u x_u||^2.
    """
    mastery = np.asarray(mastery, dtype=np.float64)
    if mastery.ndim != 2:
        raise ValueError(f"mastery must be (students, concepts), got {mastery.shape}")
    n, z = mastery.shape
    if n < 2:
        raise UndefinedMetricError("MND needs at least two students")
    if mastery.min() < 0.0 or mastery.max() > 1.0:
        raise ValueError("mastery entries must lie in [0, 1]")
    sq_norms = (mastery**2).sum()
    total = mastery.sum(axis=0)
    pair_sum = 2.0 * n * sq_norms - 2.0 * float(total @ total)
    return float(pair_sum / (n * (n - 1) * z))


def top_concepts(triplets: np.ndarray, q_matrix: np.ndarray, k: int = 10) -> np.ndarray:
    """Concepts ordered by response-log coverage, most-logged first.

    A log counts toward every concept its exercise covers.  Ties break
    toward the lower concept id.  Returns at most ``k`` concept ids.
    """
    q = np.asarray(q_matrix)
    counts = np.zeros(q.shape[1], dtype=np.int64)
    exercises, ex_counts = np.unique(np.asarray(triplets)[:, 1], return_counts=True)
    for e, c in zip(exercises, ex_counts):
        counts += c * q[e].astype(np.int64)
    order = np.lexsort((np.arange(counts.size), -counts))
    order = order[counts[order] > 0]
    return order[:k]


def doa(
    mastery: np.ndarray,
    triplets: np.ndarray,
    q_matrix: np.ndarray,
    concepts: np.ndarray | None = None,
) -> float:
    """Degree of agreement between diagnosed mastery order and outcomes.

    For each concept: over ordered student pairs (a, b) with strictly
    higher diagnosed mastery for a, count exercises of that concept both
    answered where a was right and b wrong, against all co-answered
    exercises they disagreed on.  Pairs with no disagreements contribute
    to neither numerator nor denominator.  Concepts with fewer than two
    interacting students are skipped with a warning.  The result is the
    unweighted mean over the scored concepts.
    """
    mastery = np.asarray(mastery, dtype=np.float64)
    t = np.asarray(triplets)
    q = np.asarray(q_matrix)
    n = mastery.shape[0]
    if mastery.ndim != 2 or mastery.shape[1] != q.shape[1]:
        raise ValueError("mastery columns must match the Q-matrix concepts")
    if concepts is None:
        concepts = top_concepts(t, q)
    concepts = np.asarray(concepts, dtype=np.int64)

    per_concept = []
    skipped = []
    for concept in concepts:
        covering = np.flatnonzero(q[:, concept])
        mask = np.isin(t[:, 1], covering)
        logs = t[mask]
        if logs.shape[0] == 0:
            skipped.append(int(concept))
            continue
        col = {e: i for i, e in enumerate(covering)}
        right = np.zeros((n, covering.size))
        wrong = np.zeros((n, covering.size))
        for s, e, r in logs:
            (right if r == 1 else wrong)[s, col[e]] = 1.0
        interacting = (right + wrong).sum(axis=1) > 0
        if interacting.sum() < 2:
            skipped.append(int(concept))
            continue
        # num[a, b]: exercises both took where a was right and b wrong
        num = right @ wrong.T
        den = num + num.T
        higher = mastery[:, concept][:, None] > mastery[:, concept][None, :]
        scored = higher & (den > 0)
        if not scored.any():
            skipped.append(int(concept))
            continue
        per_concept.append(float((num[scored] / den[scored]).mean()))
    if skipped:
        warnings.warn(
            f"DOA skipped {len(skipped)} concepts with too little pair evidence: {skipped}"
        )
    if not per_concept:
        raise UndefinedMetricError("no concept had enough evidence for DOA")
    return float(np.mean(per_concept))


@dataclass
class MetricReport:
    """One evaluation row; mastery metrics are None for latent-trait models."""

    auc: float
    accuracy: float
    doa: float | None = None
    mnd: float | None = None
    n_scored: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        base = {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "doa": self.doa,
            "mnd": self.mnd,
            # human-facing convention: mastery spread is quoted in percent
            "mnd_percent": None if self.mnd is None else self.mnd * 100.0,
            "n_scored": self.n_scored,
        }
        base.update(self.extra)
        return base

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)
