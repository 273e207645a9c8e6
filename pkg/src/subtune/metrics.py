"""Frame- and video-level AUC, average precision, and equal error rate.

Counts are accumulated as integers and the final ratios formed with exact
rational arithmetic, so tie handling, label-flip complements, and comparisons
against brute-force oracles are exact rather than tolerance-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray | None = None


def _validated(s: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(s.scores, dtype=np.float64)
    labels = np.asarray(s.labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError(f"scores/labels must be equal-length vectors, got {scores.shape} and {labels.shape}")
    if scores.size == 0:
        raise ValueError("empty scored set")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _split_counts(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return scores[labels == 1], scores[labels == 0]


def auc(s: ScoredSet) -> float:
    """Probability a positive outscores a negative, ties counting half."""
    scores, labels = _validated(s)
    pos, neg = _split_counts(scores, labels)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left").sum()
    equal = (np.searchsorted(neg_sorted, pos, side="right") - np.searchsorted(neg_sorted, pos, side="left")).sum()
    num = Fraction(int(2 * below + equal), 2)
    return float(num / (pos.size * neg.size))


def average_precision(s: ScoredSet) -> float:
    """Descending-score sweep with tied scores processed as one block."""
    scores, labels = _validated(s)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = Fraction(0)
    tp = 0
    fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        block_tp = int(sorted_labels[i:j].sum())
        block_fp = (j - i) - block_tp
        tp += block_tp
        fp += block_fp
        if block_tp:
            ap += Fraction(block_tp, n_pos) * Fraction(tp, tp + fp)
        i = j
    return float(ap)


def _roc_vertices(scores: np.ndarray, labels: np.ndarray) -> list[tuple[Fraction, Fraction]]:
    """(FPR, FNR) polyline vertices for a descending-threshold sweep,
    starting at (0, 1) and ending at (1, 0); ties form one segment."""
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    verts = [(Fraction(0), Fraction(1))]
    tp = 0
    fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j].sum())
        fp += (j - i) - int(sorted_labels[i:j].sum())
        verts.append((Fraction(fp, n_neg), Fraction(n_pos - tp, n_pos)))
        i = j
    return verts


def eer(s: ScoredSet) -> float:
    """Crossing of the false-positive and false-negative rate polylines,
    linearly interpolated inside the segment where the sign flips."""
    scores, labels = _validated(s)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("EER needs at least one positive and one negative")
    verts = _roc_vertices(scores, labels)
    prev_f, prev_g = verts[0]
    for f, g in verts[1:]:
        if f - g >= 0:
            # fpr - fnr is nondecreasing along the sweep and was negative at
            # the previous vertex; solve the linear crossing in this segment
            denom = (f - prev_f) + (prev_g - g)
            if denom == 0:
                return float(prev_f)
            tau = (prev_g - prev_f) / denom
            return float(prev_f + tau * (f - prev_f))
        prev_f, prev_g = f, g
    raise AssertionError("ROC sweep must end at FPR=1, FNR=0")


def video_level(s: ScoredSet, pool: str = "mean") -> ScoredSet:
    """Collapse frame scores to one score per clip (mean by default, max as
    the alternative); clip labels must be homogeneous."""
    scores, labels = _validated(s)
    if s.group_ids is None:
        raise ValueError("video-level pooling needs group ids")
    groups = np.asarray(s.group_ids)
    if groups.shape != scores.shape:
        raise ValueError("group ids must align with scores")
    if pool not in ("mean", "max"):
        raise ValueError(f"pool must be 'mean' or 'max', got {pool!r}")
    uniq = np.unique(groups)
    out_scores = np.zeros(uniq.size)
    out_labels = np.zeros(uniq.size, dtype=np.int64)
    for idx, gid in enumerate(uniq):
        sel = groups == gid
        member_labels = np.unique(labels[sel])
        if member_labels.size != 1:
            raise ValueError(f"clip {gid!r} mixes real and fake frames")
        out_labels[idx] = member_labels[0]
        member = scores[sel]
        out_scores[idx] = float(member.mean()) if pool == "mean" else float(member.max())
    return ScoredSet(scores=out_scores, labels=out_labels, group_ids=uniq)
