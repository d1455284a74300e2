"""Classification and segmentation metrics, ensemble selection and averaging.

AUROC is computed two independent ways: by Mann-Whitney rank counting
(:func:`auroc`) and by the trapezoid rule over the ROC staircase
(:func:`roc_area`). Both work on integer counts and divide once, so they
agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import AlignmentError, ClassError, InsufficientModelsError, ShapeError, ValidationError


@dataclass(frozen=True)
class ScoreSet:
    ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray
    groups: tuple[str, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        ids = tuple(str(i) for i in self.ids)
        groups = tuple(str(g) for g in self.groups)
        if not (len(ids) == len(scores) == len(labels) == len(groups)):
            raise ValidationError("ids, scores, labels and groups must have equal lengths")
        if scores.size and (not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1):
            raise ValidationError("scores must lie in [0, 1]")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValidationError("labels must be 0 or 1")
        if len(set(ids)) != len(ids):
            raise ValidationError("study ids must be unique")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def from_arrays(cls, scores, labels, ids=None, groups=None) -> "ScoreSet":
        n = len(np.asarray(scores).reshape(-1))
        ids = ids if ids is not None else [str(i) for i in range(n)]
        groups = groups if groups is not None else [""] * n
        return cls(tuple(ids), scores, labels, tuple(groups))

    def __len__(self):
        return len(self.ids)

    def select(self, group: Optional[str]) -> "ScoreSet":
        if group is None:
            return self
        keep = [i for i, g in enumerate(self.groups) if g == group]
        return ScoreSet(
            tuple(self.ids[i] for i in keep), self.scores[keep], self.labels[keep], tuple(self.groups[i] for i in keep)
        )


def _class_counts(scores: ScoreSet) -> tuple[int, int]:
    n_pos = int(scores.labels.sum())
    return n_pos, len(scores) - n_pos


def confusion_metrics(scores: ScoreSet, threshold: float = 0.5) -> tuple[float, float, float]:
    """``(accuracy, sensitivity, specificity)``; a score equal to the threshold counts as positive."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    n_pos, n_neg = _class_counts(scores)
    if n_pos == 0:
        raise ClassError("sensitivity undefined: no positive cases")
    if n_neg == 0:
        raise ClassError("specificity undefined: no negative cases")
    pred = scores.scores >= threshold
    pos = scores.labels == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return (tp + tn) / len(scores), tp / n_pos, tn / n_neg


@dataclass(frozen=True)
class RocCurve:
    fp: np.ndarray
    tp: np.ndarray
    thresholds: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    def points(self) -> list[tuple[float, float, float]]:
        return [(float(f), float(t), float(th)) for f, t, th in zip(self.fpr, self.tpr, self.thresholds)]


def roc_curve(scores: ScoreSet) -> RocCurve:
    """ROC staircase with integer FP/TP counts.

    Thresholds run from ``+inf`` through each distinct score in decreasing
    order; equal scores form one step. The ``-inf`` sentinel would repeat
    the final ``(1, 1)`` point and is merged into it.
    """
    n_pos, n_neg = _class_counts(scores)
    if n_pos == 0 or n_neg == 0:
        raise ClassError("ROC needs both positive and negative cases")
    order = np.argsort(-scores.scores, kind="mergesort")
    s = scores.scores[order]
    y = scores.labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    return RocCurve(
        fp=np.r_[0, fp].astype(np.int64),
        tp=np.r_[0, tp].astype(np.int64),
        thresholds=np.r_[np.inf, s[last_of_group]],
        n_pos=n_pos,
        n_neg=n_neg,
    )


def roc_points(scores: ScoreSet) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` triples from ``(0, 0)`` to ``(1, 1)``."""
    return roc_curve(scores).points()


def roc_area(curve: RocCurve) -> float:
    """Trapezoid-rule area under the staircase, accumulated in integers."""
    dfp = np.diff(curve.fp)
    twice = int(np.sum(dfp * (curve.tp[1:] + curve.tp[:-1])))
    return twice / (2 * curve.n_pos * curve.n_neg)


def auroc(scores: ScoreSet) -> float:
    """Mann-Whitney concordance: P(score_pos > score_neg) + 0.5 * P(tie)."""
    n_pos, n_neg = _class_counts(scores)
    if n_pos == 0 or n_neg == 0:
        raise ClassError("AUROC needs both positive and negative cases")
    order = np.argsort(scores.scores, kind="mergesort")
    s = scores.scores[order]
    y = scores.labels[order]
    # twice the U statistic: for each tie group of scores, positives beat all
    # negatives strictly below and tie with negatives in the group
    twice_u = 0
    neg_below = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        pos = int(y[i:j].sum())
        neg = (j - i) - pos
        twice_u += pos * (2 * neg_below + neg)
        neg_below += neg
        i = j
    return twice_u / (2 * n_pos * n_neg)


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(getattr(m, "data", m))
    return arr if arr.dtype == bool else arr > 0.5


def dice_score(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


# ---------------------------------------------------------------------------
# ensembles

@dataclass
class RunRecord:
    """Outcome of one training run, as seen by model selection."""

    seed: int
    val_accuracy: float
    val_auroc: float
    val_loss: float
    converged: bool
    model: Any = None
    extra: dict = field(default_factory=dict)
    val_dice: Optional[float] = None

    @property
    def rank_score(self) -> float:
        """Validation accuracy + AUROC; segmentation runs rank by validation Dice."""
        if self.val_dice is not None:
            return self.val_dice
        return self.val_accuracy + self.val_auroc


def select_models(runs: Sequence[RunRecord], k: int) -> list[RunRecord]:
    """Best ``k`` converged runs by validation accuracy + AUROC.

    Ties fall to lower validation loss, then lower seed, so the result does
    not depend on input order.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    converged = [r for r in runs if r.converged]
    if len(converged) < k:
        raise InsufficientModelsError(
            f"need {k} converged runs, have {len(converged)} of {len(runs)}",
            {"attempted": len(runs), "converged": len(converged), "required": k},
        )
    ranked = sorted(converged, key=lambda r: (-r.rank_score, r.val_loss, r.seed))
    return ranked[:k]


def ensemble_scores(per_model: Sequence[ScoreSet]) -> ScoreSet:
    """Case-wise mean of the models' scores."""
    if not per_model:
        raise ValidationError("no score sets to average")
    first = per_model[0]
    index = {sid: i for i, sid in enumerate(first.ids)}
    total = np.zeros(len(first))
    for s in per_model:
        if set(s.ids) != set(index) or len(s) != len(first):
            raise AlignmentError("score sets cover different studies")
        perm = np.array([index[sid] for sid in s.ids])
        if not np.array_equal(first.labels[perm], s.labels):
            raise AlignmentError("score sets disagree on labels")
        aligned = np.empty(len(first))
        aligned[perm] = s.scores
        total += aligned
    return ScoreSet(first.ids, np.clip(total / len(per_model), 0.0, 1.0), first.labels, first.groups)


@dataclass
class MetricSummary:
    mean: float
    sd: float
    values: list[float] = field(default_factory=list)


def mean_sd(values: Sequence[float]) -> MetricSummary:
    """Mean and sample (n - 1) standard deviation; a single value has sd 0."""
    v = [float(x) for x in values]
    if not v:
        raise ValidationError("cannot summarize an empty list")
    m = math.fsum(v) / len(v)
    sd = math.sqrt(math.fsum((x - m) ** 2 for x in v) / (len(v) - 1)) if len(v) > 1 else 0.0
    return MetricSummary(m, sd, v)


@dataclass
class MetricsReport:
    accuracy: MetricSummary
    sensitivity: MetricSummary
    specificity: MetricSummary
    auroc: MetricSummary
    n_models: int
    group: Optional[str] = None

    def as_rows(self) -> list[tuple[str, float, float]]:
        return [
            ("accuracy", self.accuracy.mean, self.accuracy.sd),
            ("specificity", self.specificity.mean, self.specificity.sd),
            ("sensitivity", self.sensitivity.mean, self.sensitivity.sd),
            ("auroc", self.auroc.mean, self.auroc.sd),
        ]


def metrics_report(per_model: Sequence[ScoreSet], group: Optional[str] = None, threshold: float = 0.5) -> MetricsReport:
    """Per-model metrics on ``group`` (all cases if None), summarized as mean and sd."""
    acc, sens, spec, auc = [], [], [], []
    for s in per_model:
        s = s.select(group)
        a, se, sp = confusion_metrics(s, threshold)
        acc.append(a)
        sens.append(se)
        spec.append(sp)
        auc.append(auroc(s))
    return MetricsReport(mean_sd(acc), mean_sd(sens), mean_sd(spec), mean_sd(auc), len(per_model), group)
