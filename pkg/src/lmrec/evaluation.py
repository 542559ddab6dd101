"""Recognition metrics, retrieval metrics and threshold calibration."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

RELEVANT, JUNK, IRRELEVANT = 1, -1, 0
_LABELS = {"rel": RELEVANT, "relevant": RELEVANT, "junk": JUNK, "irrel": IRRELEVANT, "irrelevant": IRRELEVANT}


class UnreachableTarget(ValueError):
    def __init__(self, target: float, achievable: float):
        super().__init__(f"target {target} unreachable; best achievable is {achievable}")
        self.target = target
        self.achievable = achievable


@dataclass
class EvalReport:
    sensitivity: float
    specificity: float
    correct: int  # landmark queries whose top-1 is acceptable
    wrong_landmark: int  # landmark queries answered with another landmark
    missed: int  # landmark queries judged non-landmark
    true_negative: int
    false_positive: int
    per_category: Dict[str, float] = field(default_factory=dict)

    @property
    def n_landmark(self) -> int:
        return self.correct + self.wrong_landmark + self.missed

    @property
    def n_clean(self) -> int:
        return self.true_negative + self.false_positive

    def as_dict(self) -> Dict[str, float]:
        out = {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "landmark_queries": self.n_landmark,
            "clean_queries": self.n_clean,
            "correct": self.correct,
            "wrong_landmark": self.wrong_landmark,
            "missed": self.missed,
            "true_negative": self.true_negative,
            "false_positive": self.false_positive,
        }
        out.update({f"sensitivity[{k}]": v for k, v in self.per_category.items()})
        return out


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def sensitivity_specificity(
    predictions: Sequence[Optional[int]],
    truth: Sequence[Iterable[int]],
    categories: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Top-1 sensitivity on landmark queries and non-landmark rate on clean queries.

    ``predictions[i]`` is the top landmark id or ``None`` for a non-landmark
    verdict. ``truth[i]`` is the set of acceptable landmark ids, empty for a
    landmark-free query. Empty denominators give ``nan``.
    """
    if len(predictions) != len(truth):
        raise ValueError(f"{len(predictions)} predictions for {len(truth)} ground-truth entries")
    correct = wrong = missed = tn = fp = 0
    cat_hits: Dict[str, List[int]] = {}
    for i, (pred, acceptable) in enumerate(zip(predictions, truth)):
        if acceptable is None:
            raise ValueError(f"query {i} has no ground truth")
        acceptable = set(acceptable)
        if acceptable:
            ok = pred is not None and pred in acceptable
            if ok:
                correct += 1
            elif pred is None:
                missed += 1
            else:
                wrong += 1
            if categories is not None:
                cat_hits.setdefault(categories[i], []).append(int(ok))
        elif pred is None:
            tn += 1
        else:
            fp += 1
    per_cat = {c: float(np.mean(v)) for c, v in sorted(cat_hits.items())}
    return EvalReport(_ratio(correct, correct + wrong + missed), _ratio(tn, tn + fp),
                      correct, wrong, missed, tn, fp, per_cat)


def _as_labels(ranking: Sequence[Union[int, str]]) -> np.ndarray:
    return np.array([_LABELS[r] if isinstance(r, str) else int(r) for r in ranking], dtype=np.int64)


def average_precision(ranking: Sequence[Union[int, str]], n_relevant: Optional[int] = None) -> float:
    """AP of one ranked list after dropping junk entries.

    Precision is taken at every relevant position and averaged over
    ``n_relevant`` (default: relevant items present in the list).
    """
    labels = _as_labels(ranking)
    labels = labels[labels != JUNK]
    hits = labels == RELEVANT
    total = int(hits.sum()) if n_relevant is None else int(n_relevant)
    if total == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    # left-to-right accumulation so the result does not depend on pairwise-sum blocking
    return float(np.cumsum(np.arange(1, ranks.size + 1) / ranks)[-1] / total)


def precision_at_k(ranking: Sequence[Union[int, str]], k: int) -> float:
    """Fraction relevant among the first ``k`` non-junk entries (fewer if the list is shorter)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = _as_labels(ranking)
    top = labels[labels != JUNK][:k]
    return float(np.mean(top == RELEVANT)) if top.size else 0.0


def retrieval_metrics(rankings: Sequence[Sequence[Union[int, str]]], k: int = 10,
                      n_relevant: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """``{"mAP": ..., "mP@k": ...}`` over queries; each ranking is a list of rel/junk/irrel labels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise ValueError("no rankings given")
    totals = [None] * len(rankings) if n_relevant is None else list(n_relevant)
    aps = [average_precision(r, t) for r, t in zip(rankings, totals)]
    pks = [precision_at_k(r, k) for r in rankings]
    return {"mAP": float(np.mean(aps)), f"mP@{k}": float(np.mean(pks))}


def calibrate_threshold(clean_scores, target_specificity: float) -> float:
    """Smallest gate ``eta`` such that at least the target share of clean scores fall below it.

    A query is gated out as non-landmark when its best similarity is ``< eta``,
    so the returned value sits one ulp above the relevant order statistic.
    ``target_specificity == 0`` yields ``-inf``.
    """
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("calibration needs at least one landmark-free score")
    if np.any(np.isnan(s)):
        raise ValueError("calibration scores contain NaN")
    if target_specificity <= 0:
        return -math.inf
    need = int(math.ceil(target_specificity * s.size - 1e-9))
    # a +inf score can never fall below any gate
    if target_specificity > 1 or s[need - 1] == math.inf:
        raise UnreachableTarget(target_specificity, float(np.mean(s < math.inf)))
    return float(np.nextafter(s[need - 1], math.inf))


def calibrate_rejection_threshold(inlier_scores, max_inlier_rejection: float) -> float:
    """Largest ``gamma`` rejecting (score ``< gamma``) at most the given share of inliers."""
    s = np.sort(np.asarray(inlier_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("calibration needs at least one inlier score")
    if not 0 <= max_inlier_rejection < 1:
        raise ValueError("max_inlier_rejection must be in [0, 1)")
    allowed = int(math.floor(max_inlier_rejection * s.size + 1e-9))
    return float(s[allowed])


def write_report(path: Union[str, os.PathLike], metrics: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}={v}\n")


def summary_line(metrics: Dict[str, object]) -> str:
    return "\t".join(f"{k}={v}" for k, v in metrics.items())
