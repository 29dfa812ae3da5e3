"""OOD detection metrics, with OOD as the positive class.

Operating-point conventions:

* TPR5 thresholds with ``score >= t`` over observed scores (plus ``+inf``).
* F1 and acc@90 share one threshold, the nearest-rank 90th percentile of the
  ID test scores, predicting OOD iff ``score > t``.
* AUPR is step-wise average precision (no trapezoidal interpolation).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyClass, MissingSample, NonFiniteValue, ValidationError

METRIC_NAMES = ("tpr5", "auroc", "aupr", "f1", "acc90")
CSV_FIELDS = ("detector", "id_dataset", "ood_dataset", "round", "tpr5", "auroc", "aupr", "f1",
              "acc90", "threshold_acc90", "n_id", "n_ood")


@dataclass(frozen=True)
class LabeledScores:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __init__(self, id_scores, ood_scores):
        a = np.asarray(id_scores, dtype=np.float64).ravel()
        b = np.asarray(ood_scores, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NonFiniteValue("scores must be finite")
        object.__setattr__(self, "id_scores", a)
        object.__setattr__(self, "ood_scores", b)

    def require_both(self) -> None:
        if len(self.id_scores) == 0 or len(self.ood_scores) == 0:
            raise EmptyClass(f"need ID and OOD scores, got {len(self.id_scores)} and {len(self.ood_scores)}")

    def swapped(self) -> "LabeledScores":
        return LabeledScores(self.ood_scores, self.id_scores)


@dataclass(frozen=True)
class MetricReport:
    tpr5: float
    auroc: float
    aupr: float
    f1: float
    acc90: float
    threshold_acc90: float
    n_id: int
    n_ood: int
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


def _count_ge(sorted_values: np.ndarray, t) -> np.ndarray:
    return len(sorted_values) - np.searchsorted(sorted_values, t, side="left")


def tpr_at_fpr(ls: LabeledScores, fpr_cap: float = 0.05) -> float:
    """TPR at the smallest observed threshold whose FPR (``id >= t``) is within the cap."""
    if not 0.0 < fpr_cap < 1.0:
        raise ValidationError(f"fpr_cap must lie in (0, 1), got {fpr_cap}")
    ls.require_both()
    ids = np.sort(ls.id_scores)
    oods = np.sort(ls.ood_scores)
    candidates = np.append(np.unique(np.concatenate([ids, oods])), np.inf)
    # FPR is non-increasing in t, so the admissible thresholds form a suffix
    fpr = _count_ge(ids, candidates) / len(ids)
    t = candidates[np.argmax(fpr <= fpr_cap)]
    return float(_count_ge(oods, t) / len(oods))


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    boundaries = np.flatnonzero(np.diff(sv)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(sv)]])
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty(len(values))
    ranks[order] = ranks_sorted
    return ranks


def auroc(ls: LabeledScores) -> float:
    """P(ood > id) + 0.5 P(ood == id), via the rank-sum statistic."""
    ls.require_both()
    n_id, n_ood = len(ls.id_scores), len(ls.ood_scores)
    ranks = midranks(np.concatenate([ls.ood_scores, ls.id_scores]))
    u = ranks[:n_ood].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_ood * n_id))


def aupr(ls: LabeledScores) -> float:
    """Average precision over descending unique thresholds (OOD positive)."""
    ls.require_both()
    scores = np.concatenate([ls.ood_scores, ls.id_scores])
    positive = np.concatenate([np.ones(len(ls.ood_scores)), np.zeros(len(ls.id_scores))])
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    last_of_group = np.append(np.flatnonzero(np.diff(s)), len(s) - 1)
    tp = np.cumsum(y)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall_step = np.diff(np.concatenate([[0.0], tp])) / len(ls.ood_scores)
    return float(np.sum(recall_step * precision))


def nearest_rank(q: float, n: int) -> int:
    """``ceil(q * n)`` with ``q`` taken at its printed decimal value, clamped to ``[1, n]``."""
    r = Fraction(repr(float(q))) * n
    return min(max(math.ceil(r), 1), n)


def threshold_at_id_percentile(ls: LabeledScores, q: float = 0.90) -> float:
    """Nearest-rank ``q`` quantile of the ID scores (the ``ceil(q n)``-th smallest)."""
    if not 0.0 < q < 1.0:
        raise ValidationError(f"q must lie in (0, 1), got {q}")
    if len(ls.id_scores) == 0:
        raise EmptyClass("no ID scores")
    ids = np.sort(ls.id_scores)
    return float(ids[nearest_rank(q, len(ids)) - 1])


def confusion_at_threshold(ls: LabeledScores, t: float) -> tuple[int, int, int, int]:
    """``(tp, fp, tn, fn)`` predicting OOD iff ``score > t``."""
    tp = int(np.sum(ls.ood_scores > t))
    fp = int(np.sum(ls.id_scores > t))
    return tp, fp, len(ls.id_scores) - fp, len(ls.ood_scores) - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def labeled_scores_for_round(scores, round) -> LabeledScores:
    entries = scores.entries
    missing = [s for s in list(round.test_id) + list(round.test_ood) if s not in entries]
    if missing:
        raise MissingSample(f"score table {scores.detector_name!r} lacks sample {missing[0]!r}")
    return LabeledScores([entries[s] for s in round.test_id], [entries[s] for s in round.test_ood])


def evaluate_scores(ls: LabeledScores, fpr_cap: float = 0.05, q: float = 0.90) -> MetricReport:
    ls.require_both()
    t = threshold_at_id_percentile(ls, q)
    tp, fp, tn, fn = confusion_at_threshold(ls, t)
    n = len(ls.id_scores) + len(ls.ood_scores)
    return MetricReport(
        tpr5=tpr_at_fpr(ls, fpr_cap),
        auroc=auroc(ls),
        aupr=aupr(ls),
        f1=f1_from_counts(tp, fp, fn),
        acc90=(tp + tn) / n,
        threshold_acc90=t,
        n_id=len(ls.id_scores),
        n_ood=len(ls.ood_scores),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def evaluate_round(scores, round) -> MetricReport:
    """All five metrics for one detector on one evaluation round."""
    return evaluate_scores(labeled_scores_for_round(scores, round))


def metric_row(detector: str, id_dataset: str, ood_dataset: str, round_index: int,
               report: MetricReport) -> dict:
    return {
        "detector": detector, "id_dataset": id_dataset, "ood_dataset": ood_dataset,
        "round": round_index,
        **{m: getattr(report, m) for m in METRIC_NAMES},
        "threshold_acc90": report.threshold_acc90, "n_id": report.n_id, "n_ood": report.n_ood,
    }


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metric_csv(path, rows: Sequence[dict]) -> None:
    """Per-round metric rows; floats written with ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in CSV_FIELDS])


def read_metric_csv(path) -> list[dict]:
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            row["round"] = int(row["round"])
            for m in METRIC_NAMES + ("threshold_acc90",):
                row[m] = float(row[m])
            row["n_id"], row["n_ood"] = int(row["n_id"]), int(row["n_ood"])
            rows.append(row)
    return rows
