"""Post-hoc OOD scorers over precomputed logits and features.

Every scorer returns scores oriented so that higher means more OOD.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    ClassTooSmall,
    DimensionMismatch,
    ExtraSample,
    InvalidGamma,
    InvalidTopM,
    KTooLarge,
    ManifestParseError,
    MissingSample,
    NonFiniteValue,
    SingularCovariance,
    ValidationError,
    ZeroVector,
)

GEN_DEFAULT_GAMMA = 0.1
GEN_DEFAULT_TOP_M = 100
MDS_RIDGE = 1e-6


@dataclass(frozen=True)
class ScoreTable:
    detector_name: str
    round_index: int
    entries: Mapping[str, float]
    params: Mapping[str, object] = field(default_factory=dict)
    orientation: str = "higher-is-OOD"

    def __post_init__(self):
        entries = {str(k): float(v) for k, v in self.entries.items()}
        bad = [k for k, v in entries.items() if not math.isfinite(v)]
        if bad:
            raise NonFiniteValue(f"{self.detector_name}: non-finite score for {bad[:3]}")
        object.__setattr__(self, "entries", MappingProxyType(entries))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @classmethod
    def from_arrays(cls, name: str, round_index: int, ids: Sequence[str], scores, **params) -> "ScoreTable":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(ids),):
            raise DimensionMismatch(f"{len(ids)} ids but scores of shape {scores.shape}")
        return cls(name, round_index, dict(zip(ids, scores.tolist())), params)


def _matrix(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{what} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{what} contains non-finite values")
    return a


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ebo_scores(logits) -> np.ndarray:
    """Energy score ``-logsumexp(logits)`` at temperature 1."""
    z = _matrix(logits, "logits")
    if z.shape[1] < 2:
        raise ValidationError("energy score needs at least two logit columns")
    return -logsumexp_rows(z)


def gen_scores(logits, gamma: float = GEN_DEFAULT_GAMMA, top_m: Optional[int] = None) -> np.ndarray:
    """Generalized entropy ``sum_j p_j^gamma (1 - p_j)^gamma`` over the ``top_m`` largest probabilities."""
    z = _matrix(logits, "logits")
    n_classes = z.shape[1]
    if top_m is None:
        top_m = min(GEN_DEFAULT_TOP_M, n_classes)
    if not 0.0 < gamma < 1.0:
        raise InvalidGamma(f"gamma must lie in (0, 1), got {gamma}")
    if not 1 <= top_m <= n_classes:
        raise InvalidTopM(f"top_m must lie in [1, {n_classes}], got {top_m}")
    p = softmax_rows(z)
    top = -np.sort(-p, axis=1)[:, :top_m]
    return np.sum(top ** gamma * (1.0 - top) ** gamma, axis=1)


def default_k_neighbors(n_train: int) -> int:
    return min(50, math.ceil(math.sqrt(n_train)))


def _l2_normalize(a: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector(f"{what} has {int(np.sum(norms == 0))} zero-norm row(s)")
    return a / norms


def knn_scores(train_features, test_features, k_neighbors: Optional[int] = None,
               chunk: int = 2048) -> np.ndarray:
    """Distance from each normalized test row to its k-th nearest normalized training row."""
    train = _l2_normalize(_matrix(train_features, "train features"), "train features")
    test = _l2_normalize(_matrix(test_features, "test features"), "test features")
    if train.shape[1] != test.shape[1]:
        raise DimensionMismatch(f"train dim {train.shape[1]} != test dim {test.shape[1]}")
    if k_neighbors is None:
        k_neighbors = default_k_neighbors(len(train))
    if not 1 <= k_neighbors <= len(train):
        raise KTooLarge(f"k_neighbors={k_neighbors} with {len(train)} training rows")
    out = np.empty(len(test))
    for start in range(0, len(test), chunk):
        block = test[start:start + chunk]
        # unit vectors: ||a - b||^2 = 2 - 2 a.b
        sq = np.maximum(2.0 - 2.0 * block @ train.T, 0.0)
        out[start:start + chunk] = np.partition(sq, k_neighbors - 1, axis=1)[:, k_neighbors - 1]
    return np.sqrt(out)


@dataclass(frozen=True)
class GaussianClassModel:
    classes: tuple[str, ...]
    class_means: np.ndarray
    shared_covariance: np.ndarray
    regularization: float
    cholesky: np.ndarray = field(repr=False)


def fit_mds(train_features, train_labels: Sequence[str]) -> GaussianClassModel:
    """Class means plus one pooled covariance, ridge-regularized.

    Covariance is the pooled within-class scatter over ``n - n_classes``; the
    ridge is ``1e-6 * trace / d``, or ``1e-6`` when the scatter is exactly zero.
    """
    x = _matrix(train_features, "train features")
    labels = np.asarray(list(train_labels))
    if len(labels) != len(x):
        raise DimensionMismatch(f"{len(x)} feature rows but {len(labels)} labels")
    classes = sorted(set(labels.tolist()))
    n, d = x.shape
    means = np.empty((len(classes), d))
    centered = np.empty_like(x)
    for i, c in enumerate(classes):
        mask = labels == c
        if mask.sum() < 2:
            raise ClassTooSmall(f"class {c!r} has {int(mask.sum())} training sample(s); need >= 2")
        means[i] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[i]
    cov = centered.T @ centered / (n - len(classes))
    cov = (cov + cov.T) / 2
    trace = float(np.trace(cov))
    eps = MDS_RIDGE * trace / d if trace > 0 else MDS_RIDGE
    cov = cov + eps * np.eye(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance not positive definite after ridge {eps:g}") from exc
    return GaussianClassModel(tuple(classes), means, cov, eps, chol)


def mds_scores(model: GaussianClassModel, test_features) -> np.ndarray:
    """Smallest squared Mahalanobis distance to any class mean."""
    x = _matrix(test_features, "test features")
    if x.shape[1] != model.class_means.shape[1]:
        raise DimensionMismatch(f"model dim {model.class_means.shape[1]} != test dim {x.shape[1]}")
    best = np.full(len(x), np.inf)
    for mu in model.class_means:
        z = solve_triangular(model.cholesky, (x - mu).T, lower=True, check_finite=False)
        best = np.minimum(best, np.einsum("ij,ij->j", z, z))
    return best


def score_ebo(logits, ids: Sequence[str], round_index: int = 0, name: str = "ebo") -> ScoreTable:
    return ScoreTable.from_arrays(name, round_index, ids, ebo_scores(logits), temperature=1.0)


def score_gen(logits, ids: Sequence[str], gamma: float = GEN_DEFAULT_GAMMA, top_m: Optional[int] = None,
              round_index: int = 0, name: str = "gen") -> ScoreTable:
    n_classes = np.shape(logits)[1]
    m = min(GEN_DEFAULT_TOP_M, n_classes) if top_m is None else top_m
    return ScoreTable.from_arrays(name, round_index, ids, gen_scores(logits, gamma, m), gamma=gamma, top_m=m)


def score_knn(train_features, test_features, ids: Sequence[str], k_neighbors: Optional[int] = None,
              round_index: int = 0, name: str = "knn") -> ScoreTable:
    k = default_k_neighbors(len(train_features)) if k_neighbors is None else k_neighbors
    return ScoreTable.from_arrays(name, round_index, ids, knn_scores(train_features, test_features, k),
                                  k_neighbors=k)


def score_mds(model: GaussianClassModel, test_features, ids: Sequence[str], round_index: int = 0,
              name: str = "mds") -> ScoreTable:
    return ScoreTable.from_arrays(name, round_index, ids, mds_scores(model, test_features),
                                  regularization=model.regularization)


def read_score_csv(path) -> dict[str, float]:
    """``sample_id,score`` rows; duplicate ids are rejected."""
    out: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sample_id", "score"]:
            raise ManifestParseError(f"{path}: expected header 'sample_id,score'")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ManifestParseError(f"{path}: malformed row {row!r}")
            sid, raw = row
            if sid in out:
                raise ManifestParseError(f"{path}: duplicate sample id {sid!r}")
            try:
                value = float(raw)
            except ValueError as exc:
                raise ManifestParseError(f"{path}: bad score {raw!r} for {sid!r}") from exc
            if not math.isfinite(value):
                raise NonFiniteValue(f"{path}: non-finite score for {sid!r}")
            out[sid] = value
    return out


def write_score_csv(path, table: ScoreTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "score"])
        for sid in sorted(table.entries):
            w.writerow([sid, repr(table.entries[sid])])


def load_external_scores(path, round, detector_name: str) -> ScoreTable:
    """Scores produced elsewhere (any method), checked against the round's test ids."""
    scores = read_score_csv(path)
    expected = round.test_ids
    missing = sorted(expected - scores.keys())
    if missing:
        raise MissingSample(f"{path}: no score for sample {missing[0]!r} ({len(missing)} missing)")
    extra = sorted(scores.keys() - expected)
    if extra:
        raise ExtraSample(f"{path}: sample {extra[0]!r} is not in round {round.round_index}'s test set")
    return ScoreTable(detector_name, round.round_index, scores, {"source": str(path)})
