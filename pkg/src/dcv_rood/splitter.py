"""Fold construction for paired ID/OOD evaluation.

ID data is split with a stratified k-fold (every class spread over all folds),
OOD data with a group k-fold at the classification level (every OOD class in
exactly one fold), so that when round ``r`` trains with outlier exposure on the
other folds, none of its test OOD classes has been seen.

All randomness comes from :class:`~dcv_rood.rng.SplitMix64` and is consumed in
canonical order, so folds depend only on ``(dataset content, k, seed)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    ClassOverlap,
    EmptyDataset,
    EmptyOODStratum,
    InvalidK,
    KMismatch,
    ManifestParseError,
    NoStrataLevel,
    SampleOverlap,
    SmallClassWarning,
    StratumUnderfilled,
    TaxonomyMismatch,
    TooFewGroups,
    ValidationError,
)
from .rng import SplitMix64, hash64
from .taxonomy import SampleSet, canonical_class_order, filter_by_labels

METHODS = ("stratified", "group", "hierarchical-ood", "random")


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of_sample: Mapping[str, int]
    method: str
    seed: int
    level: Optional[int] = None
    level_names: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "fold_of_sample", MappingProxyType(dict(self.fold_of_sample)))
        bad = [s for s, f in self.fold_of_sample.items() if not 0 <= f < self.k]
        if bad:
            raise ValueError(f"fold index out of range for {bad[:3]}")

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for sid in sorted(self.fold_of_sample):
            out[self.fold_of_sample[sid]].append(sid)
        return out

    def fold_sizes(self) -> list[int]:
        return [len(f) for f in self.folds()]

    def to_dict(self) -> dict:
        return {
            "algorithm": self.method,
            "seed": self.seed,
            "k": self.k,
            "levels_used": list(self.level_names),
            "folds": self.folds(),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class SplitSpec:
    p: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"p must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class EvaluationRound:
    round_index: int
    train_id: tuple[str, ...]
    test_id: tuple[str, ...]
    train_ood: tuple[str, ...]
    test_ood: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def test_ids(self) -> set[str]:
        return set(self.test_id) | set(self.test_ood)


def _check_k(k: int) -> None:
    if not isinstance(k, int) or k < 2:
        raise InvalidK(f"k must be an integer >= 2, got {k!r}")


def _warn(bucket: list[str], category, msg: str) -> None:
    bucket.append(f"{category.__name__}: {msg}")
    warnings.warn(msg, category, stacklevel=3)


def _members(s: SampleSet, level: int) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for r in s.records:
        out.setdefault(r.path[level], []).append(r.sample_id)
    return out


def stratified_k_fold(s: SampleSet, level: int, k: int, seed: int) -> FoldAssignment:
    """Stratified k-fold over the classes at ``level``.

    Classes are visited in canonical order; each class's samples are shuffled
    and dealt round-robin starting at fold ``class_rank mod k``, so per-class
    fold counts differ by at most one and remainders rotate across folds.
    """
    _check_k(k)
    if len(s) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    rng = SplitMix64(seed)
    members = _members(s, level)
    notes: list[str] = []
    assignment: dict[str, int] = {}
    for rank, cls in enumerate(sorted(members)):
        ids = rng.shuffle(list(members[cls]))
        if len(ids) < k:
            _warn(notes, SmallClassWarning,
                  f"class {cls!r} has {len(ids)} samples < k={k}; it cannot appear in every fold")
        start = rank % k
        for j, sid in enumerate(ids):
            assignment[sid] = (start + j) % k
    return FoldAssignment(k, assignment, "stratified", seed, level, (s.taxonomy.levels[level],), tuple(notes))


def random_k_fold(s: SampleSet, k: int, seed: int) -> FoldAssignment:
    """Plain k-fold: one shuffle of all samples dealt round-robin."""
    _check_k(k)
    if len(s) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    ids = SplitMix64(seed).shuffle(s.ids)
    return FoldAssignment(k, {sid: j % k for j, sid in enumerate(ids)}, "random", seed)


def _group_order(members: Mapping[str, Sequence[str]], rng: SplitMix64) -> list[str]:
    """Classes by descending size; equal-size runs (lexicographic) are shuffled."""
    ordered = sorted(members, key=lambda c: (-len(members[c]), c))
    out: list[str] = []
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and len(members[ordered[j]]) == len(members[ordered[i]]):
            j += 1
        out.extend(rng.shuffle(ordered[i:j]))
        i = j
    return out


def group_k_fold(s: SampleSet, level: int, k: int, seed: int) -> FoldAssignment:
    """Group k-fold keeping every class at ``level`` inside a single fold.

    Greedy longest-processing-time balancing: classes in descending size order
    each go to the fold with the fewest samples so far (lowest index on ties).
    """
    _check_k(k)
    members = _members(s, level)
    if len(members) < k:
        raise TooFewGroups(f"{len(members)} classes at level {level} cannot fill k={k} folds")
    rng = SplitMix64(seed)
    load = [0] * k
    assignment: dict[str, int] = {}
    for cls in _group_order(members, rng):
        fold = min(range(k), key=lambda f: (load[f], f))
        load[fold] += len(members[cls])
        for sid in members[cls]:
            assignment[sid] = fold
    return FoldAssignment(k, assignment, "group", seed, level, (s.taxonomy.levels[level],))


def build_folds_flat(d_id: SampleSet, d_ood: SampleSet, k: int, seed: int,
                     id_method: str = "stratified") -> tuple[FoldAssignment, FoldAssignment]:
    """Flat dual folds: stratified ID folds and group OOD folds at the classification level.

    ``id_method="random"`` swaps in plain k-fold for the ID side, acceptable
    for balanced ID data.
    """
    lv_id = d_id.taxonomy.classification_level
    lv_ood = d_ood.taxonomy.classification_level
    overlap = set(d_id.labels(lv_id)) & set(d_ood.labels(lv_ood))
    if overlap:
        raise ClassOverlap(f"classes present in both ID and OOD data: {sorted(overlap)[:5]}")
    if id_method == "stratified":
        f_id = stratified_k_fold(d_id, lv_id, k, seed)
    elif id_method == "random":
        f_id = random_k_fold(d_id, k, seed)
    else:
        raise ValidationError(f"unknown id_method {id_method!r}")
    return f_id, group_k_fold(d_ood, lv_ood, k, seed)


def ood_class_count(p: float, n: int) -> int:
    """``floor(p * n)`` with ``p`` read as the decimal it prints as (0.29 * 100 -> 29)."""
    return int(Fraction(repr(float(p))) * n // 1)


def select_id_ood_split(h: SampleSet, spec: SplitSpec) -> tuple[SampleSet, SampleSet]:
    """Per-stratum random selection of ``floor(p * N_i)`` OOD classes.

    Strata are the classes one level above the classification level. Returns
    ``(ID subset, OOD subset)``.
    """
    t = h.taxonomy
    if t.strata_level is None:
        raise NoStrataLevel("taxonomy has no level above the classification level")
    rng = SplitMix64(spec.seed)
    c_id: set[str] = set()
    c_ood: set[str] = set()
    for stratum in canonical_class_order(t, t.strata_level):
        classes = t.children(t.strata_level, stratum)
        n_ood = ood_class_count(spec.p, len(classes))
        if n_ood == 0 and spec.p > 0 and classes:
            warnings.warn(f"stratum {stratum!r}: floor({spec.p}*{len(classes)}) = 0 OOD classes",
                          EmptyOODStratum, stacklevel=2)
        chosen = rng.sample(classes, n_ood)
        c_ood.update(chosen)
        c_id.update(c for c in classes if c not in chosen)
    return filter_by_labels(h, c_id), filter_by_labels(h, c_ood)


def join_by_fold(parts: Sequence[FoldAssignment]) -> FoldAssignment:
    """Index-wise union of fold systems: fold ``j`` of the result is every part's fold ``j``."""
    if not parts:
        raise ValidationError("join_by_fold needs at least one part")
    k = parts[0].k
    if any(p.k != k for p in parts):
        raise KMismatch(f"parts have different k: {[p.k for p in parts]}")
    merged: dict[str, int] = {}
    for p in parts:
        for sid, f in p.fold_of_sample.items():
            if sid in merged:
                raise SampleOverlap(f"sample {sid!r} appears in more than one part")
            merged[sid] = f
    if len(parts) == 1:
        return parts[0]
    notes = tuple(w for p in parts for w in p.warnings)
    return FoldAssignment(k, merged, "hierarchical-ood", parts[0].seed, parts[0].level,
                          parts[0].level_names, notes)


def _underfilled_part(sub: SampleSet, level: int, k: int, seed: int, load: list[int],
                      stratum: str, notes: list[str]) -> FoldAssignment:
    """Stratum with fewer than ``k`` OOD classes: one class per distinct fold.

    Folds are chosen by the current merged sample load (lowest first, then
    lowest index), so underfilled strata fill each other's gaps.
    """
    members = _members(sub, level)
    _warn(notes, StratumUnderfilled,
          f"stratum {stratum!r} has {len(members)} OOD classes < k={k}; "
          f"it is absent from {k - len(members)} fold(s)")
    rng = SplitMix64(seed)
    assignment: dict[str, int] = {}
    used: set[int] = set()
    for cls in _group_order(members, rng):
        fold = min((f for f in range(k) if f not in used), key=lambda f: (load[f], f))
        used.add(fold)
        load[fold] += len(members[cls])
        for sid in members[cls]:
            assignment[sid] = fold
    return FoldAssignment(k, assignment, "group", seed, level, (sub.taxonomy.levels[level],))


def build_folds_hierarchical(h_id: SampleSet, h_ood: SampleSet, k: int,
                             seed: int) -> tuple[FoldAssignment, FoldAssignment]:
    """Hierarchical dual folds.

    ID: stratified k-fold over the deepest level. OOD: group k-fold at the
    classification level inside each stratum, then joined index-wise. Each
    stratum uses its own derived seed ``hash64(seed, "stratum/<id>", 0)``.
    """
    _check_k(k)
    if h_id.taxonomy != h_ood.taxonomy:
        raise TaxonomyMismatch("ID and OOD splits must share one taxonomy")
    t = h_id.taxonomy
    if t.strata_level is None:
        raise NoStrataLevel("taxonomy has no level above the classification level")
    c = t.classification_level
    overlap = set(h_id.labels(c)) & set(h_ood.labels(c))
    if overlap:
        raise ClassOverlap(f"classes present in both ID and OOD splits: {sorted(overlap)[:5]}")

    f_id = stratified_k_fold(h_id, t.leaf_level, k, seed)

    notes: list[str] = []
    load = [0] * k
    parts = []
    for stratum in h_ood.classes_present(t.strata_level):
        sub = filter_by_labels(h_ood, {stratum}, level=t.strata_level)
        sub_seed = hash64(seed, f"stratum/{stratum}", 0)
        if len(sub.classes_present(c)) >= k:
            part = group_k_fold(sub, c, k, sub_seed)
            for sid, f in part.fold_of_sample.items():
                load[f] += 1
        else:
            part = _underfilled_part(sub, c, k, sub_seed, load, stratum, notes)
        parts.append(part)
    if not parts:
        raise EmptyDataset("OOD split is empty")
    joined = join_by_fold(parts)
    f_ood = FoldAssignment(k, joined.fold_of_sample, "hierarchical-ood", seed, c,
                           (t.levels[t.strata_level], t.levels[c]), tuple(notes))
    return f_id, f_ood


def assemble_rounds(f_id: FoldAssignment, f_ood: FoldAssignment) -> list[EvaluationRound]:
    """One evaluation round per fold index: fold ``r`` is test, the rest train."""
    if f_id.k != f_ood.k:
        raise KMismatch(f"ID folds k={f_id.k} but OOD folds k={f_ood.k}")
    id_folds, ood_folds = f_id.folds(), f_ood.folds()
    rounds = []
    for r in range(f_id.k):
        rounds.append(EvaluationRound(
            r,
            tuple(sorted(s for j, f in enumerate(id_folds) if j != r for s in f)),
            tuple(id_folds[r]),
            tuple(sorted(s for j, f in enumerate(ood_folds) if j != r for s in f)),
            tuple(ood_folds[r]),
        ))
    return rounds


def write_folds(f: FoldAssignment, path) -> None:
    Path(path).write_text(json.dumps(f.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_folds(path) -> FoldAssignment:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        k = int(doc["k"])
        fold_of = {sid: j for j, fold in enumerate(doc["folds"]) for sid in fold}
        return FoldAssignment(k, fold_of, doc["algorithm"], int(doc["seed"]),
                              level_names=tuple(doc.get("levels_used", ())),
                              warnings=tuple(doc.get("warnings", ())))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"{path}: bad folds manifest: {exc}") from exc


def classes_of(s: SampleSet, ids: Iterable[str], level: Optional[int] = None) -> set[str]:
    lv = s.taxonomy.classification_level if level is None else level
    wanted = set(ids)
    return {r.path[lv] for r in s.records if r.sample_id in wanted}
