"""Class hierarchies, labeled samples and their numeric payloads.

Ordering convention: every collection of ids is sorted by plain string
comparison. Python compares code points, which is the same order as comparing
UTF-8 byte sequences, so ``"c10" < "c2"``. Seeded procedures only ever see
canonically ordered inputs, which makes folds independent of manifest row
order.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    ManifestParseError,
    NonFiniteValue,
    OrphanClass,
    UnknownClass,
)

MAGIC = b"DCVR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True, order=True)
class ClassNode:
    level: int
    id: str
    parent: Optional[str] = None


@dataclass(frozen=True)
class ClassTaxonomy:
    """Multi-level class tree.

    ``strata_level`` is the level right above the classification level, or
    ``None`` for a flat taxonomy (classification at level 0).
    """

    levels: tuple[str, ...]
    nodes: frozenset[ClassNode]
    classification_level: int
    _by_level: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        if len(self.levels) < 1:
            raise ManifestParseError("taxonomy needs at least one level")
        if not 0 <= self.classification_level < len(self.levels):
            raise ManifestParseError(
                f"classification_level {self.classification_level} out of range "
                f"for {len(self.levels)} levels"
            )
        by_level: dict[int, dict[str, Optional[str]]] = {i: {} for i in range(len(self.levels))}
        for node in self.nodes:
            if node.level not in by_level:
                raise ManifestParseError(f"class {node.id!r} has invalid level {node.level}")
            if node.id in by_level[node.level]:
                raise ManifestParseError(f"duplicate class id {node.id!r} at level {node.level}")
            by_level[node.level][node.id] = node.parent
        for node in self.nodes:
            if node.level == 0:
                if node.parent is not None:
                    raise ManifestParseError(f"level-0 class {node.id!r} must not have a parent")
            elif node.parent not in by_level[node.level - 1]:
                raise OrphanClass(
                    f"class {node.id!r} at level {node.level} references unknown parent {node.parent!r}"
                )
        object.__setattr__(self, "_by_level", by_level)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def leaf_level(self) -> int:
        return len(self.levels) - 1

    @property
    def strata_level(self) -> Optional[int]:
        return self.classification_level - 1 if self.classification_level > 0 else None

    def ids_at(self, level: int) -> frozenset[str]:
        self._check_level(level)
        return frozenset(self._by_level[level])

    def parent_of(self, level: int, class_id: str) -> Optional[str]:
        try:
            return self._by_level[level][class_id]
        except KeyError:
            raise UnknownClass(f"no class {class_id!r} at level {level}") from None

    def children(self, level: int, class_id: str) -> list[str]:
        """Canonically ordered children (at ``level + 1``) of one class."""
        self._check_level(level + 1)
        return sorted(c for c, p in self._by_level[level + 1].items() if p == class_id)

    def descendants_at(self, level: int, class_id: str, target_level: int) -> list[str]:
        frontier = [class_id]
        for lv in range(level, target_level):
            frontier = [c for p in frontier for c in self.children(lv, p)]
        return sorted(frontier)

    def validate_path(self, path: Sequence[str]) -> None:
        if len(path) != self.depth:
            raise ManifestParseError(f"path {list(path)} has {len(path)} entries, expected {self.depth}")
        for lv, cid in enumerate(path):
            if cid not in self._by_level[lv]:
                raise OrphanClass(f"path {list(path)} references unknown class {cid!r} at level {lv}")
            parent = self._by_level[lv][cid]
            if lv > 0 and parent != path[lv - 1]:
                raise OrphanClass(
                    f"path {list(path)}: {cid!r} has parent {parent!r}, not {path[lv - 1]!r}"
                )

    def _check_level(self, level: int) -> None:
        if not 0 <= level < len(self.levels):
            raise UnknownClass(f"level index {level} out of range")

    @classmethod
    def flat(cls, class_ids: Iterable[str], level_name: str = "class") -> "ClassTaxonomy":
        return cls((level_name,), frozenset(ClassNode(0, c) for c in class_ids), 0)


def canonical_class_order(t: ClassTaxonomy, level: int) -> list[str]:
    """Class ids at ``level`` in canonical (code point / UTF-8 byte) order."""
    return sorted(t.ids_at(level))


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    path: tuple[str, ...]

    @property
    def leaf_class(self) -> str:
        return self.path[-1]


def _freeze(a: Optional[np.ndarray], n: int, what: str) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != n:
        raise DimensionMismatch(f"{what} has shape {a.shape}, expected ({n}, d)")
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{what} contains non-finite entries")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SampleSet:
    """Canonically ordered samples with optional feature and logit rows.

    Construct through :meth:`build` unless the records are already sorted.
    """

    taxonomy: ClassTaxonomy
    records: tuple[SampleRecord, ...]
    features: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        ids = [r.sample_id for r in records]
        if any(a >= b for a, b in zip(ids, ids[1:])):
            dupes = sorted({a for a, b in zip(sorted(ids), sorted(ids)[1:]) if a == b})
            if dupes:
                raise ManifestParseError(f"duplicate sample ids: {dupes[:5]}")
            raise ValueError("records are not in canonical order; use SampleSet.build")
        for r in records:
            self.taxonomy.validate_path(r.path)
        object.__setattr__(self, "features", _freeze(self.features, len(records), "features"))
        object.__setattr__(self, "logits", _freeze(self.logits, len(records), "logits"))

    @classmethod
    def build(cls, taxonomy, records, features=None, logits=None) -> "SampleSet":
        records = list(records)
        order = sorted(range(len(records)), key=lambda i: records[i].sample_id)
        features = None if features is None else np.asarray(features)[order]
        logits = None if logits is None else np.asarray(logits)[order]
        return cls(taxonomy, tuple(records[i] for i in order), features, logits)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def labels(self, level: Optional[int] = None) -> list[str]:
        lv = self.taxonomy.classification_level if level is None else level
        return [r.path[lv] for r in self.records]

    def classes_present(self, level: Optional[int] = None) -> list[str]:
        return sorted(set(self.labels(level)))

    def take(self, rows: Sequence[int]) -> "SampleSet":
        rows = list(rows)
        return SampleSet(
            self.taxonomy,
            tuple(self.records[i] for i in rows),
            None if self.features is None else self.features[rows],
            None if self.logits is None else self.logits[rows],
        )


def filter_by_labels(s: SampleSet, classes: Iterable[str], level: Optional[int] = None) -> SampleSet:
    """Sub-dataset whose label at ``level`` (default: classification level) is in ``classes``."""
    lv = s.taxonomy.classification_level if level is None else level
    wanted = set(classes)
    unknown = wanted - s.taxonomy.ids_at(lv)
    if unknown:
        raise UnknownClass(f"classes not in taxonomy at level {lv}: {sorted(unknown)[:5]}")
    return s.take([i for i, r in enumerate(s.records) if r.path[lv] in wanted])


# ---------------------------------------------------------------------------
# files


def parse_manifest(doc: dict) -> tuple[ClassTaxonomy, list[SampleRecord]]:
    """Taxonomy and records (in document order) from a decoded manifest."""
    try:
        levels = [str(x) for x in doc["levels"]]
        nodes = frozenset(
            ClassNode(int(c["level"]), str(c["id"]), None if c.get("parent") is None else str(c["parent"]))
            for c in doc["classes"]
        )
        cls_level = int(doc["classification_level"])
        raw = [(str(s["id"]), tuple(str(p) for p in s["path"])) for s in doc["samples"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"malformed manifest: {exc!r}") from exc
    taxonomy = ClassTaxonomy(tuple(levels), nodes, cls_level)
    records = []
    for sid, path in raw:
        taxonomy.validate_path(path)
        records.append(SampleRecord(sid, path))
    return taxonomy, records


def manifest_dict(s: SampleSet) -> dict:
    t = s.taxonomy
    return {
        "levels": list(t.levels),
        "classes": [
            {"level": n.level, "id": n.id, "parent": n.parent}
            for n in sorted(t.nodes, key=lambda n: (n.level, n.id))
        ],
        "classification_level": t.classification_level,
        "samples": [{"id": r.sample_id, "path": list(r.path)} for r in s.records],
    }


def manifest_text(s: SampleSet) -> str:
    """Canonical manifest serialization (what :func:`write_manifest` writes)."""
    return json.dumps(manifest_dict(s), indent=2, ensure_ascii=False) + "\n"


def write_manifest(s: SampleSet, path) -> None:
    Path(path).write_text(manifest_text(s), encoding="utf-8")


def write_matrix(path, a: np.ndarray) -> None:
    """Binary matrix file: ``DCVR`` magic, u32 version, u64 rows, u32 cols, f32 row-major."""
    a = np.ascontiguousarray(a, dtype="<f4")
    if a.ndim != 2:
        raise DimensionMismatch("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DimensionMismatch(f"{path}: truncated header")
    magic, version, n_rows, n_cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ManifestParseError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ManifestParseError(f"{path}: unsupported version {version}")
    payload = blob[_HEADER.size:]
    if len(payload) != n_rows * n_cols * 4:
        raise DimensionMismatch(
            f"{path}: header says {n_rows}x{n_cols} but payload holds {len(payload) // 4} values"
        )
    a = np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{path}: non-finite entries")
    return a


def read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["sample_id"]:
        raise ManifestParseError(f"{path}: expected header starting with sample_id")
    width = len(rows[0]) - 1
    ids, values = [], []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != width + 1:
            raise DimensionMismatch(f"{path}: row for {row[0]!r} has {len(row) - 1} values, expected {width}")
        ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ManifestParseError(f"{path}: {exc}") from exc
    a = np.array(values, dtype=np.float64).reshape(len(ids), width)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{path}: non-finite entries")
    return ids, a


def write_feature_csv(path, ids: Sequence[str], a: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"f{j}" for j in range(a.shape[1])])
        for sid, row in zip(ids, a):
            w.writerow([sid] + [repr(float(v)) for v in row])


def _load_payload(path, doc_ids: list[str], what: str) -> np.ndarray:
    """Rows aligned with ``doc_ids`` (manifest document order)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        a = read_matrix(path)
        if a.shape[0] != len(doc_ids):
            raise DimensionMismatch(f"{what} file has {a.shape[0]} rows, manifest has {len(doc_ids)} samples")
        return a
    ids, a = read_feature_csv(path)
    pos = {sid: i for i, sid in enumerate(ids)}
    if len(pos) != len(ids):
        raise ManifestParseError(f"{path}: duplicate sample ids")
    missing = [sid for sid in doc_ids if sid not in pos]
    if missing or len(ids) != len(doc_ids):
        raise DimensionMismatch(
            f"{what} CSV covers {len(ids)} ids, manifest has {len(doc_ids)}; missing e.g. {missing[:3]}"
        )
    return a[[pos[sid] for sid in doc_ids]]


def load_sample_set(manifest_path, feature_path=None, logit_path=None) -> SampleSet:
    """Read a manifest plus optional feature/logit files into a canonical SampleSet.

    Binary payload rows follow the manifest's sample order; CSV payloads are
    matched by ``sample_id``.
    """
    try:
        doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"{manifest_path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestParseError(f"{manifest_path}: top level must be an object")
    taxonomy, records = parse_manifest(doc)
    doc_ids = [r.sample_id for r in records]
    features = None if feature_path is None else _load_payload(feature_path, doc_ids, "feature")
    logits = None if logit_path is None else _load_payload(logit_path, doc_ids, "logit")
    return SampleSet.build(taxonomy, records, features, logits)

