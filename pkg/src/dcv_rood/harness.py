"""Experiment orchestration: benchmark-truth repetitions, dual-CV experiments, comparison.

Output layout under ``output_dir``::

    config.resolved.json     config as run (paths absolute)
    ledger.jsonl             one JSON record per completed unit (single writer)
    warnings.log             regenerated from the ledger after every run
    truth/rep_XXX.csv        per-repetition metric rows
    truth/convergence.csv    running means and window deltas
    dcv/exp_XX/folds_<pair>_{id,ood}.json, dcv/exp_XX/metrics.csv
    compare/...              significance matrices, fidelity and methodwise tables

Seeds are domain separated: repetition ``r`` of the truth regime uses
``hash64(seed, "truth", r)`` and experiment ``e`` uses ``hash64(seed, "dcv", e)``.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detectors import (
    ScoreTable,
    ebo_scores,
    fit_mds,
    gen_scores,
    knn_scores,
    load_external_scores,
    mds_scores,
)
from .errors import (
    ConfigError,
    ConvergenceWarning,
    DetectorMismatch,
    DimensionMismatch,
    ValidationError,
)
from .metrics import METRIC_NAMES, evaluate_round, metric_row, read_metric_csv, write_metric_csv
from .rng import SplitMix64, hash64
from .splitter import (
    EvaluationRound,
    SplitSpec,
    assemble_rounds,
    build_folds_flat,
    build_folds_hierarchical,
    select_id_ood_split,
    write_folds,
)
from .stats import (
    FidelityReport,
    MethodwiseTable,
    ResultVector,
    SignificanceMatrix,
    format_counts_text,
    format_matrix_text,
    hit_error_rates,
    methodwise_comparison,
    pairwise_matrix,
    write_matrix_csv,
    write_tests_csv,
)
from .taxonomy import SampleSet, load_sample_set

SCORERS = ("ebo", "gen", "knn", "mds", "external")
GRANULARITIES = ("pair_mean", "per_round")
LEDGER_NAME = "ledger.jsonl"
WARNINGS_NAME = "warnings.log"
CONFIG_COPY = "config.resolved.json"


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DatasetRef:
    name: str
    manifest: str
    features: Optional[str] = None
    logits: Optional[str] = None


@dataclass(frozen=True)
class PairConfig:
    name: str
    id: Optional[DatasetRef] = None
    ood: Optional[DatasetRef] = None
    hierarchical: Optional[DatasetRef] = None
    p: Optional[float] = None

    @property
    def is_hierarchical(self) -> bool:
        return self.hierarchical is not None

    @property
    def id_name(self) -> str:
        return f"{self.hierarchical.name}-ID" if self.is_hierarchical else self.id.name

    @property
    def ood_name(self) -> str:
        return f"{self.hierarchical.name}-OOD" if self.is_hierarchical else self.ood.name


@dataclass(frozen=True)
class DetectorConfig:
    name: str
    scorer: str
    params: dict = field(default_factory=dict)
    noise: float = 0.0


@dataclass
class ExperimentConfig:
    dataset_pairs: list
    detectors: list
    k: int = 5
    e_runs: int = 10
    r_truth: int = 100
    seed: int = 0
    alphas: tuple = (0.1, 0.05, 0.01)
    output_dir: str = "run"
    alpha_normality: float = 0.05
    context_granularity: str = "pair_mean"
    mwu_mode: str = "auto"
    welch: bool = False
    convergence_window: int = 10
    convergence_threshold: float = 0.005
    truth_test_fraction: Optional[float] = None
    truth_ood_test_fraction: Optional[float] = None
    truth_seed_list: Optional[list] = None
    id_fold_method: str = "stratified"

    def __post_init__(self):
        self.validate_values()

    def validate_values(self) -> None:
        if not isinstance(self.k, int) or self.k < 2:
            raise ConfigError(f"k must be an integer >= 2, got {self.k!r}")
        if not isinstance(self.e_runs, int) or self.e_runs < 1:
            raise ConfigError(f"e_runs must be >= 1, got {self.e_runs!r}")
        if not isinstance(self.r_truth, int) or self.r_truth < 1:
            raise ConfigError(f"r_truth must be >= 1, got {self.r_truth!r}")
        if not self.dataset_pairs:
            raise ConfigError("no dataset pairs configured")
        if not self.detectors:
            raise ConfigError("no detectors configured")
        names = [d.name for d in self.detectors]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate detector names: {names}")
        pairs = [p.name for p in self.dataset_pairs]
        if len(set(pairs)) != len(pairs):
            raise ConfigError(f"duplicate pair names: {pairs}")
        contexts = [(p.id_name, p.ood_name) for p in self.dataset_pairs]
        if len(set(contexts)) != len(contexts):
            raise ConfigError("two pairs share the same (id, ood) dataset names")
        for d in self.detectors:
            if d.scorer not in SCORERS:
                raise ConfigError(f"detector {d.name!r}: unknown scorer {d.scorer!r}")
            if d.noise < 0 or not math.isfinite(d.noise):
                raise ConfigError(f"detector {d.name!r}: noise must be finite and >= 0")
            if d.scorer == "external" and "path" not in d.params:
                raise ConfigError(f"detector {d.name!r}: external scorer needs a 'path' template")
        for p in self.dataset_pairs:
            if p.is_hierarchical and p.p is None:
                raise ConfigError(f"pair {p.name!r}: hierarchical entries need 'p'")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError(f"alphas must lie in (0, 1), got {self.alphas}")
        if self.context_granularity not in GRANULARITIES:
            raise ConfigError(f"context_granularity must be one of {GRANULARITIES}")
        if self.mwu_mode not in ("auto", "exact", "approx"):
            raise ConfigError(f"mwu_mode must be auto, exact or approx, got {self.mwu_mode!r}")
        if self.convergence_window < 1:
            raise ConfigError("convergence_window must be >= 1")
        for name in ("truth_test_fraction", "truth_ood_test_fraction"):
            v = getattr(self, name)
            if v is not None and not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.truth_seed_list is not None and len(self.truth_seed_list) != self.r_truth:
            raise ConfigError(f"truth_seed_list has {len(self.truth_seed_list)} seeds but r_truth={self.r_truth}")
        if self.id_fold_method not in ("stratified", "random"):
            raise ConfigError(f"id_fold_method must be stratified or random, got {self.id_fold_method!r}")

    def validate_files(self) -> None:
        for p in self.dataset_pairs:
            for ref in (p.id, p.ood, p.hierarchical):
                if ref is None:
                    continue
                for path in (ref.manifest, ref.features, ref.logits):
                    if path is not None and not Path(path).is_file():
                        raise ConfigError(f"pair {p.name!r}: missing file {path}")

    @property
    def id_test_fraction(self) -> Fraction:
        v = self.truth_test_fraction
        return Fraction(1, self.k) if v is None else Fraction(repr(float(v)))

    @property
    def ood_test_fraction(self) -> Fraction:
        v = self.truth_ood_test_fraction
        return Fraction(1, self.k) if v is None else Fraction(repr(float(v)))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["alphas"] = list(self.alphas)
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        base = Path(base_dir)
        doc = dict(doc)
        try:
            pairs = [_pair_from_dict(p, base) for p in doc.pop("dataset_pairs")]
            dets = [_detector_from_dict(d) for d in doc.pop("detectors")]
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from exc
        known = {f for f in cls.__dataclass_fields__} - {"dataset_pairs", "detectors"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "output_dir" in doc:
            doc["output_dir"] = str(_resolve(base, doc["output_dir"]))
        else:
            doc["output_dir"] = str(base / "run")
        if "alphas" in doc:
            doc["alphas"] = tuple(float(a) for a in doc["alphas"])
        return cls(pairs, dets, **doc)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            apply_override(doc, item)
        cfg = cls.from_dict(doc, path.parent)
        cfg.validate_files()
        return cfg


def _resolve(base: Path, p) -> Optional[str]:
    if p is None:
        return None
    p = Path(p)
    return str(p if p.is_absolute() else (base / p).resolve())


def _ref_from_dict(d: dict, base: Path) -> DatasetRef:
    if "manifest" not in d:
        raise ConfigError(f"dataset entry {d!r} has no manifest")
    name = d.get("name") or Path(d["manifest"]).stem
    return DatasetRef(name, _resolve(base, d["manifest"]), _resolve(base, d.get("features")),
                      _resolve(base, d.get("logits")))


def _pair_from_dict(d: dict, base: Path) -> PairConfig:
    if "hierarchical" in d:
        ref = _ref_from_dict(d["hierarchical"], base)
        return PairConfig(d.get("name", ref.name), hierarchical=ref, p=float(d["p"]) if "p" in d else None)
    if "id" not in d or "ood" not in d:
        raise ConfigError(f"pair {d.get('name')!r} needs 'id' and 'ood' (or 'hierarchical')")
    i, o = _ref_from_dict(d["id"], base), _ref_from_dict(d["ood"], base)
    return PairConfig(d.get("name", f"{i.name}|{o.name}"), id=i, ood=o)


def _detector_from_dict(d: dict) -> DetectorConfig:
    d = dict(d)
    try:
        name = d.pop("name")
    except KeyError as exc:
        raise ConfigError(f"detector entry {d!r} has no name") from exc
    scorer = d.pop("scorer", name)
    noise = float(d.pop("noise", 0.0))
    params = d.pop("params", {})
    params.update(d)
    return DetectorConfig(name, scorer, params, noise)


def apply_override(doc: dict, item: str) -> None:
    """``key=value`` or ``a.b.0.c=value``; the value is parsed as JSON when it can be."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    try:
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        if isinstance(node, list):
            node[int(parts[-1])] = value
        else:
            node[parts[-1]] = value
    except (IndexError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot apply override {item!r}: {exc}") from exc


# ---------------------------------------------------------------- data


@dataclass
class PairData:
    """One ID/OOD pair with its feature and logit rows stacked (ID rows first)."""

    config: PairConfig
    id_set: SampleSet
    ood_set: SampleSet
    features: Optional[np.ndarray]
    logits: Optional[np.ndarray]
    row: dict
    label: dict
    warnings: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.config.name

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.row[s] for s in ids), dtype=np.int64, count=len(ids))


def _stack(a: Optional[np.ndarray], b: Optional[np.ndarray], what: str, pair: str) -> Optional[np.ndarray]:
    if a is None or b is None:
        return None
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"pair {pair!r}: ID {what} have {a.shape[1]} columns, OOD {b.shape[1]}")
    return np.vstack([a, b])


def load_pair(pc: PairConfig, split_seed: int, cache: Optional[dict] = None) -> PairData:
    """Load a pair; hierarchical entries are split into ID/OOD once, with ``split_seed``."""
    cache = {} if cache is None else cache

    def get(ref: DatasetRef) -> SampleSet:
        key = (ref.manifest, ref.features, ref.logits)
        if key not in cache:
            cache[key] = load_sample_set(ref.manifest, ref.features, ref.logits)
        return cache[key]

    notes: list[str] = []
    if pc.is_hierarchical:
        h = get(pc.hierarchical)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            d_id, d_ood = select_id_ood_split(h, SplitSpec(pc.p, split_seed))
        notes.extend(f"{w.category.__name__}: {w.message}" for w in caught)
        lv = h.taxonomy.classification_level
        logits = None
        if h.logits is not None:
            all_classes = sorted(h.taxonomy.ids_at(lv))
            if h.logits.shape[1] != len(all_classes):
                raise DimensionMismatch(f"pair {pc.name!r}: logits have {h.logits.shape[1]} columns "
                                        f"but the taxonomy has {len(all_classes)} classes at level {lv}")
            keep = [i for i, c in enumerate(all_classes) if c in set(d_id.labels(lv))]
            logits = np.vstack([d_id.logits[:, keep], d_ood.logits[:, keep]])
        features = _stack(d_id.features, d_ood.features, "features", pc.name)
    else:
        d_id, d_ood = get(pc.id), get(pc.ood)
        features = _stack(d_id.features, d_ood.features, "features", pc.name)
        logits = _stack(d_id.logits, d_ood.logits, "logits", pc.name)
        lv = d_id.taxonomy.classification_level
    ids = d_id.ids + d_ood.ids
    row = {s: i for i, s in enumerate(ids)}
    if len(row) != len(ids):
        raise ValidationError(f"pair {pc.name!r}: a sample id occurs in both the ID and OOD data")
    label = dict(zip(d_id.ids, d_id.labels(lv)))
    return PairData(pc, d_id, d_ood, features, logits, row, label, notes)


def load_pairs(cfg: ExperimentConfig) -> list[PairData]:
    cache: dict = {}
    return [load_pair(pc, hash64(cfg.seed, f"idood/{pc.name}", 0), cache) for pc in cfg.dataset_pairs]


# ---------------------------------------------------------------- scoring


def detector_noise(cfg: ExperimentConfig, pair: PairData, det: DetectorConfig) -> Optional[np.ndarray]:
    """Fixed standard-normal perturbation per (detector, sample) for synthetic noisy detectors."""
    if det.noise == 0:
        return None
    from .synth import normals

    rng = SplitMix64(hash64(cfg.seed, f"noise/{det.name}/{pair.name}", 0))
    return normals(rng, len(pair.row))


def _need(a, what: str, det: DetectorConfig, pair: PairData):
    if a is None:
        raise ConfigError(f"detector {det.name!r} needs {what} for pair {pair.name!r}")
    return a


def _raw_scores(det: DetectorConfig, pair: PairData, rnd: EvaluationRound, test_rows: np.ndarray) -> np.ndarray:
    p = det.params
    if det.scorer == "ebo":
        return ebo_scores(_need(pair.logits, "logits", det, pair)[test_rows])
    if det.scorer == "gen":
        return gen_scores(_need(pair.logits, "logits", det, pair)[test_rows],
                          gamma=p.get("gamma", 0.1), top_m=p.get("top_m"))
    x = _need(pair.features, "features", det, pair)
    train_rows = pair.rows(rnd.train_id)
    if det.scorer == "knn":
        return knn_scores(x[train_rows], x[test_rows], p.get("k_neighbors"))
    if det.scorer == "mds":
        model = fit_mds(x[train_rows], [pair.label[s] for s in rnd.train_id])
        return mds_scores(model, x[test_rows])
    raise ConfigError(f"no built-in scorer {det.scorer!r}")


def score_round(cfg: ExperimentConfig, pair: PairData, rnd: EvaluationRound, regime: str, run: int,
                noise: dict) -> list[ScoreTable]:
    test = list(rnd.test_id) + list(rnd.test_ood)
    test_rows = pair.rows(test)
    clean: dict = {}
    tables = []
    for det in cfg.detectors:
        if det.scorer == "external":
            path = str(det.params["path"]).format(regime=regime, run=run, round=rnd.round_index,
                                                  pair=pair.name, detector=det.name)
            tables.append(load_external_scores(path, rnd, det.name))
            continue
        key = (det.scorer, json.dumps(det.params, sort_keys=True))
        if key not in clean:
            clean[key] = _raw_scores(det, pair, rnd, test_rows)
        s = clean[key]
        z = noise.get(det.name)
        if z is not None:
            s = s + det.noise * float(np.std(s)) * z[test_rows]
        tables.append(ScoreTable.from_arrays(det.name, rnd.round_index, test, s, noise=det.noise, **det.params))
    return tables


def evaluate_pair_rounds(cfg: ExperimentConfig, pair: PairData, rounds: Sequence[EvaluationRound],
                         regime: str, run: int, noise: dict) -> list[dict]:
    rows = []
    for rnd in rounds:
        for table in score_round(cfg, pair, rnd, regime, run, noise):
            report = evaluate_round(table, rnd)
            rows.append(metric_row(table.detector_name, pair.config.id_name, pair.config.ood_name,
                                   rnd.round_index, report))
    return rows


# ---------------------------------------------------------------- splits


def _take_fraction(n: int, frac: Fraction) -> int:
    """``round(frac * n)`` (halves up), kept within ``[1, n - 1]`` when ``n >= 2``."""
    m = math.floor(frac * n + Fraction(1, 2))
    return min(max(m, 1), n - 1) if n >= 2 else n


def truth_round(cfg: ExperimentConfig, pair: PairData, rep: int, seed: int) -> EvaluationRound:
    """One random split: simple random ID test sample, disjoint random OOD test classes."""
    rng = SplitMix64(seed)
    ids = pair.id_set.ids
    test_id = set(rng.shuffle(list(ids))[:_take_fraction(len(ids), cfg.id_test_fraction)])
    lv = pair.ood_set.taxonomy.classification_level
    classes = pair.ood_set.classes_present(lv)
    test_cls = set(rng.shuffle(list(classes))[:_take_fraction(len(classes), cfg.ood_test_fraction)])
    ood_labels = pair.ood_set.labels(lv)
    test_ood = [s for s, c in zip(pair.ood_set.ids, ood_labels) if c in test_cls]
    train_ood = [s for s, c in zip(pair.ood_set.ids, ood_labels) if c not in test_cls]
    return EvaluationRound(rep, tuple(s for s in ids if s not in test_id), tuple(sorted(test_id)),
                           tuple(train_ood), tuple(test_ood))


def truth_seed(cfg: ExperimentConfig, rep: int) -> int:
    if cfg.truth_seed_list is not None:
        return int(cfg.truth_seed_list[rep])
    return hash64(cfg.seed, "truth", rep)


def dcv_folds(cfg: ExperimentConfig, pair: PairData, seed: int):
    if pair.config.is_hierarchical:
        return build_folds_hierarchical(pair.id_set, pair.ood_set, cfg.k, seed)
    return build_folds_flat(pair.id_set, pair.ood_set, cfg.k, seed, cfg.id_fold_method)


# ---------------------------------------------------------------- ledger


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunLedger:
    """Append-only JSONL record of completed units; every output file is listed once."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / LEDGER_NAME
        self.records: list[dict] = []
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.records = [json.loads(line) for line in fh if line.strip()]

    def has_regime(self, regime: str) -> bool:
        return any(r["regime"] == regime for r in self.records)

    def find(self, regime: str, index) -> Optional[dict]:
        for r in self.records:
            if r["regime"] == regime and r.get("index") == index:
                return r
        return None

    def complete(self, regime: str, index) -> bool:
        rec = self.find(regime, index)
        return rec is not None and all((self.out_dir / f).exists() for f in rec["files"])

    def append(self, record: dict) -> None:
        record = {**record, "timestamp": _now()}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.records.append(record)

    def referenced(self) -> list[str]:
        return [f for r in self.records for f in r["files"]]

    def write_warnings(self) -> None:
        order = {"setup": 0, "truth": 1, "dcv": 2, "compare": 3}
        lines = []
        for r in sorted(self.records, key=lambda r: (order.get(r["regime"], 9), r.get("index") or 0)):
            tag = r["regime"] if r.get("index") is None else f"{r['regime']}[{r['index']}]"
            lines.extend(f"{tag} {w}" for w in r.get("warnings", []))
        (self.out_dir / WARNINGS_NAME).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def open_run(cfg: ExperimentConfig, regime: str, resume: bool) -> RunLedger:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out)
    if ledger.has_regime(regime) and not resume:
        raise ConfigError(f"{out} already holds {regime} results; pass --resume or use a new output_dir")
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    copy_path = out / CONFIG_COPY
    setup = ledger.find("setup", None)
    if setup is None:
        copy_path.write_text(text, encoding="utf-8")
        ledger.append({"regime": "setup", "index": None, "seed": cfg.seed,
                       "files": [CONFIG_COPY, WARNINGS_NAME], "warnings": []})
        ledger.write_warnings()
    elif copy_path.read_text(encoding="utf-8") != text:
        raise ConfigError(f"{out} was created with a different configuration")
    return ledger


def worker_count() -> int:
    raw = os.environ.get("DCVROOD_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise ConfigError(f"DCVROOD_THREADS must be an integer, got {raw!r}") from exc
    return os.cpu_count() or 1


def _run_units(indices: Sequence[int], work, emit) -> None:
    """Compute units on a bounded pool; emit results strictly in index order."""
    n = worker_count()
    if n == 1 or len(indices) <= 1:
        for i in indices:
            emit(i, work(i))
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [(i, pool.submit(work, i)) for i in indices]
        for i, fut in futures:
            emit(i, fut.result())


# ---------------------------------------------------------------- aggregation


def context_name(row: dict) -> str:
    return f"{row['id_dataset']}|{row['ood_dataset']}"


def result_vectors(rows: Sequence[dict], metric: str, detectors: Optional[Sequence[str]] = None,
                   granularity: str = "pair_mean") -> list[ResultVector]:
    """Per-detector observation vectors over contexts.

    ``pair_mean``: one value per dataset pair, the mean over that pair's rounds
    (summed in round order). ``per_round``: one value per (pair, round).
    """
    if granularity not in GRANULARITIES:
        raise ConfigError(f"unknown granularity {granularity!r}")
    if detectors is None:
        detectors = list(dict.fromkeys(r["detector"] for r in rows))
    contexts = list(dict.fromkeys(context_name(r) for r in rows))
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r["detector"], context_name(r)), []).append((r["round"], r[metric]))
    out = []
    for det in detectors:
        values, labels = [], []
        for ctx in contexts:
            cell = sorted(grouped.get((det, ctx), []))
            if not cell:
                raise DetectorMismatch(f"detector {det!r} has no rows for context {ctx!r}")
            if granularity == "pair_mean":
                values.append(math.fsum(v for _, v in cell) / len(cell))
                labels.append(ctx)
            else:
                values.extend(v for _, v in cell)
                labels.extend(f"{ctx}#{i}" for i, _ in cell)
        out.append(ResultVector(det, metric, np.array(values), tuple(labels)))
    return out


@dataclass
class ConvergenceTrace:
    metric: str
    window: int
    threshold: float
    detectors: tuple
    running_means: np.ndarray  # (R, n_detectors)
    trace: np.ndarray          # (R,)

    @property
    def window_delta(self) -> float:
        """Largest trace value over the final window."""
        return float(self.trace[-self.window:].max())

    @property
    def converged(self) -> bool:
        return self.window_delta < self.threshold


def convergence_trace(rep_rows: Sequence[Sequence[dict]], metric: str, detectors: Sequence[str],
                      window: int = 10, threshold: float = 0.005) -> ConvergenceTrace:
    """Running means of the per-repetition (pair-averaged) metric and ``max_det |mu_r - mu_{r-w}|``."""
    per_rep = np.empty((len(rep_rows), len(detectors)))
    for r, rows in enumerate(rep_rows):
        for j, det in enumerate(detectors):
            vals = [row[metric] for row in rows if row["detector"] == det]
            per_rep[r, j] = math.fsum(vals) / len(vals)
    # incremental update keeps a constant sequence's mean exactly constant
    means = np.empty_like(per_rep)
    mu = np.zeros(len(detectors))
    for r in range(len(per_rep)):
        mu = mu + (per_rep[r] - mu) / (r + 1)
        means[r] = mu
    trace = np.array([np.max(np.abs(means[r] - means[max(r - window, 0)])) for r in range(len(means))])
    return ConvergenceTrace(metric, window, threshold, tuple(detectors), means, trace)


def write_convergence_csv(path, traces: Sequence[ConvergenceTrace]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dets = traces[0].detectors
        w.writerow(["metric", "r", "trace", *dets])
        for t in traces:
            for r in range(len(t.trace)):
                w.writerow([t.metric, r + 1, repr(float(t.trace[r])), *(repr(float(v)) for v in t.running_means[r])])


# ---------------------------------------------------------------- regimes


@dataclass
class TruthResults:
    rows: list
    rep_rows: list
    traces: dict

    def vectors(self, metric: str, detectors: Sequence[str], granularity: str = "pair_mean"):
        return result_vectors(self.rows, metric, detectors, granularity)


@dataclass
class DcvResults:
    runs: list  # list of per-experiment row lists

    def vectors(self, metric: str, detectors: Sequence[str], granularity: str = "pair_mean"):
        return [result_vectors(rows, metric, detectors, granularity) for rows in self.runs]


def _noise_table(cfg: ExperimentConfig, pairs: Sequence[PairData]) -> dict:
    return {p.name: {d.name: detector_noise(cfg, p, d) for d in cfg.detectors} for p in pairs}


def run_benchmark_truth(cfg: ExperimentConfig, resume: bool = False,
                        pairs: Optional[list] = None) -> TruthResults:
    ledger = open_run(cfg, "truth", resume)
    out = Path(cfg.output_dir)
    (out / "truth").mkdir(exist_ok=True)
    pairs = load_pairs(cfg) if pairs is None else pairs
    noise = _noise_table(cfg, pairs)
    pair_notes = [f"{p.name}: {w}" for p in pairs for w in p.warnings]

    def work(rep: int):
        t0 = time.perf_counter()
        seed = truth_seed(cfg, rep)
        rows = []
        for pair in pairs:
            rnd = truth_round(cfg, pair, rep, hash64(seed, f"pair/{pair.name}", 0))
            rows.extend(evaluate_pair_rounds(cfg, pair, [rnd], "truth", rep, noise[pair.name]))
        return seed, rows, time.perf_counter() - t0

    def emit(rep: int, result) -> None:
        seed, rows, wall = result
        rel = f"truth/rep_{rep:03d}.csv"
        write_metric_csv(out / rel, rows)
        ledger.append({"regime": "truth", "index": rep, "seed": seed, "files": [rel],
                       "warnings": pair_notes if rep == 0 else [], "wall_time_s": round(wall, 4)})

    todo = [r for r in range(cfg.r_truth) if not (resume and ledger.complete("truth", r))]
    _run_units(todo, work, emit)

    rep_rows = [read_metric_csv(out / f"truth/rep_{r:03d}.csv") for r in range(cfg.r_truth)]
    names = [d.name for d in cfg.detectors]
    traces = {m: convergence_trace(rep_rows, m, names, cfg.convergence_window, cfg.convergence_threshold)
              for m in METRIC_NAMES}
    messages = [f"{m} window delta {t.window_delta:.6g} >= {t.threshold:g} after {cfg.r_truth} repetitions"
                for m, t in traces.items() if not t.converged]
    for msg in messages:
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    notes = [f"ConvergenceWarning: {msg}" for msg in messages]
    if not (resume and ledger.complete("truth-convergence", None)):
        write_convergence_csv(out / "truth/convergence.csv", list(traces.values()))
        if ledger.find("truth-convergence", None) is None:
            ledger.append({"regime": "truth-convergence", "index": None, "seed": cfg.seed,
                           "files": ["truth/convergence.csv"], "warnings": notes})
    ledger.write_warnings()
    return TruthResults([r for rows in rep_rows for r in rows], rep_rows, traces)


def run_dcv_rood(cfg: ExperimentConfig, resume: bool = False, pairs: Optional[list] = None) -> DcvResults:
    ledger = open_run(cfg, "dcv", resume)
    out = Path(cfg.output_dir)
    pairs = load_pairs(cfg) if pairs is None else pairs
    noise = _noise_table(cfg, pairs)
    pair_notes = [f"{p.name}: {w}" for p in pairs for w in p.warnings]

    def work(e: int):
        t0 = time.perf_counter()
        seed_e = hash64(cfg.seed, "dcv", e)
        rows, folds, notes = [], [], []
        for pair in pairs:
            f_id, f_ood = dcv_folds(cfg, pair, hash64(seed_e, f"pair/{pair.name}", 0))
            folds.append((pair.name, f_id, f_ood))
            notes.extend(f"{pair.name}: {w}" for w in f_id.warnings + f_ood.warnings)
            rows.extend(evaluate_pair_rounds(cfg, pair, assemble_rounds(f_id, f_ood), "dcv", e,
                                             noise[pair.name]))
        return seed_e, rows, folds, notes, time.perf_counter() - t0

    def emit(e: int, result) -> None:
        seed_e, rows, folds, notes, wall = result
        sub = Path("dcv") / f"exp_{e:02d}"
        (out / sub).mkdir(parents=True, exist_ok=True)
        files = []
        for name, f_id, f_ood in folds:
            for side, f in (("id", f_id), ("ood", f_ood)):
                rel = (sub / f"folds_{name}_{side}.json").as_posix()
                write_folds(f, out / rel)
                files.append(rel)
        rel = (sub / "metrics.csv").as_posix()
        write_metric_csv(out / rel, rows)
        files.append(rel)
        ledger.append({"regime": "dcv", "index": e, "seed": seed_e, "files": files,
                       "warnings": (pair_notes if e == 0 else []) + notes, "wall_time_s": round(wall, 4)})

    todo = [e for e in range(cfg.e_runs) if not (resume and ledger.complete("dcv", e))]
    _run_units(todo, work, emit)
    ledger.write_warnings()
    return DcvResults([read_metric_csv(out / f"dcv/exp_{e:02d}/metrics.csv") for e in range(cfg.e_runs)])


def read_truth_dir(path) -> list[dict]:
    """Rows of every ``rep_*.csv`` under ``path`` (an output dir or its ``truth/`` subdir)."""
    path = Path(path)
    if (path / "truth").is_dir():
        path = path / "truth"
    files = sorted(path.glob("rep_*.csv"))
    if not files:
        raise ConfigError(f"no truth repetitions under {path}")
    return [row for f in files for row in read_metric_csv(f)]


def read_dcv_dir(path) -> list[list[dict]]:
    path = Path(path)
    if (path / "dcv").is_dir():
        path = path / "dcv"
    files = sorted(path.glob("exp_*/metrics.csv"))
    if not files:
        raise ConfigError(f"no DCV experiments under {path}")
    return [read_metric_csv(f) for f in files]


# ---------------------------------------------------------------- comparison


@dataclass
class Comparison:
    metric: str
    benchmark: SignificanceMatrix
    runs: list
    reports: list          # one FidelityReport per alpha
    methodwise: MethodwiseTable


def compare_matrices(benchmark: SignificanceMatrix, runs: Sequence[SignificanceMatrix],
                     alphas: Sequence[float], metric: str = "") -> list[FidelityReport]:
    return [hit_error_rates(benchmark, runs, a, metric) for a in alphas]


def compare(truth_rows: Sequence[dict], dcv_runs: Sequence[Sequence[dict]], alphas: Sequence[float],
            metrics: Sequence[str] = METRIC_NAMES, detectors: Optional[Sequence[str]] = None,
            granularity: str = "pair_mean", alpha_normality: float = 0.05, mwu_mode: str = "auto",
            welch: bool = False) -> list[Comparison]:
    truth_dets = list(dict.fromkeys(r["detector"] for r in truth_rows))
    for run in dcv_runs:
        run_dets = list(dict.fromkeys(r["detector"] for r in run))
        if sorted(run_dets) != sorted(truth_dets):
            raise DetectorMismatch(f"truth detectors {truth_dets} but a DCV run has {run_dets}")
    dets = truth_dets if detectors is None else list(detectors)
    out = []
    for metric in metrics:
        bench_vecs = result_vectors(truth_rows, metric, dets, granularity)
        bench = pairwise_matrix(bench_vecs, alpha_normality, mwu_mode, welch)
        run_vecs = [result_vectors(run, metric, dets, granularity) for run in dcv_runs]
        runs = [pairwise_matrix(v, alpha_normality, mwu_mode, welch) for v in run_vecs]
        reports = compare_matrices(bench, runs, alphas, metric)
        mw = methodwise_comparison(bench_vecs, run_vecs, alphas, mwu_mode)
        out.append(Comparison(metric, bench, runs, reports, mw))
    return out


def _rate_json(v: Optional[float]):
    return None if v is None else float(v)


def write_comparison(out_dir, comparisons: Sequence[Comparison], granularity: str = "pair_mean") -> list[str]:
    """Write every comparison table under ``out_dir``; returns the written paths (relative)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: list[str] = []

    def put(name: str) -> Path:
        files.append(name)
        return out_dir / name

    fidelity = []
    for c in comparisons:
        write_matrix_csv(put(f"significance_{c.metric}_truth.csv"), c.benchmark)
        write_tests_csv(put(f"tests_{c.metric}_truth.csv"), c.benchmark)
        text = [f"# {c.metric} benchmark truth", format_matrix_text(c.benchmark)]
        for e, m in enumerate(c.runs):
            write_matrix_csv(put(f"significance_{c.metric}_cv{e + 1:02d}.csv"), m)
            text += [f"# {c.metric} CV run {e + 1}", format_matrix_text(m)]
        put(f"significance_{c.metric}.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
        counts = []
        for rep in c.reports:
            counts += [f"# {c.metric} alpha={rep.alpha:g}", format_counts_text(rep, c.benchmark.detectors)]
            fidelity.append({
                "metric": c.metric, "alpha": rep.alpha, "runs": rep.runs,
                "hit_rate": _rate_json(rep.hit_rate), "error_rate": _rate_json(rep.error_rate),
                "benchmark_pairs": rep.benchmark_pairs, "other_pairs": rep.other_pairs,
                "context_granularity": granularity,
            })
        put(f"counts_{c.metric}.txt").write_text("\n".join(counts) + "\n", encoding="utf-8")

    with open(put("fidelity.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "alpha", "runs", "hit_rate", "error_rate", "benchmark_pairs", "other_pairs",
                    "context_granularity"])
        for f in fidelity:
            w.writerow([f["metric"], repr(f["alpha"]), f["runs"],
                        "null" if f["hit_rate"] is None else repr(f["hit_rate"]),
                        "null" if f["error_rate"] is None else repr(f["error_rate"]),
                        f["benchmark_pairs"], f["other_pairs"], granularity])
    put("fidelity.json").write_text(json.dumps(fidelity, indent=2) + "\n", encoding="utf-8")

    with open(put("methodwise.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        alphas = comparisons[0].methodwise.alphas if comparisons else ()
        w.writerow(["metric", "run", "detector", "p_value", *(f"flag_alpha={a:g}" for a in alphas)])
        for c in comparisons:
            mw = c.methodwise
            for r in range(mw.p_values.shape[0]):
                for j, det in enumerate(mw.detectors):
                    p = float(mw.p_values[r, j])
                    w.writerow([c.metric, r + 1, det, repr(p), *(int(p <= a) for a in alphas)])
    summary = [f"{c.metric} alpha={a:g}: {c.methodwise.cell(a)}" for c in comparisons
               for a in c.methodwise.alphas]
    put("methodwise.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    return files


def run_compare(cfg: ExperimentConfig, truth: Optional[TruthResults] = None, dcv: Optional[DcvResults] = None,
                resume: bool = False) -> list[Comparison]:
    """Compare the two regimes of ``cfg.output_dir`` and record the tables in its ledger."""
    ledger = open_run(cfg, "compare", resume)
    out = Path(cfg.output_dir)
    truth_rows = truth.rows if truth is not None else read_truth_dir(out)
    dcv_runs = dcv.runs if dcv is not None else read_dcv_dir(out)
    comps = compare(truth_rows, dcv_runs, cfg.alphas, detectors=[d.name for d in cfg.detectors],
                    granularity=cfg.context_granularity, alpha_normality=cfg.alpha_normality,
                    mwu_mode=cfg.mwu_mode, welch=cfg.welch)
    if resume and ledger.complete("compare", None):
        return comps
    t0 = time.perf_counter()
    files = write_comparison(out / "compare", comps, cfg.context_granularity)
    if ledger.find("compare", None) is None:
        ledger.append({"regime": "compare", "index": None, "seed": cfg.seed,
                       "files": [f"compare/{f}" for f in files], "warnings": [],
                       "wall_time_s": round(time.perf_counter() - t0, 4)})
    ledger.write_warnings()
    return comps


def run_all(cfg: ExperimentConfig, resume: bool = False) -> tuple[TruthResults, DcvResults, list[Comparison]]:
    pairs = load_pairs(cfg)
    truth = run_benchmark_truth(cfg, resume, pairs)
    dcv = run_dcv_rood(cfg, resume, pairs)
    return truth, dcv, run_compare(cfg, truth, dcv, resume)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = copy.copy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    new.validate_values()
    return new
