"""Seeded synthetic fixtures for desk-scale runs.

Each ID family is a set of unit-variance Gaussian classes whose means sit on
a sphere of radius ``class_radius`` around an offset center (features stay
away from the origin, as post-activation embeddings do). An OOD family at
separation ``s`` reuses the ID class geometry with every class mean moved by
exactly ``s`` (Euclidean, in noise-sigma units), half toward the ID centroid
and half along a random orthogonal direction, so ``s = 0`` reproduces the ID
distribution.

Logits come from a fixed "pretrained" Gaussian classifier over the ID
classes: ``logit_c(x) = -||x - mu_c||^2 / 2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import SplitMix64, hash64
from .taxonomy import (
    ClassNode,
    ClassTaxonomy,
    SampleRecord,
    SampleSet,
    write_manifest,
    write_matrix,
)

DEFAULT_DIM = 16


def normals(rng: SplitMix64, n: int) -> np.ndarray:
    """``n`` standard normals from a SplitMix64 stream (Box-Muller, both branches)."""
    m = (n + 1) // 2
    u1 = np.array([1.0 - rng.uniform() for _ in range(m)])
    u2 = np.array([rng.uniform() for _ in range(m)])
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class GaussianFamily:
    class_ids: tuple[str, ...]
    means: np.ndarray


def id_family(prefix: str, n_classes: int, seed: int, dim: int = DEFAULT_DIM,
              class_radius: float = 6.0, center_norm: float = 10.0) -> GaussianFamily:
    rng = SplitMix64(seed)
    center = center_norm * _unit(normals(rng, dim))
    means = np.array([center + class_radius * _unit(normals(rng, dim)) for _ in range(n_classes)])
    width = len(str(n_classes - 1))
    return GaussianFamily(tuple(f"{prefix}{i:0{width}d}" for i in range(n_classes)), means)


def shifted_family(base: GaussianFamily, prefix: str, separation: float, seed: int) -> GaussianFamily:
    """Same class layout as ``base`` with each mean moved by ``separation``."""
    rng = SplitMix64(seed)
    centroid = base.means.mean(axis=0)
    moved = []
    for mu in base.means:
        inward = _unit(centroid - mu)
        side = normals(rng, len(mu))
        side = _unit(side - side.dot(inward) * inward)
        moved.append(mu + separation * _unit(inward + side))
    width = len(str(len(base.means) - 1))
    return GaussianFamily(tuple(f"{prefix}{i:0{width}d}" for i in range(len(moved))), np.array(moved))


def draw(family: GaussianFamily, n_per_class: int, seed: int) -> tuple[list[str], list[str], np.ndarray]:
    """Sample ids, class labels and features (class-major order)."""
    rng = SplitMix64(seed)
    d = family.means.shape[1]
    ids, labels, rows = [], [], []
    for cls, mu in zip(family.class_ids, family.means):
        noise = normals(rng, n_per_class * d).reshape(n_per_class, d)
        rows.append(mu + noise)
        for i in range(n_per_class):
            ids.append(f"{cls}-{i:04d}")
            labels.append(cls)
    return ids, labels, np.vstack(rows)


def classifier_logits(features: np.ndarray, class_means: np.ndarray) -> np.ndarray:
    sq = ((features[:, None, :] - class_means[None, :, :]) ** 2).sum(axis=2)
    return -0.5 * sq


def flat_sample_set(family: GaussianFamily, n_per_class: int, seed: int,
                    id_means: np.ndarray) -> SampleSet:
    ids, labels, x = draw(family, n_per_class, seed)
    taxonomy = ClassTaxonomy.flat(family.class_ids)
    records = [SampleRecord(s, (c,)) for s, c in zip(ids, labels)]
    return SampleSet.build(taxonomy, records, x, classifier_logits(x, id_means))


def gaussian_pair(separation: float, n_per_class: int = 2000, n_classes: int = 10, seed: int = 0,
                  dim: int = DEFAULT_DIM, n_ood_classes: Optional[int] = None) -> tuple[SampleSet, SampleSet]:
    """ID family and an OOD family at ``separation`` (features and logits attached)."""
    fam = id_family("id", n_classes, hash64(seed, "family/id", 0), dim)
    ood = shifted_family(fam, "ood", separation, hash64(seed, "family/ood", 0))
    if n_ood_classes is not None:
        ood = GaussianFamily(ood.class_ids[:n_ood_classes], ood.means[:n_ood_classes])
    d_id = flat_sample_set(fam, n_per_class, hash64(seed, "draw/id", 0), fam.means)
    d_ood = flat_sample_set(ood, n_per_class, hash64(seed, "draw/ood", 0), fam.means)
    return d_id, d_ood


def hierarchical_sample_set(seed: int, n_super: int = 2, n_class: int = 5, n_sub: int = 5,
                            n_per_leaf: int = 12, dim: int = DEFAULT_DIM) -> SampleSet:
    """Three-level taxonomy (superclass > class > subclass), classification at the subclass level.

    Means nest: superclass centers far apart, classes around them, subclasses
    close to their siblings. Logits cover every subclass in canonical order.
    """
    rng = SplitMix64(seed)
    base = 10.0 * _unit(normals(rng, dim))
    nodes, leaf_means, leaf_paths = [], {}, {}
    for a in range(n_super):
        sa = f"S{a}"
        nodes.append(ClassNode(0, sa))
        mu_a = base + 8.0 * _unit(normals(rng, dim))
        for b in range(n_class):
            cb = f"S{a}C{b}"
            nodes.append(ClassNode(1, cb, sa))
            mu_b = mu_a + 5.0 * _unit(normals(rng, dim))
            for c in range(n_sub):
                leaf = f"S{a}C{b}L{c}"
                nodes.append(ClassNode(2, leaf, cb))
                leaf_means[leaf] = mu_b + 3.0 * _unit(normals(rng, dim))
                leaf_paths[leaf] = (sa, cb, leaf)
    taxonomy = ClassTaxonomy(("superclass", "class", "subclass"), frozenset(nodes), 2)
    leaves = sorted(leaf_means)
    means = np.array([leaf_means[l] for l in leaves])
    records, rows = [], []
    for leaf, mu in zip(leaves, means):
        x = mu + normals(rng, n_per_leaf * dim).reshape(n_per_leaf, dim)
        rows.append(x)
        records.extend(SampleRecord(f"{leaf}-{i:04d}", leaf_paths[leaf]) for i in range(n_per_leaf))
    x = np.vstack(rows)
    return SampleSet.build(taxonomy, records, x, classifier_logits(x, means))


# default desk-scale layout: (pair name, id family, separation)
FLAT_PAIRS = (
    ("A-near", "A", 2.0),
    ("A-mid", "A", 3.0),
    ("A-far", "A", 6.0),
    ("B-near", "B", 2.5),
    ("B-far", "B", 5.0),
)
SCORERS = ("ebo", "gen", "knn", "mds")
NOISE_LEVELS = (0.0, 1.0)


def detector_specs(noise_levels: Sequence[float] = NOISE_LEVELS, k_neighbors: int = 10) -> list[dict]:
    specs = []
    for level in noise_levels:
        for scorer in SCORERS:
            name = scorer if level == 0 else f"{scorer}~n{level:g}"
            spec = {"name": name, "scorer": scorer, "noise": level}
            if scorer == "knn":
                spec["k_neighbors"] = k_neighbors
            specs.append(spec)
    return specs


def _save(s: SampleSet, out: Path, stem: str) -> dict:
    write_manifest(s, out / f"{stem}.json")
    write_matrix(out / f"{stem}.features.bin", s.features)
    write_matrix(out / f"{stem}.logits.bin", s.logits)
    return {"name": stem, "manifest": f"{stem}.json", "features": f"{stem}.features.bin",
            "logits": f"{stem}.logits.bin"}


def write_synthetic_suite(out_dir, seed: int = 0, n_id_per_class: int = 50, n_ood_per_class: int = 30,
                          n_classes: int = 10, k: int = 5, e_runs: int = 10, r_truth: int = 100,
                          noise_levels: Sequence[float] = NOISE_LEVELS, p_hier: float = 0.4) -> Path:
    """Write manifests, payloads and a ready-to-run ``config.json``; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    families = {name: id_family(f"{name.lower()}", n_classes, hash64(seed, f"family/{name}", 0))
                for name in ("A", "B")}
    entries = {}
    for name, fam in families.items():
        s = flat_sample_set(fam, n_id_per_class, hash64(seed, f"draw/{name}", 0), fam.means)
        entries[name] = _save(s, out, f"id{name}")
    pairs = []
    for pair_name, fam_name, sep in FLAT_PAIRS:
        fam = families[fam_name]
        ood = shifted_family(fam, f"{pair_name.lower().replace('-', '')}-",
                             sep, hash64(seed, f"family/{pair_name}", 0))
        s = flat_sample_set(ood, n_ood_per_class, hash64(seed, f"draw/{pair_name}", 0), fam.means)
        pairs.append({"name": pair_name, "id": entries[fam_name], "ood": _save(s, out, f"ood-{pair_name}")})
    hier = hierarchical_sample_set(hash64(seed, "family/hier", 0))
    pairs.append({"name": "hier", "hierarchical": _save(hier, out, "hier"), "p": p_hier})
    config = {
        "dataset_pairs": pairs,
        "detectors": detector_specs(noise_levels),
        "k": k,
        "e_runs": e_runs,
        "r_truth": r_truth,
        "seed": seed,
        "alphas": [0.1, 0.05, 0.01],
        "output_dir": "run",
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path


def theoretical_min_distance_auroc(separation: float, dim: int = DEFAULT_DIM, n: int = 400_000,
                                   seed: int = 0) -> float:
    """AUROC of ``||x - mu||^2`` (true mean, true unit covariance) for one shifted Gaussian.

    Upper reference for nearest-mean distance scorers: ID squared distances are
    chi^2_d, OOD ones non-central chi^2_d with ``lambda = separation^2``.
    """
    rng = np.random.default_rng(seed)
    a = np.sort(rng.chisquare(dim, n))
    b = rng.noncentral_chisquare(dim, separation ** 2, n) if separation > 0 else rng.chisquare(dim, n)
    return float(np.mean(np.searchsorted(a, b)) / n)
