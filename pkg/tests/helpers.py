"""Shared generators, brute-force oracles and invariant checks for the tests."""

import random
import warnings
from collections import Counter, defaultdict

import numpy as np

from dcv_rood.splitter import (
    SplitSpec,
    assemble_rounds,
    build_folds_flat,
    build_folds_hierarchical,
    select_id_ood_split,
)
from dcv_rood.taxonomy import ClassNode, ClassTaxonomy, SampleRecord, SampleSet


def flat_set(prefix, sizes):
    t = ClassTaxonomy.flat([f"{prefix}{i}" for i in range(len(sizes))])
    recs = [SampleRecord(f"{prefix}{i}-{j}", (f"{prefix}{i}",)) for i, n in enumerate(sizes) for j in range(n)]
    return SampleSet.build(t, recs)


def tree_set(rng, n_super, n_mid, n_leaf, max_per_leaf, cls_level):
    nodes, recs = [], []
    for a in range(n_super):
        sa = f"S{a}"
        nodes.append(ClassNode(0, sa))
        for b in range(n_mid):
            mb = f"{sa}M{b}"
            nodes.append(ClassNode(1, mb, sa))
            for c in range(n_leaf):
                lc = f"{mb}L{c}"
                nodes.append(ClassNode(2, lc, mb))
                recs += [SampleRecord(f"{lc}#{j}", (sa, mb, lc)) for j in range(rng.randint(1, max_per_leaf))]
    return SampleSet.build(ClassTaxonomy(("super", "mid", "leaf"), frozenset(nodes), cls_level), recs)


def shuffled_copy(s, rng):
    rows = list(range(len(s)))
    rng.shuffle(rows)
    return SampleSet.build(s.taxonomy, [s.records[i] for i in rows])


def random_config(seed):
    """One random (taxonomy, k, seed) configuration; half flat, half 3-level."""
    rng = random.Random(seed)
    k = rng.randint(2, 5)
    if seed % 2 == 0:
        d_id = flat_set("id", [rng.randint(1, 15) for _ in range(rng.randint(2, 8))])
        d_ood = flat_set("ood", [rng.randint(1, 10) for _ in range(rng.randint(k, k + 5))])
        return {"kind": "flat", "k": k, "seed": rng.getrandbits(64), "d_id": d_id, "d_ood": d_ood}
    cls_level = rng.choice([1, 2])
    p = rng.choice([0.2, 0.3, 0.4, 0.5])
    need = int(-(-1 // p))  # ceil(1 / p) children per stratum gives >= 1 OOD class each
    if cls_level == 2:
        h = tree_set(rng, rng.randint(1, 3), rng.randint(1, 3), rng.randint(need, need + 3), 8, 2)
    else:
        h = tree_set(rng, rng.randint(1, 3), rng.randint(need, need + 3), rng.randint(1, 3), 6, 1)
    return {"kind": "hier", "k": k, "seed": rng.getrandbits(64), "h": h, "p": p,
            "split_seed": rng.getrandbits(64)}


def build(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg["kind"] == "flat":
            d_id, d_ood = cfg["d_id"], cfg["d_ood"]
            f_id, f_ood = build_folds_flat(d_id, d_ood, cfg["k"], cfg["seed"])
            return d_id, d_ood, f_id, f_ood, 0, 0
        d_id, d_ood = select_id_ood_split(cfg["h"], SplitSpec(cfg["p"], cfg["split_seed"]))
        f_id, f_ood = build_folds_hierarchical(d_id, d_ood, cfg["k"], cfg["seed"])
        t = cfg["h"].taxonomy
        return d_id, d_ood, f_id, f_ood, t.leaf_level, t.classification_level


def violations(cfg):
    """Every broken splitting invariant for one configuration (empty list = all hold)."""
    out = []
    k = cfg["k"]
    d_id, d_ood, f_id, f_ood, id_level, ood_level = build(cfg)

    # partition
    if set(f_id.fold_of_sample) != set(d_id.ids) or len(f_id.fold_of_sample) != len(d_id):
        out.append("ID folds are not a partition of the ID samples")
    if set(f_ood.fold_of_sample) != set(d_ood.ids) or len(f_ood.fold_of_sample) != len(d_ood):
        out.append("OOD folds are not a partition of the OOD samples")

    # stratified balance and leaf coverage
    per_class = defaultdict(Counter)
    for sid, cls in zip(d_id.ids, d_id.labels(id_level)):
        per_class[cls][f_id.fold_of_sample[sid]] += 1
    for cls, c in per_class.items():
        counts = [c.get(j, 0) for j in range(k)]
        if max(counts) - min(counts) > 1:
            out.append(f"class {cls} unbalanced over folds: {counts}")
        if sum(counts) >= k and min(counts) == 0:
            out.append(f"class {cls} with {sum(counts)} >= k samples missing from a fold")

    # group indivisibility
    fold_of_class = defaultdict(set)
    for sid, cls in zip(d_ood.ids, d_ood.labels(ood_level)):
        fold_of_class[cls].add(f_ood.fold_of_sample[sid])
    for cls, folds in fold_of_class.items():
        if len(folds) != 1:
            out.append(f"OOD class {cls} split over folds {sorted(folds)}")

    # rounds: leakage safety and disjointness
    cls_of = dict(zip(d_ood.ids, d_ood.labels(ood_level)))
    for r in assemble_rounds(f_id, f_ood):
        if {cls_of[s] for s in r.train_ood} & {cls_of[s] for s in r.test_ood}:
            out.append(f"round {r.round_index}: OOD class in both train and test")
        if set(r.train_id) & set(r.test_id):
            out.append(f"round {r.round_index}: ID sample in both train and test")

    # determinism under manifest row shuffling
    rng = random.Random(cfg["seed"])
    shuffled = dict(cfg)
    if cfg["kind"] == "flat":
        shuffled["d_id"], shuffled["d_ood"] = shuffled_copy(cfg["d_id"], rng), shuffled_copy(cfg["d_ood"], rng)
    else:
        shuffled["h"] = shuffled_copy(cfg["h"], rng)
    _, _, g_id, g_ood, _, _ = build(shuffled)
    if dict(g_id.fold_of_sample) != dict(f_id.fold_of_sample) or \
            dict(g_ood.fold_of_sample) != dict(f_ood.fold_of_sample):
        out.append("folds changed under row shuffling")
    return out


def brute_auroc(ids, oods):
    """Pairwise count: P(ood > id) + 0.5 P(ood == id)."""
    ids, oods = np.asarray(ids), np.asarray(oods)
    gt = (oods[:, None] > ids[None, :]).sum()
    eq = (oods[:, None] == ids[None, :]).sum()
    return (gt + 0.5 * eq) / (len(ids) * len(oods))


def brute_tpr_at_fpr(ids, oods, cap=0.05):
    """Exhaustive sweep: every observed score (and +inf) tried as a ``>=`` threshold.

    TPR is read at the lowest threshold whose FPR is within ``cap``.
    """
    ids, oods = np.asarray(ids, dtype=float), np.asarray(oods, dtype=float)
    candidates = np.unique(np.r_[ids, oods, np.inf])
    fpr = (ids[None, :] >= candidates[:, None]).sum(axis=1) / len(ids)
    t = candidates[np.flatnonzero(fpr <= cap)[0]]
    return float((oods >= t).sum() / len(oods))


def random_scores(rng, max_n=500):
    """Random LabeledScores inputs: continuous, coarse-grid (many ties) or heavily tied."""
    kind = rng.integers(3)
    n_id, n_ood = int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_n + 1))
    if kind == 0:
        return rng.normal(size=n_id), rng.normal(rng.normal(), rng.uniform(0.2, 3), size=n_ood)
    if kind == 1:
        return rng.integers(0, 20, n_id) / 4.0, rng.integers(3, 25, n_ood) / 4.0
    return rng.integers(0, 3, n_id).astype(float), rng.integers(0, 3, n_ood).astype(float)


def brute_exact_mwu(x, y):
    """Two-sided exact Mann-Whitney p by enumerating every labeling of the pooled sample."""
    from itertools import combinations

    pooled = list(x) + list(y)
    n, m = len(pooled), len(x)

    def u_of(idx):
        chosen = set(idx)
        xs = [pooled[i] for i in chosen]
        ys = [pooled[i] for i in range(n) if i not in chosen]
        return sum((a > b) + 0.5 * (a == b) for a in xs for b in ys)

    u_obs = u_of(range(m))
    us = [u_of(c) for c in combinations(range(n), m)]
    le = sum(u <= u_obs for u in us)
    ge = sum(u >= u_obs for u in us)
    return min(1.0, 2 * min(le, ge) / len(us))


def cv_matrices_from_counts(fixture):
    """Per-run p-value matrices reproducing the fixture's detection counts at 0.1 and 0.05."""
    runs = fixture["runs"]
    c10, c05 = np.array(fixture["counts"]["0.1"]), np.array(fixture["counts"]["0.05"])
    k = len(fixture["detectors"])
    out = []
    for r in range(runs):
        p = np.ones((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                p[i, j] = p[j, i] = 0.01 if r < c05[i, j] else 0.07 if r < c10[i, j] else 0.5
        out.append(p)
    return out
