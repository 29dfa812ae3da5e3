"""Hypothesis tests and the benchmark-fidelity analyses built on them.

Pairwise detector comparisons use Student's t when both samples pass a
Shapiro-Wilk normality check and Mann-Whitney U otherwise. Fidelity is then
measured by how often each cross-validation run reproduces the benchmark's
significant pairs (hit rate) or flags pairs the benchmark does not (error
rate), both on a ``[0, R]`` scale for ``R`` runs.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import special

from .errors import (
    ConstantInput,
    DetectorMismatch,
    TiesInExactMode,
    TooFewSamples,
    ValidationError,
    ZeroVariance,
)
from .metrics import midranks

P_FLOOR = np.finfo(float).tiny
EXACT_AUTO_MAX_N = 24
MWU = "mann-whitney"
TTEST = "t-test"


def _clip_p(p: float) -> float:
    return float(min(1.0, max(P_FLOOR, p)))


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston 1992/1995 approximation of the W coefficients and p)

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)


def _poly(coef: Sequence[float], x: float) -> float:
    return sum(c * x ** i for i, c in enumerate(coef))


def shapiro_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights ``a`` (ascending order statistics) for sample size ``n``."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    i = np.arange(1, n + 1)
    m = special.ndtri((i - 0.375) / (n + 0.25))
    mm = float(np.sum(m ** 2))
    u = 1.0 / math.sqrt(n)
    a = m / math.sqrt(mm)
    a_n = a[-1] + _poly(_C1, u)
    if n > 5:
        a_n1 = a[-2] + _poly(_C2, u)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n ** 2 - 2 * a_n1 ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = a_n, a_n1, -a_n, -a_n1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * a_n ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[0] = a_n, -a_n
    return a


def shapiro_w(values) -> float:
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise TooFewSamples(f"Shapiro-Wilk needs at least 3 values, got {n}")
    if n > 5000:
        raise ValidationError(f"Shapiro-Wilk approximation valid up to n=5000, got {n}")
    if x[-1] == x[0]:
        raise ConstantInput("Shapiro-Wilk undefined for zero-variance input")
    ss = float(np.sum((x - x.mean()) ** 2))
    a = shapiro_coefficients(n)
    w = float(np.dot(a, x)) ** 2 / ss
    return min(w, 1.0)


def shapiro_wilk(values) -> float:
    """p-value for the null hypothesis that ``values`` come from a normal distribution."""
    w = shapiro_w(values)
    n = len(values)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return _clip_p(p)
    y = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        if y == -math.inf:
            return 1.0
        if y >= gamma:
            return P_FLOOR
        y = -math.log(gamma - y)
        mu = _poly((0.5440, -0.39978, 0.025054, -6.714e-4), n)
        sigma = math.exp(_poly((1.3822, -0.77857, 0.062767, -0.0020322), n))
    else:
        if y == -math.inf:
            return 1.0
        ln = math.log(n)
        mu = _poly((-1.5861, -0.31082, -0.083751, 0.0038915), ln)
        sigma = math.exp(_poly((-0.4803, -0.082676, 0.0030302), ln))
    return _clip_p(_norm_sf((y - mu) / sigma))


# ---------------------------------------------------------------------------
# Mann-Whitney U


def u_statistic(x, y) -> tuple[float, np.ndarray]:
    """``U_x`` (pairs with x > y, ties counting 1/2) and the pooled midranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ranks = midranks(np.concatenate([x, y]))
    return float(ranks[: len(x)].sum() - len(x) * (len(x) + 1) / 2.0), ranks


def u_null_counts(m: int, n: int) -> list[int]:
    """Number of labelings with ``U = u`` for ``u = 0..m*n`` (no ties).

    These are the coefficients of the Gaussian binomial ``[m+n choose m]_q``,
    built as ``prod_{i=1..m} (1 - q^(n+i)) / (1 - q^i)`` with exact integers.
    """
    size = m * n + 1
    c = [0] * size
    c[0] = 1
    for i in range(1, m + 1):
        shift = n + i
        for j in range(size - 1, shift - 1, -1):
            c[j] -= c[j - shift]
        for j in range(i, size):
            c[j] += c[j - i]
    return c


def exact_two_sided_p(u: int, counts: Sequence[int]) -> float:
    total = sum(counts)
    le = sum(counts[: u + 1])
    ge = sum(counts[u:])
    return min(1.0, 2 * min(le, ge) / total)


def mann_whitney_u(x, y, mode: str = "auto") -> float:
    """Two-sided Mann-Whitney U p-value.

    ``exact`` uses the full null distribution and refuses ties; ``approx`` is
    the normal approximation with tie and continuity corrections; ``auto``
    picks exact for ``n_x + n_y <= 24`` without ties.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = len(x), len(y)
    if nx == 0 or ny == 0:
        raise ValidationError("Mann-Whitney U needs two non-empty samples")
    if mode not in ("exact", "approx", "auto"):
        raise ValidationError(f"unknown mode {mode!r}")
    pooled = np.concatenate([x, y])
    has_ties = len(np.unique(pooled)) < len(pooled)
    if mode == "exact" and has_ties:
        raise TiesInExactMode("exact Mann-Whitney requires tie-free samples")
    if mode == "auto":
        mode = "exact" if nx + ny <= EXACT_AUTO_MAX_N and not has_ties else "approx"
    u_x, ranks = u_statistic(x, y)
    if mode == "exact":
        return _clip_p(exact_two_sided_p(int(round(u_x)), u_null_counts(nx, ny)))
    n = nx + ny
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1)) if n > 1 else 0.0
    var = nx * ny / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    big_u = max(u_x, nx * ny - u_x)
    z = (big_u - nx * ny / 2.0 - 0.5) / math.sqrt(var)
    return _clip_p(2.0 * _norm_sf(z))


# ---------------------------------------------------------------------------
# Student's t


def students_t(x, y, equal_var: bool = True) -> float:
    """Two-sided two-sample t-test; pooled variance unless ``equal_var=False`` (Welch)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise TooFewSamples("t-test needs at least 2 values per sample")
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    diff = x.mean() - y.mean()
    if equal_var:
        df = nx + ny - 2
        pooled = ((nx - 1) * vx + (ny - 1) * vy) / df
        if pooled == 0:
            raise ZeroVariance("pooled variance is zero")
        se = math.sqrt(pooled * (1.0 / nx + 1.0 / ny))
    else:
        a, b = vx / nx, vy / ny
        if a + b == 0:
            raise ZeroVariance("both samples have zero variance")
        se = math.sqrt(a + b)
        df = (a + b) ** 2 / (a ** 2 / (nx - 1) + b ** 2 / (ny - 1))
    t = diff / se
    return _clip_p(2.0 * float(special.stdtr(df, -abs(t))))


# ---------------------------------------------------------------------------
# pairwise significance matrices


@dataclass(frozen=True)
class ResultVector:
    detector: str
    metric: str
    values: tuple[float, ...]
    contexts: tuple[str, ...] = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{self.detector}/{self.metric}: non-finite values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "contexts", tuple(self.contexts))


@dataclass(frozen=True)
class SignificanceMatrix:
    detectors: tuple[str, ...]
    p_values: np.ndarray
    test_used: tuple[tuple[str, ...], ...]
    normality_p: Mapping[str, Optional[float]] = field(default_factory=dict)
    metric: str = ""

    def __post_init__(self):
        p = np.array(self.p_values, dtype=np.float64)
        k = len(self.detectors)
        if p.shape != (k, k):
            raise ValidationError(f"p-value matrix shape {p.shape} does not match {k} detectors")
        if not np.allclose(p, p.T, rtol=0, atol=0):
            raise ValidationError("p-value matrix must be symmetric")
        if np.any(np.diag(p) != 1.0):
            raise ValidationError("p-value matrix diagonal must be 1")
        if np.any(p <= 0) or np.any(p > 1):
            raise ValidationError("p-values must lie in (0, 1]")
        p.flags.writeable = False
        object.__setattr__(self, "p_values", p)

    def p(self, a: str, b: str) -> float:
        return float(self.p_values[self.detectors.index(a), self.detectors.index(b)])

    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(len(self.detectors)), 2))

    @classmethod
    def from_p_values(cls, detectors, p_values, metric: str = "") -> "SignificanceMatrix":
        k = len(detectors)
        tags = tuple(tuple("" if i == j else "given" for j in range(k)) for i in range(k))
        return cls(tuple(detectors), np.asarray(p_values, dtype=np.float64), tags, {}, metric)


def normality_p(values) -> Optional[float]:
    """Shapiro-Wilk p, or ``None`` when the test is undefined (too few / constant values)."""
    try:
        return shapiro_wilk(values)
    except (TooFewSamples, ConstantInput):
        return None


def pairwise_matrix(results: Sequence[ResultVector], alpha_normality: float = 0.05,
                    mwu_mode: str = "auto", welch: bool = False) -> SignificanceMatrix:
    """p-values for every detector pair; t-test iff both samples look normal."""
    if len(results) < 2:
        raise ValidationError("need at least two detectors")
    lengths = {len(r.values) for r in results}
    if len(lengths) != 1:
        raise ValidationError(f"result vectors have different lengths: {sorted(lengths)}")
    names = tuple(r.detector for r in results)
    if len(set(names)) != len(names):
        raise ValidationError("duplicate detector names")
    k = len(results)
    norm = {r.detector: normality_p(r.values) for r in results}
    p = np.ones((k, k))
    tags = [["" for _ in range(k)] for _ in range(k)]
    for i, j in itertools.combinations(range(k), 2):
        a, b = results[i], results[j]
        pa, pb = norm[a.detector], norm[b.detector]
        if pa is not None and pb is not None and pa >= alpha_normality and pb >= alpha_normality:
            try:
                pij, tag = students_t(a.values, b.values, equal_var=not welch), TTEST
            except ZeroVariance:
                pij, tag = mann_whitney_u(a.values, b.values, mwu_mode), MWU
        else:
            pij, tag = mann_whitney_u(a.values, b.values, mwu_mode), MWU
        p[i, j] = p[j, i] = pij
        tags[i][j] = tags[j][i] = tag
    metric = results[0].metric
    return SignificanceMatrix(names, p, tuple(tuple(t) for t in tags), norm, metric)


# ---------------------------------------------------------------------------
# fidelity


@dataclass(frozen=True)
class FidelityReport:
    metric: str
    alpha: float
    runs: int
    hit_rate: Optional[float]
    error_rate: Optional[float]
    counts: Mapping[tuple[str, str], int]
    benchmark_pairs: tuple[tuple[str, str], ...]
    other_pairs: tuple[tuple[str, str], ...]

    def recompute(self) -> tuple[Optional[float], Optional[float]]:
        """Rates re-derived from the signed per-pair counts alone."""
        b, o = self.benchmark_pairs, self.other_pairs
        hit = sum(self.counts[p] for p in b) / len(b) if b else None
        err = sum(-self.counts[p] for p in o) / len(o) if o else None
        return hit, err


def _check_aligned(benchmark: SignificanceMatrix, runs: Sequence[SignificanceMatrix]) -> None:
    for m in runs:
        if m.detectors != benchmark.detectors:
            raise DetectorMismatch(f"detector lists differ: {benchmark.detectors} vs {m.detectors}")


def hit_error_rates(benchmark: SignificanceMatrix, cv_runs: Sequence[SignificanceMatrix],
                    alpha: float, metric: str = "") -> FidelityReport:
    """Per-pair detection counts over CV runs, signed by benchmark significance.

    A pair is significant when ``p < alpha``. Counts are positive for pairs the
    benchmark finds significant and negative for the rest. Rates with no
    qualifying pairs are ``None``.
    """
    if not cv_runs:
        raise ValidationError("need at least one CV run")
    _check_aligned(benchmark, cv_runs)
    names = benchmark.detectors
    counts: dict[tuple[str, str], int] = {}
    sig_pairs, other_pairs = [], []
    for i, j in benchmark.pairs():
        key = (names[i], names[j])
        n_sig = sum(1 for m in cv_runs if m.p_values[i, j] < alpha)
        if benchmark.p_values[i, j] < alpha:
            sig_pairs.append(key)
            counts[key] = n_sig
        else:
            other_pairs.append(key)
            counts[key] = -n_sig
    hit = sum(counts[p] for p in sig_pairs) / len(sig_pairs) if sig_pairs else None
    err = sum(-counts[p] for p in other_pairs) / len(other_pairs) if other_pairs else None
    return FidelityReport(metric or benchmark.metric, alpha, len(cv_runs), hit, err, counts,
                          tuple(sig_pairs), tuple(other_pairs))


@dataclass(frozen=True)
class MethodwiseTable:
    metric: str
    detectors: tuple[str, ...]
    p_values: np.ndarray  # runs x detectors
    alphas: tuple[float, ...]

    def flagged(self, alpha: float) -> list[tuple[int, str]]:
        """``(run_number, detector)`` with ``p <= alpha``; run numbers are 1-based."""
        return [(r + 1, d) for r in range(self.p_values.shape[0])
                for j, d in enumerate(self.detectors) if self.p_values[r, j] <= alpha]

    def cell(self, alpha: float) -> str:
        flags = self.flagged(alpha)
        return ", ".join(f"CV {r} ({d})" for r, d in flags) if flags else "-"


def methodwise_comparison(benchmark_values: Sequence[ResultVector],
                          cv_values: Sequence[Sequence[ResultVector]],
                          alphas: Sequence[float], mode: str = "auto") -> MethodwiseTable:
    """Mann-Whitney U of each run's per-context results against the benchmark's, per detector."""
    names = tuple(r.detector for r in benchmark_values)
    bench = {r.detector: r for r in benchmark_values}
    p = np.ones((len(cv_values), len(names)))
    for run, vectors in enumerate(cv_values):
        got = {v.detector: v for v in vectors}
        if set(got) != set(names):
            raise DetectorMismatch(f"run {run + 1} detectors {sorted(got)} != benchmark {sorted(names)}")
        for j, d in enumerate(names):
            p[run, j] = mann_whitney_u(got[d].values, bench[d].values, mode)
    metric = benchmark_values[0].metric if benchmark_values else ""
    return MethodwiseTable(metric, names, p, tuple(alphas))


# ---------------------------------------------------------------------------
# tables


def stars(p: float) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def format_matrix_text(m: SignificanceMatrix) -> str:
    """Aligned table with ``*`` p<0.1, ``**`` p<0.05, ``***`` p<0.01."""
    names = m.detectors
    cells = [[""] + list(names)]
    for i, a in enumerate(names):
        row = [a]
        for j in range(len(names)):
            row.append("1" if i == j else f"{m.p_values[i, j]:.4f}{stars(m.p_values[i, j])}")
        cells.append(row)
    widths = [max(len(r[c]) for r in cells) for c in range(len(cells[0]))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells]
    lines.append("Significance: * p<0.1, ** p<0.05, *** p<0.01")
    return "\n".join(lines) + "\n"


def format_counts_text(report: FidelityReport, detectors: Sequence[str]) -> str:
    k = len(detectors)
    grid = [["-" if i == j else "" for j in range(k)] for i in range(k)]
    for (a, b), c in report.counts.items():
        i, j = detectors.index(a), detectors.index(b)
        grid[i][j] = grid[j][i] = str(c)
    cells = [[""] + list(detectors)] + [[detectors[i]] + grid[i] for i in range(k)]
    widths = [max(len(r[c]) for r in cells) for c in range(k + 1)]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.append(f"hit_rate={_rate(report.hit_rate)} error_rate={_rate(report.error_rate)} "
                 f"(alpha={report.alpha}, runs={report.runs}; negative = significant in CV only)")
    return "\n".join(lines) + "\n"


def _rate(v: Optional[float]) -> str:
    return "null" if v is None else f"{v:.4f}"


def write_matrix_csv(path, m: SignificanceMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(m.detectors))
        for i, a in enumerate(m.detectors):
            w.writerow([a] + [repr(float(v)) for v in m.p_values[i]])


def write_tests_csv(path, m: SignificanceMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(m.detectors))
        for i, a in enumerate(m.detectors):
            w.writerow([a] + list(m.test_used[i]))


def read_matrix_csv(path, metric: str = "") -> SignificanceMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    names = rows[0][1:]
    if [r[0] for r in rows[1:]] != names:
        raise ValidationError(f"{path}: row and column labels differ")
    p = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return SignificanceMatrix.from_p_values(names, p, metric)
