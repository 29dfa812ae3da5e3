import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from dcv_rood.errors import DetectorMismatch, TiesInExactMode, TooFewSamples, ValidationError, ZeroVariance
from dcv_rood.stats import (
    MWU,
    TTEST,
    ResultVector,
    SignificanceMatrix,
    format_counts_text,
    format_matrix_text,
    hit_error_rates,
    mann_whitney_u,
    methodwise_comparison,
    normality_p,
    pairwise_matrix,
    read_matrix_csv,
    shapiro_w,
    shapiro_wilk,
    students_t,
    u_null_counts,
    write_matrix_csv,
)
from helpers import brute_exact_mwu, cv_matrices_from_counts

small_floats = st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False)


# Shapiro-Wilk ---------------------------------------------------------------

@pytest.mark.parametrize("n", [3, 4, 5, 8, 11, 12, 20, 50, 200, 1000])
def test_shapiro_matches_scipy(n):
    rng = np.random.default_rng(n)
    for x in (rng.normal(size=n), rng.exponential(size=n), rng.uniform(size=n)):
        w, p = sps.shapiro(x)
        # scipy's swilk works in single precision
        assert shapiro_w(x) == pytest.approx(w, abs=2e-6)
        assert shapiro_wilk(x) == pytest.approx(p, abs=2e-5)


def test_shapiro_errors():
    with pytest.raises(TooFewSamples):
        shapiro_wilk([1.0, 2.0])
    assert normality_p([3.0, 3.0, 3.0, 3.0]) is None
    assert normality_p([1.0]) is None


@given(st.lists(small_floats, min_size=3, max_size=40))
@settings(max_examples=60, deadline=None)
def test_shapiro_p_in_unit_interval(x):
    assume(np.ptp(x) > 1e-6)
    assert 0.0 < shapiro_wilk(x) <= 1.0


# Mann-Whitney ---------------------------------------------------------------

def test_null_counts_sum_to_binomial():
    from math import comb
    for m in range(1, 7):
        for n in range(1, 7):
            c = u_null_counts(m, n)
            assert sum(c) == comb(m + n, m) and c == c[::-1]


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=12, unique=True), st.data())
@settings(max_examples=60, deadline=None)
def test_exact_mwu_equals_enumeration(values, data):
    m = data.draw(st.integers(1, len(values) - 1))
    x, y = values[:m], values[m:]
    assert mann_whitney_u(x, y, "exact") == pytest.approx(brute_exact_mwu(x, y), rel=1e-12)


def test_exact_mwu_matches_scipy():
    rng = np.random.default_rng(7)
    for _ in range(30):
        x, y = rng.normal(size=rng.integers(2, 12)), rng.normal(0.5, size=rng.integers(2, 12))
        ref = sps.mannwhitneyu(x, y, alternative="two-sided", method="exact").pvalue
        assert mann_whitney_u(x, y, "exact") == pytest.approx(ref, rel=1e-10)


def test_approx_mwu_matches_scipy_with_ties():
    rng = np.random.default_rng(8)
    for _ in range(30):
        x, y = rng.integers(0, 6, rng.integers(5, 40)), rng.integers(1, 7, rng.integers(5, 40))
        ref = sps.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic",
                               use_continuity=True).pvalue
        assert mann_whitney_u(x, y, "approx") == pytest.approx(max(ref, 1e-300), rel=1e-9)


def test_exact_mode_refuses_ties():
    with pytest.raises(TiesInExactMode):
        mann_whitney_u([1.0, 2.0], [2.0, 3.0], "exact")
    # auto falls back to the normal approximation
    assert 0 < mann_whitney_u([1.0, 2.0], [2.0, 3.0], "auto") <= 1


def test_mwu_input_checks():
    with pytest.raises(ValidationError):
        mann_whitney_u([], [1.0])
    with pytest.raises(ValidationError):
        mann_whitney_u([1.0], [2.0], "bogus")


def test_mwu_all_equal_is_one():
    assert mann_whitney_u([1.0] * 5, [1.0] * 5) == 1.0


@given(st.lists(small_floats, min_size=1, max_size=15), st.lists(small_floats, min_size=1, max_size=15),
       st.sampled_from(["auto", "approx"]))
@settings(max_examples=80, deadline=None)
def test_mwu_symmetric_and_in_range(x, y, mode):
    p = mann_whitney_u(x, y, mode)
    assert 0 < p <= 1
    assert p == pytest.approx(mann_whitney_u(y, x, mode), rel=1e-12)


@given(st.lists(st.integers(-50, 50), min_size=2, max_size=15), st.lists(st.integers(-50, 50), min_size=2, max_size=15),
       st.floats(0.5, 20), st.floats(-10, 10))
@settings(max_examples=60, deadline=None)
def test_mwu_rank_invariance(x, y, scale, shift):
    x, y = np.array(x, float), np.array(y, float)
    base = mann_whitney_u(x, y)
    assert mann_whitney_u(x * scale + shift, y * scale + shift) == pytest.approx(base, rel=1e-9)


# Student's t ----------------------------------------------------------------

def test_t_matches_scipy():
    rng = np.random.default_rng(9)
    for _ in range(30):
        x, y = rng.normal(size=rng.integers(2, 30)), rng.normal(0.3, 2, size=rng.integers(2, 30))
        for eq in (True, False):
            ref = sps.ttest_ind(x, y, equal_var=eq).pvalue
            assert students_t(x, y, equal_var=eq) == pytest.approx(ref, rel=1e-9)


def test_t_errors():
    with pytest.raises(TooFewSamples):
        students_t([1.0], [1.0, 2.0])
    with pytest.raises(ZeroVariance):
        students_t([1.0, 1.0], [2.0, 2.0])


@given(st.lists(small_floats, min_size=3, max_size=12), st.lists(small_floats, min_size=3, max_size=12),
       st.floats(0.5, 20), st.floats(-10, 10))
@settings(max_examples=60, deadline=None)
def test_t_decision_invariant_under_affine_map(x, y, scale, shift):
    x, y = np.array(x), np.array(y)
    assume(np.var(np.r_[x, y]) > 1e-3 and (np.var(x) > 0 or np.var(y) > 0))
    base = students_t(x, y)
    moved = students_t(x * scale + shift, y * scale + shift)
    assert moved == pytest.approx(base, rel=1e-6, abs=1e-12)
    assert students_t(y, x) == pytest.approx(base, rel=1e-12)


# pairwise matrices ----------------------------------------------------------

def vec(name, values, metric="auroc"):
    return ResultVector(name, metric, tuple(values))


def test_pairwise_tag_rule():
    rng = np.random.default_rng(10)
    normal_a = vec("a", rng.normal(size=30))
    normal_b = vec("b", rng.normal(1, size=30))
    skewed = vec("c", rng.exponential(size=30) ** 3)
    m = pairwise_matrix([normal_a, normal_b, skewed])
    assert m.normality_p["a"] > 0.05 and m.normality_p["c"] < 0.05
    assert m.test_used[0][1] == TTEST
    assert m.test_used[0][2] == MWU and m.test_used[1][2] == MWU
    assert m.p("a", "b") == pytest.approx(sps.ttest_ind(normal_a.values, normal_b.values).pvalue)
    assert m.p("a", "c") == pytest.approx(
        sps.mannwhitneyu(normal_a.values, skewed.values, method="asymptotic").pvalue)


def test_pairwise_constant_vector_uses_mwu():
    m = pairwise_matrix([vec("a", [0.5] * 6), vec("b", [0.1, 0.2, 0.3, 0.4, 0.45, 0.25])])
    assert m.test_used[0][1] == MWU
    assert m.normality_p["a"] is None


def test_pairwise_matrix_properties():
    rng = np.random.default_rng(11)
    m = pairwise_matrix([vec(n, rng.normal(size=10)) for n in "abcd"])
    assert np.array_equal(m.p_values, m.p_values.T)
    assert np.all(np.diag(m.p_values) == 1.0)
    assert np.all((m.p_values > 0) & (m.p_values <= 1))


def test_pairwise_input_checks():
    with pytest.raises(ValidationError):
        pairwise_matrix([vec("a", [1, 2, 3])])
    with pytest.raises(ValidationError):
        pairwise_matrix([vec("a", [1, 2, 3]), vec("b", [1, 2])])
    with pytest.raises(ValidationError):
        pairwise_matrix([vec("a", [1, 2, 3]), vec("a", [1, 2, 4])])
    with pytest.raises(ValidationError):
        vec("a", [1.0, float("nan")])


def test_matrix_validation():
    with pytest.raises(ValidationError):
        SignificanceMatrix.from_p_values(["a", "b"], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValidationError):
        SignificanceMatrix.from_p_values(["a", "b"], [[1, 0], [0, 1]])


def test_matrix_csv_round_trip(tmp_path):
    m = SignificanceMatrix.from_p_values(["x", "y", "z"], [[1, 0.03, 0.2], [0.03, 1, 1e-9], [0.2, 1e-9, 1]])
    write_matrix_csv(tmp_path / "m.csv", m)
    back = read_matrix_csv(tmp_path / "m.csv")
    assert back.detectors == m.detectors and np.array_equal(back.p_values, m.p_values)
    text = format_matrix_text(m)
    assert "0.0300**" in text and "0.2000" in text and "0.0000***" in text


# fidelity -------------------------------------------------------------------

def test_fixture_rates_and_recompute(published_fixture):
    names = published_fixture["detectors"]
    bench = SignificanceMatrix.from_p_values(names, published_fixture["benchmark_p"], "tpr5")
    runs = [SignificanceMatrix.from_p_values(names, p) for p in cv_matrices_from_counts(published_fixture)]
    for alpha, exp in published_fixture["expected"].items():
        rep = hit_error_rates(bench, runs, float(alpha))
        assert rep.hit_rate == pytest.approx(exp["hit_rate"], abs=1e-3)
        assert rep.error_rate == pytest.approx(exp["error_rate"], abs=1e-3)
        assert rep.recompute() == (rep.hit_rate, rep.error_rate)
        assert "hit_rate=" in format_counts_text(rep, names)


def test_identical_runs_hit_all_no_errors():
    rng = np.random.default_rng(12)
    p = rng.uniform(0.001, 0.3, size=(5, 5))
    p = np.triu(p, 1) + np.triu(p, 1).T + np.eye(5)
    m = SignificanceMatrix.from_p_values(list("abcde"), p)
    rep = hit_error_rates(m, [m] * 7, 0.1)
    assert rep.hit_rate in (7.0, None) and rep.error_rate in (0.0, None)


def test_rates_none_without_pairs():
    m = SignificanceMatrix.from_p_values(["a", "b"], [[1, 0.5], [0.5, 1]])
    rep = hit_error_rates(m, [m], 0.1)
    assert rep.hit_rate is None and rep.error_rate == 0.0


def test_strict_inequality_at_alpha():
    bench = SignificanceMatrix.from_p_values(["a", "b"], [[1, 0.01], [0.01, 1]])
    run = SignificanceMatrix.from_p_values(["a", "b"], [[1, 0.1], [0.1, 1]])
    assert hit_error_rates(bench, [run], 0.1).hit_rate == 0.0


def test_fidelity_detector_mismatch():
    a = SignificanceMatrix.from_p_values(["a", "b"], np.eye(2) + 0.5 * (1 - np.eye(2)))
    b = SignificanceMatrix.from_p_values(["a", "c"], np.eye(2) + 0.5 * (1 - np.eye(2)))
    with pytest.raises(DetectorMismatch):
        hit_error_rates(a, [b], 0.1)
    with pytest.raises(ValidationError):
        hit_error_rates(a, [], 0.1)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_null_runs_error_rate_near_alpha(seed):
    # CV p-values drawn uniformly: every count is a binomial(R, alpha) draw
    rng = np.random.default_rng(seed)
    k, runs, alpha = 6, 20, 0.1
    bench = SignificanceMatrix.from_p_values(list("abcdef"), np.ones((k, k)))
    mats = []
    for _ in range(runs):
        u = rng.uniform(size=(k, k))
        p = np.triu(u, 1) + np.triu(u, 1).T + np.eye(k)
        mats.append(SignificanceMatrix.from_p_values(list("abcdef"), p))
    rep = hit_error_rates(bench, mats, alpha)
    assert rep.hit_rate is None
    assert 0 <= rep.error_rate <= runs
    assert rep.recompute() == (None, rep.error_rate)


def test_null_error_rate_mean():
    rng = np.random.default_rng(13)
    k, runs, alpha = 6, 10, 0.1
    bench = SignificanceMatrix.from_p_values(list("abcdef"), np.ones((k, k)))
    rates = []
    for _ in range(300):
        mats = []
        for _ in range(runs):
            u = rng.uniform(size=(k, k))
            mats.append(SignificanceMatrix.from_p_values(list("abcdef"), np.triu(u, 1) + np.triu(u, 1).T + np.eye(k)))
        rates.append(hit_error_rates(bench, mats, alpha).error_rate)
    assert np.mean(rates) == pytest.approx(runs * alpha, abs=0.1)


# methodwise -----------------------------------------------------------------

def test_methodwise_flags_shifted_run():
    rng = np.random.default_rng(14)
    bench = [vec("a", rng.normal(size=20)), vec("b", rng.normal(size=20))]
    same = [vec("a", rng.normal(size=20)), vec("b", rng.normal(size=20))]
    moved = [vec("a", rng.normal(3, size=20)), vec("b", rng.normal(size=20))]
    t = methodwise_comparison(bench, [same, moved], [0.1, 0.05])
    assert t.p_values.shape == (2, 2)
    assert (2, "a") in t.flagged(0.05)
    assert t.p_values[1, 0] == pytest.approx(
        sps.mannwhitneyu(moved[0].values, bench[0].values, method="asymptotic").pvalue, rel=1e-9)
    assert "CV 2 (a)" in t.cell(0.05)


def test_methodwise_flag_is_inclusive():
    from dcv_rood.stats import MethodwiseTable
    t = MethodwiseTable("m", ("a",), np.array([[0.05]]), (0.05,))
    assert t.flagged(0.05) == [(1, "a")]
    assert t.cell(0.01) == "-"


def test_methodwise_detector_mismatch():
    bench = [vec("a", [1, 2, 3])]
    with pytest.raises(DetectorMismatch):
        methodwise_comparison(bench, [[vec("b", [1, 2, 3])]], [0.1])
