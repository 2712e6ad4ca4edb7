import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protogap.errors import DomainError
from protogap.stats import bootstrap_ci, rank_correlation, sign_test


# -- brute-force oracles ------------------------------------------------
# written against the textbook definitions, no shared code with stats.py

def oracle_ranks(v):
    ranks = []
    for x in v:
        less = sum(1 for y in v if y < x)
        equal = sum(1 for y in v if y == x)
        ranks.append(less + (equal + 1) / 2.0)
    return ranks


def oracle_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((a[i] - ma) * (b[i] - mb) for i in range(n))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((x - mb) ** 2 for x in b))
    return num / (da * db)


def oracle_spearman(a, b):
    return oracle_pearson(oracle_ranks(a), oracle_ranks(b))


def oracle_kendall(a, b):
    n = len(a)
    conc = disc = tie_a = tie_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = 1 if a[j] > a[i] else (-1 if a[j] < a[i] else 0)
            sb = 1 if b[j] > b[i] else (-1 if b[j] < b[i] else 0)
            if sa == 0:
                tie_a += 1
            if sb == 0:
                tie_b += 1
            if sa != 0 and sb != 0:
                if sa == sb:
                    conc += 1
                else:
                    disc += 1
    n0 = n * (n - 1) / 2.0
    return (conc - disc) / math.sqrt((n0 - tie_a) * (n0 - tie_b))


class TestRankCorrelation:
    def test_identity_and_reversal(self):
        a = [3.0, 1.0, 4.0, 1.5, 9.0]
        assert rank_correlation(a, a, "spearman") == pytest.approx(1.0)
        assert rank_correlation(a, a, "kendall") == pytest.approx(1.0)
        assert rank_correlation(a, [-x for x in a], "spearman") == pytest.approx(-1.0)
        assert rank_correlation(a, [-x for x in a], "kendall") == pytest.approx(-1.0)

    def test_hand_values_no_ties(self):
        # y ranks are (2, 3, 1): one concordant pair, two discordant
        x, y = [10.0, 20.0, 30.0], [5.0, 9.0, 1.0]
        assert rank_correlation(x, y, "spearman") == pytest.approx(-0.5, abs=1e-12)
        assert rank_correlation(x, y, "kendall") == pytest.approx(-1.0 / 3.0, abs=1e-12)

    def test_hand_values_with_ties(self):
        x, y = [1.0, 2.0, 3.0], [1.0, 2.0, 2.0]
        assert rank_correlation(x, y, "spearman") == pytest.approx(math.sqrt(3) / 2, abs=1e-12)
        assert rank_correlation(x, y, "kendall") == pytest.approx(2 / math.sqrt(6), abs=1e-12)

    def test_matches_oracle_on_random_vectors(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = rng.integers(0, 6, size=10).astype(float)  # heavy ties
            b = rng.integers(0, 6, size=10).astype(float)
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            assert rank_correlation(a, b, "spearman") == pytest.approx(
                oracle_spearman(list(a), list(b)), abs=1e-12
            )
            assert rank_correlation(a, b, "kendall") == pytest.approx(
                oracle_kendall(list(a), list(b)), abs=1e-12
            )

    @given(st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=12, unique=True))
    @settings(max_examples=80, deadline=None)
    def test_monotone_map_invariance(self, ints):
        a = [float(x) for x in ints]
        cubed = [x ** 3 for x in a]
        assert rank_correlation(a, cubed, "spearman") == pytest.approx(1.0)
        assert rank_correlation(a, cubed, "kendall") == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(DomainError):
            rank_correlation([1.0], [2.0])
        with pytest.raises(DomainError):
            rank_correlation([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(DomainError):
            rank_correlation([1.0, 1.0], [1.0, 2.0], "spearman")
        with pytest.raises(DomainError):
            rank_correlation([1.0, 2.0], [3.0, 4.0], "pearson")
        with pytest.raises(DomainError):
            rank_correlation([1.0, np.nan], [3.0, 4.0])


class TestSignTest:
    def test_ten_of_twelve(self):
        res = sign_test([1.0] * 10 + [-1.0] * 2)
        assert res.p_greater == pytest.approx(79 / 4096, abs=1e-15)
        assert res.n_positive == 10 and res.n_negative == 2 and res.n_zero == 0

    def test_five_of_five(self):
        res = sign_test([0.3, 0.1, 2.0, 0.7, 0.01])
        assert res.p_greater == pytest.approx(1 / 32, abs=1e-15)
        assert res.p_two_sided == pytest.approx(1 / 16, abs=1e-15)

    def test_symmetric_two_sided_is_one(self):
        res = sign_test([1.0, 2.0, -1.0, -2.0])
        assert res.p_two_sided == 1.0

    def test_zeros_dropped_and_counted(self):
        res = sign_test([1.0, 0.0, -1.0, 0.0, 1.0])
        assert res.n_zero == 2
        assert res.n_positive == 2 and res.n_negative == 1
        assert res.p_greater == pytest.approx(4 / 8)

    def test_zero_tolerance(self):
        res = sign_test([1.0, 1e-9, -1e-9], zero_tol=1e-6)
        assert res.n_zero == 2 and res.n_positive == 1

    def test_all_zero_rejected(self):
        with pytest.raises(DomainError, match="all deltas"):
            sign_test([0.0, 0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(DomainError):
            sign_test([1.0, np.inf])

    @given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=1, max_size=16))
    @settings(max_examples=100, deadline=None)
    def test_tails_sum_and_bounds(self, deltas):
        res = sign_test(deltas)
        # P(X >= k) + P(X <= k) counts k twice
        m = res.n_positive + res.n_negative
        overlap = math.comb(m, res.n_positive) / 2.0 ** m
        assert res.p_greater + res.p_less == pytest.approx(1.0 + overlap, abs=1e-12)
        assert 0.0 < res.p_two_sided <= 1.0


class TestBootstrap:
    def test_constant_data_zero_width(self):
        res = bootstrap_ci(np.full(10, 3.7), n_resamples=500, seed=1)
        assert res.lo == res.hi == res.point == pytest.approx(3.7)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=25)
        a = bootstrap_ci(x, n_resamples=400, seed=9)
        b = bootstrap_ci(x, n_resamples=400, seed=9)
        c = bootstrap_ci(x, n_resamples=400, seed=10)
        assert (a.lo, a.hi) == (b.lo, b.hi)
        assert (a.lo, a.hi) != (c.lo, c.hi)

    def test_point_is_sample_statistic(self):
        x = np.array([1.0, 2.0, 3.0, 10.0])
        res = bootstrap_ci(x, n_resamples=200, seed=0)
        assert res.point == pytest.approx(4.0)
        assert res.lo <= res.point <= res.hi

    def test_custom_statistic_rows(self):
        rows = np.column_stack([np.arange(8.0), np.ones(8)])
        res = bootstrap_ci(rows, lambda r: float(np.median(r[:, 0])), n_resamples=300, seed=3)
        assert res.lo <= res.point <= res.hi

    def test_multi_column_needs_statistic(self):
        with pytest.raises(DomainError):
            bootstrap_ci(np.ones((5, 2)))

    def test_level_and_inputs_validated(self):
        with pytest.raises(DomainError):
            bootstrap_ci([1.0, 2.0], level=1.0)
        with pytest.raises(DomainError):
            bootstrap_ci([])
        with pytest.raises(DomainError):
            bootstrap_ci([1.0, np.nan])
        with pytest.raises(DomainError):
            bootstrap_ci([1.0, 2.0], n_resamples=0)

    def test_wider_level_widens_interval(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=40)
        narrow = bootstrap_ci(x, n_resamples=800, seed=5, level=0.5)
        wide = bootstrap_ci(x, n_resamples=800, seed=5, level=0.99)
        assert wide.lo <= narrow.lo and wide.hi >= narrow.hi

    def test_monte_carlo_coverage(self):
        # 95% nominal level measured against the known mean of synthetic
        # Gaussian draws; percentile bootstrap runs a little below nominal
        # at n=20 which is why the band is +/- 2 points
        rng = np.random.default_rng(1234)
        hits = 0
        trials = 1000
        for t in range(trials):
            x = rng.normal(loc=0.0, scale=1.0, size=20)
            res = bootstrap_ci(x, n_resamples=1000, seed=t)
            hits += res.lo <= 0.0 <= res.hi
        assert 0.93 <= hits / trials <= 0.97
