import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from strokeseg.stats import (
    PairedVolumes,
    UndefinedCorrelationError,
    box_summary,
    lesion_volume,
    pearson,
    pearson_xy,
    read_stats_csv,
    stats_csv,
    volume_report,
    wilcoxon_differences,
    wilcoxon_signed_rank,
)

# two-sided alpha = 0.05 critical values of min(W+, W-) from standard tables
CRITICAL_05 = {10: 8, 11: 10, 12: 13, 13: 17, 14: 21, 15: 25, 16: 29, 17: 34, 18: 40, 19: 46, 20: 52}


def enumerate_p(d):
    """Two-sided exact p by listing every sign pattern."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=d.size)]
    n = len(sums)
    le = sum(s <= w + 1e-9 for s in sums) / n
    ge = sum(s >= w - 1e-9 for s in sums) / n
    return w, min(1.0, 2 * min(le, ge))


class TestVolume:
    def test_values(self):
        assert lesion_volume(np.zeros((3, 3, 3)), (1, 1, 1)) == 0
        m = np.zeros((4, 4, 4))
        m.flat[:10] = 1
        assert lesion_volume(m, (1, 1, 1)) == 10
        m = np.zeros(8)
        m[:3] = 1
        assert lesion_volume(m, (1, 2, 0.5)) == 3

    def test_non_binary(self):
        with pytest.raises(ValueError):
            lesion_volume(np.array([0, 2]), (1, 1, 1))


class TestWilcoxon:
    def test_hand_fixtures(self):
        r = wilcoxon_differences([1, 2, 3])
        assert (r.statistic, r.p_value, r.n_effective, r.method) == (6.0, 0.25, 3, "exact")
        r = wilcoxon_differences([-1, 2, -3, 4, -5])
        assert (r.statistic, r.p_value) == (6.0, 0.8125)

    def test_degenerate(self):
        r = wilcoxon_differences([0, 0, 0])
        assert r.degenerate and r.p_value == 1.0 and r.n_effective == 0 and r.statistic == 0

    def test_zeros_dropped(self):
        assert wilcoxon_differences([0, 1, 2, 3, 0]) == wilcoxon_differences([1, 2, 3])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sign_enumeration(self, seed):
        r = np.random.default_rng(seed)
        d = np.round(r.normal(0.3, 1, size=int(r.integers(1, 12))), 1)  # rounding creates ties
        if not d.any():
            return
        w, p = enumerate_p(d)
        res = wilcoxon_differences(d)
        assert res.statistic == w
        assert abs(res.p_value - p) < 1e-12

    @pytest.mark.parametrize("n", sorted(CRITICAL_05))
    def test_published_critical_values(self, n):
        t = CRITICAL_05[n]
        # a difference vector with untied ranks and W+ = t: choose positive ranks greedily
        def with_w(target):
            signs = -np.ones(n)
            remaining = target
            for rank in range(n, 0, -1):
                if rank <= remaining:
                    signs[rank - 1] = 1
                    remaining -= rank
            assert remaining == 0
            return signs * np.arange(1, n + 1)

        assert wilcoxon_differences(with_w(t)).p_value <= 0.05
        assert wilcoxon_differences(with_w(t + 1)).p_value > 0.05

    def test_normal_approx_close_to_exact_at_25(self):
        r = np.random.default_rng(0)
        for _ in range(50):
            d = r.normal(r.uniform(-0.5, 0.5), 1, size=25)
            exact = wilcoxon_differences(d, method="exact").p_value
            approx = wilcoxon_differences(d, method="normal_approx").p_value
            assert abs(exact - approx) <= 0.01

    def test_auto_switches_above_25(self):
        d = np.arange(1, 27) * np.where(np.arange(26) % 3, 1, -1)
        assert wilcoxon_differences(d).method == "normal_approx"
        assert wilcoxon_differences(d[:25]).method == "exact"

    def test_agrees_with_scipy(self):
        r = np.random.default_rng(3)
        for _ in range(20):
            d = r.normal(0.2, 1, size=15)
            assert abs(wilcoxon_differences(d).p_value - sps.wilcoxon(d, method="exact").pvalue) < 1e-12
            d = np.round(r.normal(0.2, 1, size=40), 1)
            d = d[d != 0]
            ref = sps.wilcoxon(d, method="approx", correction=True).pvalue
            assert abs(wilcoxon_differences(d).p_value - ref) < 1e-10

    def test_one_sided(self):
        assert wilcoxon_differences([1, 2, 3], "greater").p_value == 0.125
        assert wilcoxon_differences([1, 2, 3], "less").p_value == 1.0

    def test_pairs_use_predicted_minus_actual(self):
        pv = PairedVolumes(["a", "b", "c"], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
        assert wilcoxon_signed_rank(pv).statistic == 6.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-50, 50).filter(bool), min_size=1, max_size=15, unique_by=abs))
    def test_rank_sum_conservation(self, d):
        n = len(d)
        w_plus = wilcoxon_differences(d).statistic
        w_minus = wilcoxon_differences([-x for x in d]).statistic
        assert w_plus + w_minus == n * (n + 1) / 2
        assert 0 <= w_plus <= n * (n + 1) / 2

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1e4), min_size=3, max_size=12), st.lists(st.floats(0, 1e4), min_size=3, max_size=12),
           st.floats(0.01, 100))
    def test_scale_invariance(self, a, p, c):
        n = min(len(a), len(p))
        a, p = np.array(a[:n]), np.array(p[:n])
        ids = [str(i) for i in range(n)]
        r1 = wilcoxon_signed_rank(PairedVolumes(ids, a, p))
        r2 = wilcoxon_signed_rank(PairedVolumes(ids, a * c, p * c))
        if r1.n_effective == r2.n_effective:  # scaling can underflow tiny differences
            assert r1.statistic == r2.statistic
            assert abs(r1.p_value - r2.p_value) < 1e-12


class TestPearson:
    def test_hand_fixture(self):
        r = pearson_xy([1, 2, 3], [1, 2, 4])
        assert abs(r.r - 9 / math.sqrt(84)) < 1e-12

    def test_exact_lines(self):
        x = np.arange(5.0)
        assert pearson_xy(x, 2 * x + 1).r == pytest.approx(1.0, abs=1e-15)
        assert pearson_xy(x, -x).r == pytest.approx(-1.0, abs=1e-15)

    def test_p_value_matches_scipy(self):
        r = np.random.default_rng(1)
        for n in (3, 5, 20):
            x, y = r.normal(size=n), r.normal(size=n)
            ref = sps.pearsonr(x, y)
            got = pearson_xy(x, y)
            assert abs(got.r - ref.statistic) < 1e-12 and abs(got.p_value - ref.pvalue) < 1e-10

    def test_constant_series(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson_xy([1, 1, 1], [1, 2, 3])

    def test_too_few(self):
        with pytest.raises(ValueError):
            pearson_xy([1, 2], [1, 2])

    def test_affine_invariance_100_series(self):
        r = np.random.default_rng(2)
        for _ in range(100):
            n = int(r.integers(3, 30))
            x, y = r.normal(size=n), r.normal(size=n)
            a, b = r.uniform(0.1, 10), r.normal(0, 10)
            base = pearson_xy(x, y).r
            assert abs(pearson_xy(a * x + b, y).r - base) < 1e-12
            assert abs(pearson_xy(x, a * y + b).r - base) < 1e-12


class TestReport:
    def test_box_summary(self):
        assert box_summary([1, 2, 3, 4, 5]) == (1, 2, 3, 4, 5)
        assert box_summary([1, 2, 3, 4]) == (1, 1.75, 2.5, 3.25, 4)

    def test_perfect_predictions(self):
        pv = PairedVolumes(["a", "b", "c", "d"], [1.0, 5.0, 2.0, 8.0], [1.0, 5.0, 2.0, 8.0])
        rep = volume_report("m", pv)
        assert rep.wilcoxon.degenerate and rep.wilcoxon.p_value == 1.0
        assert rep.pearson.r == pytest.approx(1.0)
        assert all(a == p for a, p in rep.scatter)

    def test_pearson_skipped_for_two_pairs(self):
        rep = volume_report("m", PairedVolumes(["a", "b"], [1.0, 2.0], [2.0, 3.0]))
        assert rep.pearson is None and rep.notes

    def test_csv_round_trip(self):
        pv = PairedVolumes(["a", "b", "c"], [1.0, 2.0, 3.0], [2.0, 2.5, 5.0])
        assert PairedVolumes.from_csv(pv.to_csv()).predicted.tolist() == [2.0, 2.5, 5.0]
        rep = volume_report("m", pv)
        rows = read_stats_csv(stats_csv([rep]))
        assert rows[0]["W"] == rep.wilcoxon.statistic and rows[0]["pearson_r"] == rep.pearson.r
        assert stats_csv([rep]).splitlines()[0] == "model_id,W,wilcoxon_p,method,pearson_r,pearson_p,n"

    def test_paired_validation(self):
        with pytest.raises(ValueError):
            PairedVolumes(["a"], [-1.0], [1.0])
        with pytest.raises(ValueError):
            PairedVolumes([], [], [])
