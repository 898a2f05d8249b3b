import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from skimage.metrics import structural_similarity

from hcunroll import metrics as M
from hcunroll.errors import ContractError, ShapeError


def _img(seed, n=32):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, n)) * np.exp(1j * rng.uniform(-np.pi, np.pi, (n, n)))


class TestPSNR:
    def test_perfect(self):
        x = _img(0)
        assert M.psnr(x, x) == math.inf

    def test_hand_example(self):
        assert M.psnr(np.array([[1.0, 0.0]]), np.zeros((1, 2))) == pytest.approx(3.0103, abs=1e-4)
        assert M.psnr(np.array([[1.0, 0.0]]), np.zeros((1, 2))) == pytest.approx(10 * np.log10(2), rel=1e-15)

    def test_scale_invariant(self):
        a, b = _img(1), _img(2)
        assert M.psnr(3.7 * a, 3.7 * b) == pytest.approx(M.psnr(a, b), rel=1e-12)

    def test_phase_invariant(self):
        a, b = _img(3), _img(4)
        rot = np.exp(1j * 0.9)
        assert M.psnr(a * rot, b * np.conj(rot)) == pytest.approx(M.psnr(a, b), rel=1e-12)

    def test_monotone_in_error(self):
        a = np.abs(_img(5))
        d = np.random.default_rng(6).standard_normal(a.shape)
        vals = [M.psnr(a, a + s * d) for s in (0.01, 0.02, 0.05, 0.1)]
        assert vals == sorted(vals, reverse=True)

    def test_errors(self):
        with pytest.raises(ShapeError):
            M.psnr(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(ContractError):
            M.psnr(np.zeros((2, 2)), np.ones((2, 2)))


class TestSSIM:
    def test_identical(self):
        x = _img(7)
        assert M.ssim(x, x) == 1.0

    def test_matches_skimage(self):
        a, b = np.abs(_img(8)), np.abs(_img(9))
        b = 0.5 * a + 0.5 * b
        L = a.max()
        ref = structural_similarity(a, b, win_size=7, data_range=L, use_sample_covariance=False,
                                    gaussian_weights=False, K1=0.01, K2=0.03, full=True)[1]
        # skimage averages over all pixels; compare on the valid interior windows
        assert M.ssim(a, b) == pytest.approx(ref[3:-3, 3:-3].mean(), rel=1e-10)

    def test_heavy_noise(self):
        a = np.abs(_img(10, 64))
        b = a + np.random.default_rng(11).normal(0, a.max(), a.shape)
        assert M.ssim(a, b) < 0.5

    def test_swap_symmetric_with_fixed_range(self):
        a, b = np.abs(_img(12)), np.abs(_img(13))
        assert M.ssim(a, b, data_range=1.0) == pytest.approx(M.ssim(b, a, data_range=1.0), rel=1e-13)

    def test_too_small(self):
        with pytest.raises(ContractError):
            M.ssim(np.ones((6, 10)), np.ones((6, 10)))


def _brute_wilcoxon_p(d):
    """Two-sided exact p by enumerating all sign assignments of the ranks."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    mean = ranks.sum() / 2
    count = 0
    total = 0
    for signs in product([0, 1], repeat=len(d)):
        wp = ranks[np.array(signs, bool)].sum()
        total += 1
        if abs(wp - mean) >= abs(w - mean) - 1e-9:
            count += 1
    return count / total


class TestWilcoxon:
    def test_equal_samples(self):
        a = np.arange(8.0)
        assert M.wilcoxon_signed_rank(a, a) == (0.0, 1.0)

    def test_all_positive_n8(self):
        a = np.arange(1.0, 9.0)
        stat, p = M.wilcoxon_signed_rank(a + np.arange(1.0, 9.0) * 0.1, a)
        assert stat == 0.0
        assert p == 2 / 2**8 == 0.0078125

    @pytest.mark.parametrize("seed", range(6))
    def test_exact_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 10))
        a = rng.standard_normal(n)
        b = a + rng.standard_normal(n) * 0.8 + 0.3
        _, p = M.wilcoxon_signed_rank(a, b)
        assert p == pytest.approx(_brute_wilcoxon_p(a - b), rel=1e-12)

    def test_exact_with_ties_matches_enumeration(self):
        a = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        b = np.array([0.0, 1.0, 4.0, 3.0, 5.5, 4.0, 9.0, 6.0])
        _, p = M.wilcoxon_signed_rank(a, b)
        assert p == pytest.approx(_brute_wilcoxon_p(a - b), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_approx_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        a = np.round(rng.standard_normal(25), 1)
        b = np.round(a + rng.standard_normal(25) * 0.5 + 0.1, 1)
        stat, p = M.wilcoxon_signed_rank(a, b)
        ref = stats.wilcoxon(a, b, zero_method="wilcox", correction=True, method="approx")
        assert stat == pytest.approx(ref.statistic)
        assert p == pytest.approx(ref.pvalue, rel=1e-10)

    def test_shift_detected(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal(20)
        _, p = M.wilcoxon_signed_rank(a + 0.5 + rng.normal(0, 0.1, 20), a)
        assert p < 0.05

    def test_too_few(self):
        with pytest.raises(ContractError):
            M.wilcoxon_signed_rank([1, 2, 3], [2, 3, 4])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=6, max_size=25))
    def test_p_range_and_symmetry(self, pairs):
        a = [float(x) for x, _ in pairs]
        b = [float(y) for _, y in pairs]
        s1, p1 = M.wilcoxon_signed_rank(a, b)
        s2, p2 = M.wilcoxon_signed_rank(b, a)
        assert 0 < p1 <= 1
        assert p1 == pytest.approx(p2, rel=1e-12)
        assert s1 == s2


class _Item:
    def __init__(self, seed):
        self.x_ref = _img(seed, 16)
        self._zf = self.x_ref + 0.1 * _img(seed + 100, 16)

    def zero_filled(self):
        return self._zf


class TestHarness:
    def test_rows_ordered_and_complete(self, monkeypatch):
        items = [_Item(k) for k in range(7)]
        methods = {"zero_filled": lambda it: it.zero_filled(), "exact": lambda it: it.x_ref}
        monkeypatch.setenv("THREADS", "3")
        rows = M.score_methods(items, methods)
        assert [(r.item, r.method) for r in rows] == [(k, m) for k in range(7) for m in methods]
        monkeypatch.setenv("THREADS", "1")
        assert M.score_methods(items, methods) == rows

    def test_csv_and_perfect_sentinel(self):
        rows = [M.MetricsRow(0, "a", math.inf, 1.0), M.MetricsRow(0, "b", 20.5, 0.75)]
        text = M.rows_to_csv(rows)
        assert text.splitlines() == ["item,method,psnr_db,ssim", "0,a,perfect,1.000000",
                                     "0,b,20.500000,0.750000"]

    def test_summary(self):
        rows = [M.MetricsRow(k, "m", float(v), 0.5) for k, v in enumerate([1, 2, 3, 4, 10])]
        rows.append(M.MetricsRow(5, "m", math.inf, 1.0))
        s = M.summarize(rows)["m"]
        assert s["psnr_perfect"] == 1.0
        assert s["psnr_median"] == np.percentile([1, 2, 3, 4, 10], 50) == 3.0
        assert s["psnr_mean"] == 4.0
        assert "m.psnr_q1=2.000000" in M.summary_text({"m": s})

    def test_pairwise_self_comparison(self):
        rows = [M.MetricsRow(k, name, 20.0 + k, 0.9) for k in range(8) for name in ("a", "b")]
        assert M.pairwise_wilcoxon(rows) == [("a", "b", 0.0, 1.0)]

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("THREADS", "2")
        assert M.worker_count() == 2
        monkeypatch.delenv("THREADS")
        assert M.worker_count() >= 1
