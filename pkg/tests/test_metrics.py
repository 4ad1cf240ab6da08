"""Metric tests against brute-force oracles.

Every oracle here is deliberately slow and loop-based so it shares no
arithmetic path with the vectorized implementations.
"""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from vita.errors import NumericError, ShapeError
from vita.metrics import (MetricConfig, average_ranks, dsc, spearman, ssim,
                          wilcoxon_rank_sum_one_tailed)


def naive_ranks(values):
    """O(n^2) midranks: count of strictly smaller + half the tied block."""
    values = list(values)
    out = []
    for v in values:
        less = sum(1 for x in values if x < v)
        equal = sum(1 for x in values if x == v)
        out.append(less + (equal + 1) / 2.0)
    return np.array(out)


def naive_spearman(a, b):
    ra, rb = naive_ranks(np.ravel(a)), naive_ranks(np.ravel(b))
    da, db = ra - ra.mean(), rb - rb.mean()
    return float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum()))


def naive_ssim_windowed(a, b, config):
    size, sigma = config.ssim_window, config.ssim_sigma
    half = (size - 1) / 2.0
    kern = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2))
                      for j in range(size)] for i in range(size)])
    kern /= kern.sum()
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            wa, wb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            mu_a = float((kern * wa).sum())
            mu_b = float((kern * wb).sum())
            var_a = float((kern * (wa - mu_a) ** 2).sum())
            var_b = float((kern * (wb - mu_b) ** 2).sum())
            cov = float((kern * (wa - mu_a) * (wb - mu_b)).sum())
            num = (2 * mu_a * mu_b + config.ssim_c1) * (2 * cov + config.ssim_c2)
            den = (mu_a ** 2 + mu_b ** 2 + config.ssim_c1) * (var_a + var_b + config.ssim_c2)
            vals.append(num / den)
    return float(np.mean(vals))


class TestConfig:
    def test_defaults(self):
        c = MetricConfig()
        assert c.dsc_threshold_percentile == 50.0
        assert c.ssim_c1 == 0.01 ** 2 and c.ssim_c2 == 0.03 ** 2
        assert c.ssim_window == 11 and c.ssim_sigma == 1.5

    @pytest.mark.parametrize("kwargs", [
        dict(dsc_threshold_percentile=101.0),
        dict(ssim_window=10),
        dict(ssim_window=-3),
        dict(ssim_mode="fancy"),
        dict(comparison_resolution=0),
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            MetricConfig(**kwargs)


class TestSpearman:
    def test_perfect_and_reversed(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert spearman(a, a * 10 + 3) == pytest.approx(1.0, abs=1e-15)
        assert spearman(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_hand_case_with_ties(self):
        # ranks a: [1.5, 1.5, 3, 4], b: [4, 3, 1.5, 1.5]
        a = np.array([5.0, 5.0, 7.0, 9.0])
        b = np.array([4.0, 3.0, 1.0, 1.0])
        assert spearman(a, b) == pytest.approx(naive_spearman(a, b), abs=1e-15)
        assert spearman(a, b) < 0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_quadratic_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 60))
        # quantized values so ties occur routinely
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        assume_ok = len(set(a)) > 1 and len(set(b)) > 1
        if not assume_ok:
            pytest.skip("degenerate draw")
        assert spearman(a, b) == pytest.approx(naive_spearman(a, b), abs=1e-12)

    def test_constant_input_raises(self):
        with pytest.raises(NumericError, match="constant"):
            spearman(np.ones(5), np.arange(5.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            spearman(np.ones((2, 2)), np.ones(4))

    def test_2d_maps_rank_over_all_cells(self):
        rng = np.random.default_rng(77)
        a = rng.normal(size=(6, 6))
        b = rng.normal(size=(6, 6))
        assert spearman(a, b) == pytest.approx(naive_spearman(a, b), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=30),
           st.integers(0, 2 ** 31))
    def test_invariant_under_monotone_transform(self, vals, seed):
        a = np.array(vals, dtype=np.float64)
        assume(len(set(vals)) > 1)
        b = np.random.default_rng(seed).permutation(a)
        assume(len(set(b.tolist())) > 1)
        base = spearman(a, b)
        assert spearman(a ** 3, b) == pytest.approx(base, abs=1e-12)
        assert spearman(a, 5.0 * b + 2.0) == pytest.approx(base, abs=1e-12)
        assert spearman(-a, b) == pytest.approx(-base, abs=1e-12)

    def test_rank_helper_matches_naive(self):
        rng = np.random.default_rng(13)
        v = rng.integers(0, 5, size=25).astype(np.float64)
        np.testing.assert_allclose(average_ranks(v), naive_ranks(v), rtol=0, atol=0)


class TestDsc:
    def test_identical_maps_give_one(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(8, 8))
        assert dsc(a, a) == 1.0

    def test_hand_case_half_overlap(self):
        a = np.arange(1.0, 17.0).reshape(4, 4)       # top half below median
        b = a.T.copy()                               # mask rotates to right columns
        # masks: a > 8.5 -> bottom two rows; b > 8.5 -> right two columns;
        # overlap is the bottom-right 2x2 quadrant
        assert dsc(a, b) == 0.5

    def test_disjoint_masks_give_zero(self):
        a = np.array([[1.0, 1.0, 5.0, 5.0]])
        b = np.array([[5.0, 5.0, 1.0, 1.0]])
        assert dsc(a, b) == 0.0

    def test_both_empty_masks_give_one(self):
        # strict > leaves constant maps with empty masks
        assert dsc(np.ones((3, 3)), np.full((3, 3), 2.0)) == 1.0

    def test_percentile_config(self):
        a = np.arange(1.0, 17.0).reshape(4, 4)
        cfg = MetricConfig(dsc_threshold_percentile=75.0)
        # 75th percentile of 1..16 is 12.25 -> mask is the top 4 cells
        assert dsc(a, a, cfg) == 1.0
        b = np.roll(a, 1, axis=0)
        got = dsc(a, b, cfg)
        ma = a > np.percentile(a, 75.0)
        mb = b > np.percentile(b, 75.0)
        want = 2 * np.logical_and(ma, mb).sum() / (ma.sum() + mb.sum())
        assert got == pytest.approx(want, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dsc(np.ones((2, 3)), np.ones((3, 2)))


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(16, 16))
        assert ssim(a, a) == 1.0
        assert ssim(a, a, MetricConfig(ssim_mode="global")) == 1.0

    def test_constant_zero_vs_constant_one(self):
        a = np.zeros((16, 16))
        b = np.ones((16, 16))
        c1 = 0.01 ** 2
        want = c1 / (1.0 + c1)  # luminance term only; contrast/structure cancel
        for mode in ("windowed", "global"):
            got = ssim(a, b, MetricConfig(ssim_mode=mode))
            assert got == pytest.approx(want, rel=1e-12)
            assert got < 0.01

    @pytest.mark.parametrize("seed", range(4))
    def test_windowed_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(14, 13))
        b = np.clip(a + rng.normal(scale=0.2, size=(14, 13)), 0, 1)
        cfg = MetricConfig()
        assert ssim(a, b, cfg) == pytest.approx(naive_ssim_windowed(a, b, cfg), abs=1e-10)

    def test_global_hand_case(self):
        a = np.array([[0.0, 1.0], [0.0, 1.0]])
        b = np.array([[0.0, 0.0], [1.0, 1.0]])
        # identical means/variances, covariance 0
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        want = ((2 * 0.25 + c1) * c2) / ((0.25 + 0.25 + c1) * (0.25 + 0.25 + c2))
        got = ssim(a, b, MetricConfig(ssim_mode="global"))
        assert got == pytest.approx(want, rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(size=(15, 15))
        b = rng.uniform(size=(15, 15))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_window_larger_than_map(self):
        with pytest.raises(ShapeError, match="window"):
            ssim(np.ones((8, 8)), np.ones((8, 8)))

    def test_small_window_config(self):
        rng = np.random.default_rng(10)
        a = rng.uniform(size=(8, 8))
        b = rng.uniform(size=(8, 8))
        cfg = MetricConfig(ssim_window=5)
        assert -1.0 <= ssim(a, b, cfg) <= 1.0


class TestWilcoxon:
    def test_canonical_exact_case(self):
        # every split of {1..6} except the observed one has a smaller rank sum
        p = wilcoxon_rank_sum_one_tailed([4, 5, 6], [1, 2, 3])
        assert p == pytest.approx(0.05, abs=1e-15)

    def test_worst_case_is_one(self):
        assert wilcoxon_rank_sum_one_tailed([1, 2, 3], [4, 5, 6]) == 1.0

    def test_singletons(self):
        assert wilcoxon_rank_sum_one_tailed([2.0], [1.0]) == 0.5
        assert wilcoxon_rank_sum_one_tailed([1.0], [2.0]) == 1.0

    def test_direction_large_samples(self):
        rng = np.random.default_rng(5)
        b = rng.normal(size=30)
        a = b + 2.0
        assert wilcoxon_rank_sum_one_tailed(a, b) < 1e-4
        assert wilcoxon_rank_sum_one_tailed(b, a) > 0.999

    def test_identical_large_samples_near_half(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=20)
        p = wilcoxon_rank_sum_one_tailed(a, a.copy())
        assert abs(p - 0.5) < 0.05

    def test_all_tied_large_samples_exactly_half(self):
        # zero variance after tie correction falls back to 0.5
        assert wilcoxon_rank_sum_one_tailed(np.ones(12), np.ones(12)) == 0.5

    def test_exact_agrees_with_normal_at_boundary(self):
        rng = np.random.default_rng(7)
        a = rng.normal(loc=0.4, size=8)
        b = rng.normal(size=8)
        exact = wilcoxon_rank_sum_one_tailed(a, b, method="exact")
        approx = wilcoxon_rank_sum_one_tailed(a, b, method="normal")
        assert abs(exact - approx) <= 0.01

    def test_exact_handles_ties(self):
        # pooled [1,1,2,2]: a holds one of each tie group
        p = wilcoxon_rank_sum_one_tailed([1.0, 2.0], [1.0, 2.0])
        # observed midrank sum 5; subsets of {1.5,1.5,3.5,3.5} of size 2
        # with sum >= 5: the four mixed pairs and {3.5,3.5}
        assert p == pytest.approx(5.0 / 6.0, abs=1e-15)

    def test_empty_sample_raises(self):
        with pytest.raises(ValueError, match="non-empty"):
            wilcoxon_rank_sum_one_tailed([], [1.0])

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            wilcoxon_rank_sum_one_tailed([1.0], [2.0], method="bootstrap")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=7),
           st.lists(st.integers(0, 20), min_size=1, max_size=7))
    def test_complementary_tails_cover_everything(self, a, b):
        p_ab = wilcoxon_rank_sum_one_tailed(a, b)
        p_ba = wilcoxon_rank_sum_one_tailed(b, a)
        assert 0.0 <= p_ab <= 1.0 and 0.0 <= p_ba <= 1.0
        # both one-tailed p-values include the equality mass
        assert p_ab + p_ba >= 1.0 - 1e-12
