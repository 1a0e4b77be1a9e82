import numpy as np
import pytest

from advcbir import evalmetrics, imagecore
from advcbir.errors import DataError
from advcbir.evalmetrics import RelevanceJudgments, average_precision, mean_average_precision, ssim


def brute_force_ap(ranking, judg):
    """Independent oracle: walk the junk-stripped ranking accumulating precision."""
    relevant = judg.good | judg.ok
    kept = [r for r in ranking if r not in judg.junk]
    total = 0.0
    hits = 0
    for pos, item in enumerate(kept, start=1):
        if item in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


class TestAveragePrecision:
    def test_interleaved(self):
        judg = RelevanceJudgments(good={"a", "c"})
        ap = average_precision(["a", "x", "c"], judg)
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_perfect_ranking(self):
        judg = RelevanceJudgments(good={"a"}, ok={"b"})
        assert average_precision(["a", "b", "x", "y"], judg) == 1.0

    def test_junk_is_removed_not_penalized(self):
        judg = RelevanceJudgments(good={"r"}, junk={"j"})
        assert average_precision(["j", "r"], judg) == 1.0

    def test_missing_relevant_counts_zero(self):
        judg = RelevanceJudgments(good={"a", "zzz"})
        assert average_precision(["a", "b"], judg) == pytest.approx(0.5)

    def test_empty_relevant_errors(self):
        with pytest.raises(DataError):
            average_precision(["a"], RelevanceJudgments(junk={"a"}))

    def test_duplicate_ranking_entry_errors(self):
        with pytest.raises(DataError):
            average_precision(["a", "a"], RelevanceJudgments(good={"a"}))

    def test_overlapping_sets_rejected(self):
        with pytest.raises(DataError):
            RelevanceJudgments(good={"a"}, junk={"a"})

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n = int(rng.integers(1, 21))
            items = [f"i{k}" for k in range(n)]
            labels = rng.integers(0, 4, size=n)  # 0 plain, 1 good, 2 ok, 3 junk
            judg = RelevanceJudgments(
                good={i for i, l in zip(items, labels) if l == 1},
                ok={i for i, l in zip(items, labels) if l == 2},
                junk={i for i, l in zip(items, labels) if l == 3},
            )
            if not judg.relevant:
                continue
            ranking = list(rng.permutation(items))
            assert average_precision(ranking, judg) == pytest.approx(
                brute_force_ap(ranking, judg), abs=1e-12)


class TestMeanAveragePrecision:
    def test_percent_formatting_value(self):
        assert mean_average_precision([0.7839]) == pytest.approx(78.39)

    def test_identical_values(self):
        assert mean_average_precision([0.4, 0.4, 0.4]) == pytest.approx(40.0)

    def test_mean_of_extremes(self):
        assert mean_average_precision([1.0, 0.0]) == pytest.approx(50.0)

    def test_permutation_invariant(self, rng):
        aps = list(rng.uniform(0, 1, 9))
        assert mean_average_precision(aps) == pytest.approx(
            mean_average_precision(list(reversed(aps))))

    def test_empty_errors(self):
        with pytest.raises(DataError):
            mean_average_precision([])


class TestSsim:
    def test_identity(self, rng):
        img = rng.uniform(0, 1, (24, 24, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, (20, 20, 3))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_constant_shift_closed_form(self):
        a = np.full((16, 16), 0.4)
        b = np.full((16, 16), 0.5)
        c1 = (0.01) ** 2
        expected = (2 * 0.4 * 0.5 + c1) / (0.4 ** 2 + 0.5 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0.2, 0.8, (48, 48, 3))
        values = []
        for sigma in np.linspace(0.01, 0.3, 10):
            values.append(ssim(img, imagecore.add_gaussian_noise(img, sigma, 11)))
        assert all(values[i] >= values[i + 1] for i in range(len(values) - 1))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            ssim(rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (17, 16, 3)))
