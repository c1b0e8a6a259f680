"""Numeric primitives: alphabet bookkeeping, entropy, softmax, soft threshold."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from billetdec.core import (
    DEFAULT_SYMBOLS,
    Alphabet,
    check_distribution,
    db_binarize,
    entropy,
    row_entropies,
    softmax,
)


def ref_entropy(probs):
    # independent reference: plain python loop, natural log
    total = 0.0
    for p in probs:
        if p > 0.0:
            total -= p * math.log(p)
    return total


class TestAlphabet:
    def test_default_has_36_symbols_and_blank_last(self):
        a = Alphabet.default()
        assert a.symbols == DEFAULT_SYMBOLS
        assert len(a.symbols) == 36
        assert a.blank_index == 36
        assert a.num_classes == 37

    def test_index_symbol_round_trip(self):
        a = Alphabet.default()
        for i, ch in enumerate(a.symbols):
            assert a.index_of(ch) == i
            assert a.symbol_of(i) == ch

    def test_blank_renders_as_underscore(self):
        assert Alphabet.default().symbol_of(36) == "_"

    def test_contains(self):
        a = Alphabet("AB1")
        assert "A" in a and "1" in a
        assert "C" not in a
        assert "_" not in a

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Alphabet("")

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            Alphabet("ABA")

    def test_rejects_whitespace_and_underscore(self):
        with pytest.raises(ValueError):
            Alphabet("A B")
        with pytest.raises(ValueError):
            Alphabet("A_")

    def test_unknown_symbol_raises(self):
        with pytest.raises(ValueError):
            Alphabet.default().index_of("a")

    def test_out_of_range_index_raises(self):
        with pytest.raises(ValueError):
            Alphabet.default().symbol_of(37)
        with pytest.raises(ValueError):
            Alphabet.default().symbol_of(-1)


class TestCheckDistribution:
    def test_accepts_valid(self):
        out = check_distribution([0.25, 0.25, 0.5])
        assert out.dtype == np.float64

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            check_distribution([0.5, 0.6])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            check_distribution([1.2, -0.2])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            check_distribution([np.nan, 1.0])

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            check_distribution(np.full((2, 2), 0.25))

    def test_sum_tolerance_is_tight(self):
        ok = np.array([0.5, 0.5 + 0.9e-9])
        check_distribution(ok)
        bad = np.array([0.5, 0.5 + 1.1e-9])
        with pytest.raises(ValueError):
            check_distribution(bad)


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_is_log_c(self):
        c = 37
        h = entropy(np.full(c, 1.0 / c))
        assert abs(h - math.log(c)) < 1e-12
        assert abs(h - 3.6109179126442243) < 1e-12

    def test_frozen_value(self):
        # hand-derived: -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert abs(entropy([0.9, 0.1]) - 0.3250829733914482) < 1e-15

    def test_matches_reference_on_random_distributions(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(rng.integers(2, 12)))
            assert abs(entropy(p) - ref_entropy(p)) < 1e-12

    def test_validates_input(self):
        with pytest.raises(ValueError):
            entropy([0.7, 0.7])

    @given(st.integers(2, 20), st.integers(0, 2**32 - 1))
    def test_bounds(self, c, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(c))
        h = entropy(p)
        assert 0.0 <= h <= math.log(c) + 1e-12

    def test_row_entropies_matches_scalar(self):
        rng = np.random.default_rng(1)
        mat = rng.dirichlet(np.ones(5), size=8)
        rows = row_entropies(mat)
        assert rows.shape == (8,)
        for r, p in zip(rows, mat):
            assert abs(r - entropy(p)) < 1e-12


class TestSoftmax:
    def test_rows_are_distributions(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(6, 9), scale=5.0)
        p = softmax(z, axis=1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0.0)

    def test_extreme_logits_do_not_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_shift_invariance(self):
        z = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(softmax(z), softmax(z + 123.0), atol=1e-12)

    def test_matches_direct_formula(self):
        z = np.array([0.1, 0.2, 0.7])
        direct = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(softmax(z), direct, atol=1e-15)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax(np.array([np.inf, 0.0]))


class TestDbBinarize:
    def test_frozen_value(self):
        # sigmoid(50 * (0.6 - 0.5)) = 1 / (1 + e^-5)
        assert abs(db_binarize(0.6, 0.5) - 0.9933071490757153) < 1e-15

    def test_at_threshold_is_half(self):
        assert db_binarize(0.5, 0.5) == 0.5

    def test_well_below_threshold_near_zero(self):
        assert db_binarize(0.0, 0.9, k=50.0) < 1e-15

    def test_complementarity(self):
        # sigma(z) + sigma(-z) == 1
        for d in (0.0, 0.05, 0.2, 0.49):
            up = db_binarize(0.5 + d, 0.5)
            down = db_binarize(0.5 - d, 0.5)
            assert abs(up + down - 1.0) < 1e-12

    def test_large_k_no_overflow(self):
        assert db_binarize(1.0, 0.0, k=1e6) == 1.0
        assert db_binarize(0.0, 1.0, k=1e6) == 0.0

    def test_array_inputs(self):
        p = np.array([0.2, 0.5, 0.8])
        t = np.full(3, 0.5)
        out = db_binarize(p, t)
        assert out.shape == (3,)
        assert out[0] < 0.01 and out[1] == 0.5 and out[2] > 0.99

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            db_binarize(np.array([0.1, 0.2]), 0.5)

    def test_nonpositive_k_raises(self):
        with pytest.raises(ValueError):
            db_binarize(0.5, 0.5, k=0.0)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_p(self, a, b):
        lo, hi = sorted((a, b))
        assert db_binarize(lo, 0.5) <= db_binarize(hi, 0.5)
