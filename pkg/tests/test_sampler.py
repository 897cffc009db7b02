"""Sampler unit tests: oracle equivalence, table handling, word source."""

import math

import numpy as np
import pytest

from cdtleak.errors import DomainError, TableFormatError
from cdtleak.sampler import (
    MASK63,
    MASK64,
    GaussCdtTable,
    SamplerParams,
    SequenceWordSource,
    WordSource,
    default_table,
    derive_subseed,
    generate_polynomials,
    load_cdt_table,
    msb_mask,
    parse_cdt_table,
    sample_coefficient,
    sigma_fg,
    splitmix64,
    word_block,
)

from naive_sampler import branchy_model, interpret_listing, scaled_word_grid

# Hand-checked value: 1.17 * sqrt(12289) / sqrt(1024), evaluated with a
# 60-digit calculator and rounded to double precision.
SIGMA_FG_512 = 4.053163803303075
SIGMA_FG_1024 = 2.8660196105754624


def _run_both(words, table, params):
    coeff = sample_coefficient(table, params, SequenceWordSource(words))
    value, iterations = interpret_listing(words, table.entries, params.outer_count)
    return coeff, value, iterations


def _assert_equivalent(words, table, params):
    coeff, value, iterations = _run_both(words, table, params)
    assert coeff.value == value
    assert coeff.value == branchy_model(words, table.entries, params.outer_count)
    assert len(coeff.leaks) == len(iterations)
    for rec, ref in zip(coeff.leaks, iterations):
        assert [m != 0 for m in rec.inner_masks] == ref.fired
        assert (rec.neg_mask != 0) == bool(ref.neg)
        assert rec.v_value == ref.v_before_sign
        assert rec.signed_v == ref.v_signed


class TestOracleEquivalence:
    def test_random_streams_default_table(self):
        """10^4 random word streams against the naive interpreter."""
        table = default_table()
        params = SamplerParams(logn=9)
        rng = np.random.default_rng(0x5EED)
        draws = rng.integers(0, 1 << 64, size=(10000, 2 * params.outer_count), dtype=np.uint64)
        for row in draws:
            _assert_equivalent([int(w) for w in row], table, params)

    def test_random_streams_all_ring_dimensions(self):
        table = default_table()
        rng = np.random.default_rng(1234)
        for logn in range(1, 11):
            params = SamplerParams(logn=logn)
            for _ in range(40):
                words = [
                    int(w)
                    for w in rng.integers(0, 1 << 64, size=2 * params.outer_count, dtype=np.uint64)
                ]
                _assert_equivalent(words, table, params)

    def test_exhaustive_grid_two_entry_table(self):
        """Every pair of coarse 8-bit-scaled draws, 2-entry table."""
        table = GaussCdtTable(entries=(150 << 55, (77 << 55) + 12345))
        params = SamplerParams(logn=10)
        grid = scaled_word_grid()
        for w1 in grid:
            for w2 in grid:
                _assert_equivalent([w1, w2], table, params)

    def test_table_entry_boundary_words(self):
        """Draws exactly at, just below, and just above each threshold."""
        table = GaussCdtTable(entries=(3 << 61, 1 << 61))
        params = SamplerParams(logn=10)
        lows = []
        for e in table.entries:
            lows += [e - 1, e, e + 1]
        lows += [0, 1, MASK63 - 1, MASK63]
        for sign in (0, 1 << 63):
            for low1 in lows:
                for low2 in lows:
                    _assert_equivalent([sign | low1, low2], table, params)


class TestSampleCoefficient:
    def test_zero_forcing_stream(self):
        # Both draws zero: first draw is below entries[0], so the latch
        # never fires and the iteration contributes nothing.
        table = default_table()
        params = SamplerParams(logn=10)
        coeff = sample_coefficient(table, params, SequenceWordSource([0, 0]))
        rec = coeff.leaks[0]
        assert coeff.value == 0
        assert rec.v_value == 0
        assert rec.neg_mask == 0
        assert all(m == 0 for m in rec.inner_masks)

    def test_forced_latch_at_slot_five(self):
        # First draw clears the zero branch, second lands in
        # [entries[5], entries[4]), so the scan must latch at k=5.
        table = default_table()
        params = SamplerParams(logn=10)
        words = [table.entries[0], table.entries[5]]
        coeff = sample_coefficient(table, params, SequenceWordSource(words))
        assert coeff.value == 5
        masks = coeff.leaks[0].inner_masks
        assert masks[4] == MASK64
        assert sum(m != 0 for m in masks) == 1

    def test_sign_bit_negates(self):
        table = default_table()
        params = SamplerParams(logn=10)
        words = [(1 << 63) | table.entries[0], table.entries[3]]
        coeff = sample_coefficient(table, params, SequenceWordSource(words))
        assert coeff.value == -3
        assert coeff.leaks[0].neg_mask == MASK64
        assert coeff.leaks[0].v_value == 3

    def test_leak_record_invariants_bulk(self):
        """Mask domain, latch, and reconstruction over random seeds."""
        table = default_table()
        params = SamplerParams(logn=9)
        for i in range(20000):
            source = WordSource(seed=derive_subseed(0xABCDEF, i))
            coeff = sample_coefficient(table, params, source)
            total = 0
            for rec in coeff.leaks:
                assert all(m in (0, MASK64) for m in rec.inner_masks)
                assert rec.neg_mask in (0, MASK64)
                assert sum(m != 0 for m in rec.inner_masks) <= 1
                v = 0
                for k, m in enumerate(rec.inner_masks, start=1):
                    v |= k & m
                assert v == rec.v_value
                assert 0 <= rec.v_value <= table.inner_count
                expected = -rec.v_value if rec.neg_mask else rec.v_value
                assert rec.signed_v == expected
                total += rec.signed_v
            assert coeff.value == total
            assert abs(coeff.value) <= params.outer_count * table.inner_count

    def test_monte_carlo_sigma_logn9(self):
        """Empirical deviation within 15% of the analytic target."""
        table = default_table()
        params = SamplerParams(logn=9)
        source = WordSource(seed=20240817)
        values = [
            sample_coefficient(table, params, source).value for _ in range(100000)
        ]
        arr = np.array(values, dtype=np.float64)
        assert abs(arr.mean()) < 0.2
        target = sigma_fg(12289, 512)
        assert abs(arr.std() - target) / target < 0.15


class TestGeneratePolynomials:
    def test_counts_logn9(self):
        f, g = generate_polynomials(7, SamplerParams(logn=9))
        assert len(f) == 512 and len(g) == 512
        for poly in (f, g):
            for coeff in poly.coefficients:
                assert len(coeff.leaks) == 2
                assert all(len(r.inner_masks) == 26 for r in coeff.leaks)

    def test_determinism(self):
        a = generate_polynomials(99, SamplerParams(logn=8))
        b = generate_polynomials(99, SamplerParams(logn=8))
        assert a == b

    def test_distinct_seeds_differ(self):
        f1, _ = generate_polynomials(1, SamplerParams(logn=9))
        f2, _ = generate_polynomials(2, SamplerParams(logn=9))
        assert f1.values() != f2.values()


class TestWordSource:
    def test_deterministic(self):
        a = WordSource(seed=42)
        b = WordSource(seed=42)
        assert [a.next_u64() for _ in range(16)] == [b.next_u64() for _ in range(16)]

    def test_distinct_seeds_diverge_immediately(self):
        a = WordSource(seed=42)
        b = WordSource(seed=43)
        wa = [a.next_u64() for _ in range(4)]
        wb = [b.next_u64() for _ in range(4)]
        assert all(x != y for x, y in zip(wa, wb))

    def test_bit_frequencies_over_a_million_words(self):
        words = word_block(0xFEEDFACE, 0, 1_000_000)
        bits = np.unpackbits(words.view(np.uint8)).reshape(-1, 64)
        freq = bits.mean(axis=0)
        assert freq.min() > 0.49 and freq.max() < 0.51

    def test_word_block_matches_scalar_source(self):
        src = WordSource(seed=77, counter=5)
        scalar = [src.next_u64() for _ in range(100)]
        block = word_block(77, 5, 100)
        assert scalar == [int(w) for w in block]

    def test_counter_advances_by_one(self):
        src = WordSource(seed=5, counter=10)
        src.next_u64()
        assert src.counter == 11

    def test_seed_range_validated(self):
        with pytest.raises(DomainError):
            WordSource(seed=-1)
        with pytest.raises(DomainError):
            WordSource(seed=1 << 64)

    def test_sequence_source_exhaustion(self):
        src = SequenceWordSource([1, 2])
        assert src.next_u64() == 1
        assert src.next_u64() == 2
        with pytest.raises(DomainError):
            src.next_u64()

    def test_sequence_source_fallback(self):
        fallback = WordSource(seed=9)
        expected = WordSource(seed=9).next_u64()
        src = SequenceWordSource([5], fallback=fallback)
        assert src.next_u64() == 5
        assert src.next_u64() == expected

    def test_splitmix_known_vector(self):
        # First outputs of the SplitMix64 reference stream for seed 0,
        # as published with the original algorithm.
        s = WordSource(seed=0)
        assert s.next_u64() == 0xE220A8397B1DCDAF
        assert s.next_u64() == 0x6E789E6AA1B965F4
        assert s.next_u64() == 0x06C45D188009454F

    def test_derive_subseed_is_stream_output(self):
        assert derive_subseed(0, 0) == 0xE220A8397B1DCDAF
        assert derive_subseed(0, 2) == 0x06C45D188009454F
        with pytest.raises(DomainError):
            derive_subseed(0, -1)

    def test_splitmix_is_bijective_on_samples(self):
        words = [splitmix64(x) for x in range(4096)]
        assert len(set(words)) == 4096


class TestMsbMask:
    def test_clear(self):
        assert msb_mask(0) == 0
        assert msb_mask(MASK63) == 0

    def test_set(self):
        assert msb_mask(1 << 63) == MASK64
        assert msb_mask(MASK64) == MASK64

    def test_domain(self):
        with pytest.raises(DomainError):
            msb_mask(-1)
        with pytest.raises(DomainError):
            msb_mask(1 << 64)


class TestTable:
    def test_default_table_shape(self):
        table = default_table()
        assert len(table) == 27
        assert table.inner_count == 26
        assert all(0 <= e <= MASK63 for e in table.entries)
        tail = table.entries[1:]
        assert all(a >= b for a, b in zip(tail, tail[1:]))

    def test_default_table_head_values(self):
        # The first entry thresholds the zero branch and is smaller
        # than the head of the tail scan.
        table = default_table()
        assert table.entries[0] == 1283868770400643928
        assert table.entries[1] == 6416574995475331444
        assert table.entries[-1] == 0

    def test_parse_comments_and_blanks(self):
        table = parse_cdt_table("# c\n10\n\n 5 # inline\n3\n")
        assert table.entries == (10, 5, 3)

    def test_parse_garbage_line(self):
        with pytest.raises(TableFormatError):
            parse_cdt_table("10\nbanana\n")

    def test_too_short(self):
        with pytest.raises(TableFormatError):
            GaussCdtTable(entries=(5,))

    def test_tail_must_be_non_increasing(self):
        with pytest.raises(TableFormatError):
            GaussCdtTable(entries=(1, 2, 3))
        # entries[0] is a separate threshold and may sit below the tail.
        GaussCdtTable(entries=(1, 3, 2))

    def test_top_bit_must_be_clear(self):
        with pytest.raises(TableFormatError):
            GaussCdtTable(entries=(1 << 63, 5))

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_cdt_table(tmp_path / "nope.txt")

    def test_load_round_trip(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("7\n6\n5\n")
        assert load_cdt_table(path).entries == (7, 6, 5)


class TestParams:
    def test_outer_count(self):
        assert SamplerParams(logn=9).outer_count == 2
        assert SamplerParams(logn=10).outer_count == 1
        assert SamplerParams(logn=1).outer_count == 512

    def test_n(self):
        assert SamplerParams(logn=9).n == 512
        assert SamplerParams(logn=10).n == 1024

    def test_validation(self):
        with pytest.raises(DomainError):
            SamplerParams(logn=0)
        with pytest.raises(DomainError):
            SamplerParams(logn=11)
        with pytest.raises(DomainError):
            SamplerParams(logn=9, q=0)


class TestSigmaFg:
    def test_exact_small_case(self):
        assert sigma_fg(4, 2) == pytest.approx(1.17, abs=1e-15)

    def test_falcon_512(self):
        assert sigma_fg(12289, 512) == pytest.approx(SIGMA_FG_512, abs=1e-12)

    def test_falcon_1024(self):
        assert sigma_fg(12289, 1024) == pytest.approx(SIGMA_FG_1024, abs=1e-12)

    def test_scaling_law(self):
        assert sigma_fg(12289, 1024) == pytest.approx(
            sigma_fg(12289, 512) / math.sqrt(2), rel=1e-14
        )

    def test_domain(self):
        with pytest.raises(DomainError):
            sigma_fg(0, 512)
        with pytest.raises(DomainError):
            sigma_fg(12289, 0)
