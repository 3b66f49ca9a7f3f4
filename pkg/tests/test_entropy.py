"""Tests for the range coder and its probability models.

The CDF quantizer oracle recomputes bin probabilities with mpmath at 50
digits and re-implements the quantization rules from scratch; the
production tables must match it exactly. Round-trip and rate-bound
properties run over many seeded configurations.
"""

import math

import mpmath as mp
import numpy as np
import pytest

from bnvc.entropy import (
    TOTAL,
    GaussianModel,
    GaussianParams,
    LogisticModel,
    QuantizedCdf,
    UniformModel,
    build_gaussian_cdf,
    build_gaussian_cdf_batch,
    build_gaussian_cdf_rows,
    build_logistic_cdf,
    build_logistic_cdf_rows,
    estimate_bits,
    gaussian_support,
    range_decode,
    range_encode,
    row_support_bounds,
)
from bnvc.errors import CorruptStreamError, UsageError


def _oracle_quantize(probs):
    """Straightforward reimplementation of the quantization rules."""
    freq = []
    for p in probs:
        f = int(np.rint(p * TOTAL))
        freq.append(max(1, f))
    freq = np.array(freq, dtype=np.int64)
    diff = TOTAL - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    while diff < 0:
        i = int(np.argmax(freq))
        take = min(int(freq[i]) - 1, -diff)
        freq[i] -= take
        diff += take
    return freq


def _oracle_gaussian_freqs(mean, scale, lo, hi):
    mp.mp.dps = 50
    sigma = min(max(scale, 0.04), 16.0)
    edges = [(mp.mpf(s) - mp.mpf("0.5") - mp.mpf(mean)) / mp.mpf(sigma) for s in range(lo, hi + 2)]
    cdf = [mp.ncdf(e) for e in edges]
    raw = [cdf[i + 1] - cdf[i] for i in range(len(cdf) - 1)]
    mass = mp.fsum(raw)
    probs = np.array([float(p / mass) for p in raw])
    return _oracle_quantize(probs)


class TestGaussianCdf:
    def test_flat_limit_near_uniform(self):
        cdf = build_gaussian_cdf(GaussianParams(0.0, 17.0), (-8, 8))
        assert cdf.freq.sum() == TOTAL
        assert cdf.freq.max() / cdf.freq.min() < 2.0

    def test_delta_limit_min_frequency(self):
        cdf = build_gaussian_cdf(GaussianParams(0.0, 0.04), (-8, 8))
        assert len(cdf) == 17
        assert cdf.freq.sum() == TOTAL
        center = cdf.freq[8]  # symbol 0
        assert center >= TOTAL - 17
        assert cdf.freq.min() >= 1

    def test_matches_high_precision_oracle_exactly(self):
        got = build_gaussian_cdf(GaussianParams(1.3, 2.0), (-20, 20)).freq
        want = _oracle_gaussian_freqs(1.3, 2.0, -20, 20)
        np.testing.assert_array_equal(got, want)

    def test_matches_oracle_on_seeded_params(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            mean = float(rng.uniform(-5, 5))
            scale = float(np.exp(rng.uniform(np.log(0.04), np.log(8.0))))
            lo, hi = gaussian_support(np.array([mean]), np.array([scale]))
            got = build_gaussian_cdf(GaussianParams(mean, scale), (lo, hi)).freq
            want = _oracle_gaussian_freqs(mean, scale, lo, hi)
            np.testing.assert_array_equal(got, want)

    def test_pure_function(self):
        a = build_gaussian_cdf(GaussianParams(0.7, 1.1), (-30, 30))
        b = build_gaussian_cdf(GaussianParams(0.7, 1.1), (-30, 30))
        np.testing.assert_array_equal(a.freq, b.freq)
        np.testing.assert_array_equal(a.cum, b.cum)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        means = rng.uniform(-4, 4, size=40)
        scales = np.exp(rng.uniform(np.log(0.04), np.log(6.0), size=40))
        support = gaussian_support(means, scales)
        batch = build_gaussian_cdf_batch(means, scales, support)
        for mu, sig, cdf in zip(means, scales, batch):
            single = build_gaussian_cdf(GaussianParams(float(mu), float(sig)), support)
            np.testing.assert_array_equal(cdf.freq, single.freq)

    def test_rows_builder_matches_single_exactly(self):
        rng = np.random.default_rng(21)
        means = rng.uniform(-30, 30, size=60)
        scales = np.exp(rng.uniform(np.log(0.04), np.log(16.0), size=60))
        rows = build_gaussian_cdf_rows(means, scales)
        lo, hi = row_support_bounds(means, scales)
        for i, cdf in enumerate(rows):
            assert cdf.s_min == lo[i] and cdf.s_max == hi[i]
            single = build_gaussian_cdf(GaussianParams(float(means[i]), float(scales[i])), (int(lo[i]), int(hi[i])))
            np.testing.assert_array_equal(cdf.freq, single.freq)
        log_rows = build_logistic_cdf_rows(means, scales)
        for i, cdf in enumerate(log_rows):
            single = build_logistic_cdf(float(means[i]), float(scales[i]), (int(lo[i]), int(hi[i])))
            np.testing.assert_array_equal(cdf.freq, single.freq)

    def test_invariants_over_seeds(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            mean = float(rng.uniform(-10, 10))
            scale = float(np.exp(rng.uniform(np.log(0.04), np.log(16.0))))
            support = gaussian_support(np.array([mean]), np.array([scale]))
            cdf = build_gaussian_cdf(GaussianParams(mean, scale), support)
            assert cdf.freq.min() >= 1
            assert cdf.freq.sum() == TOTAL
            assert np.all(np.diff(cdf.cum) >= 1)
            assert cdf.cum[0] == 0 and cdf.cum[-1] == TOTAL

    def test_empty_support_rejected(self):
        with pytest.raises(UsageError):
            build_gaussian_cdf(GaussianParams(0.0, 1.0), (5, 4))

    def test_logistic_cdf_sane(self):
        cdf = build_logistic_cdf(0.3, 1.5, (-20, 20))
        assert cdf.freq.sum() == TOTAL
        assert cdf.freq.min() >= 1
        peak = cdf.s_min + int(np.argmax(cdf.freq))
        assert peak in (0, 1)


def _seeded_chunk(seed, n, scale_hi=6.0):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-20.0, 20.0, size=n)
    scales = np.exp(rng.uniform(np.log(0.04), np.log(scale_hi), size=n))
    clamped = np.clip(scales, 0.04, 16.0)
    lo, hi = row_support_bounds(means, scales)
    draws = rng.normal(means, clamped)
    symbols = np.clip(np.rint(draws), lo, hi).astype(np.int64)
    cdfs = build_gaussian_cdf_rows(means, scales)
    return symbols, cdfs, means, scales


class TestRangeCoder:
    def test_empty_symbol_list(self):
        payload = range_encode([], [])
        assert len(payload) == 6
        assert range_decode(payload, [], 0) == []

    def test_single_near_certain_symbol(self):
        freq = np.ones(17, dtype=np.int64)
        freq[8] = TOTAL - 16
        cdf = QuantizedCdf(-8, freq)
        payload = range_encode([0], [cdf])
        assert len(payload) <= 9
        assert range_decode(payload, [cdf], 1) == [0]

    def test_round_trip_seeded_configs(self):
        total_checked = 0
        for seed in range(200):
            n = int(np.random.default_rng(seed + 5000).integers(1, 120))
            symbols, cdfs, _, _ = _seeded_chunk(seed, n)
            payload = range_encode(symbols, cdfs)
            decoded = range_decode(payload, cdfs, n)
            np.testing.assert_array_equal(decoded, symbols)
            total_checked += 1
        assert total_checked == 200

    def test_round_trip_large_chunk_and_rate_bound(self):
        n = 30_000
        symbols, cdfs, means, scales = _seeded_chunk(12345, n, scale_hi=4.0)
        payload = range_encode(symbols, cdfs)
        decoded = range_decode(payload, cdfs, n)
        np.testing.assert_array_equal(decoded, symbols)
        ideal = estimate_bits(symbols, GaussianModel(means, scales))
        assert 8 * len(payload) <= ideal + 64
        assert abs(8 * len(payload) - ideal) <= 64

    def test_rate_bound_small_chunks(self):
        for seed in range(40):
            n = int(np.random.default_rng(seed + 900).integers(1, 400))
            symbols, cdfs, means, scales = _seeded_chunk(seed + 31, n)
            payload = range_encode(symbols, cdfs)
            ideal = estimate_bits(symbols, GaussianModel(means, scales))
            assert 8 * len(payload) <= ideal + 64
            assert len(payload) <= math.ceil(ideal / 8) + 8

    def test_deterministic_payloads(self):
        symbols, cdfs, _, _ = _seeded_chunk(77, 500)
        assert range_encode(symbols, cdfs) == range_encode(symbols, cdfs)

    def test_out_of_support_symbol_rejected(self):
        cdf = build_gaussian_cdf(GaussianParams(0.0, 1.0), (-8, 8))
        with pytest.raises(UsageError):
            range_encode([9], [cdf])

    def test_truncated_payload_detected(self):
        symbols, cdfs, _, _ = _seeded_chunk(5, 50)
        payload = range_encode(symbols, cdfs)
        with pytest.raises(CorruptStreamError):
            range_decode(payload[: len(payload) // 2], cdfs, 50)
        with pytest.raises(CorruptStreamError):
            range_decode(b"\x00\x01", cdfs[:1], 1)

    def test_flipped_byte_never_crashes(self):
        symbols, cdfs, _, _ = _seeded_chunk(8, 200)
        payload = bytearray(range_encode(symbols, cdfs))
        rng = np.random.default_rng(0)
        for _ in range(25):
            pos = int(rng.integers(0, len(payload)))
            bit = 1 << int(rng.integers(0, 8))
            corrupted = bytearray(payload)
            corrupted[pos] ^= bit
            try:
                out = range_decode(bytes(corrupted), cdfs, 200)
                assert len(out) == 200  # garbage symbols are fine; crashing is not
            except CorruptStreamError:
                pass

    def test_count_cdf_mismatch_rejected(self):
        cdf = build_gaussian_cdf(GaussianParams(0.0, 1.0), (-8, 8))
        with pytest.raises(UsageError):
            range_decode(b"\x00" * 6, [cdf], 2)
        with pytest.raises(UsageError):
            range_encode([0, 0], [cdf])


class TestEstimateBits:
    def test_mode_of_near_delta_gaussian(self):
        bits = estimate_bits([0], GaussianModel(np.array([0.0]), np.array([0.04])))
        assert bits < 0.01

    def test_uniform_256_exact(self):
        bits = estimate_bits(np.zeros(100), UniformModel(256))
        assert bits == 800.0

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(4242)
        n = 5000
        means = rng.uniform(-5, 5, n)
        scales = np.exp(rng.uniform(np.log(0.04), np.log(8.0), n))
        symbols = np.rint(rng.normal(means, np.clip(scales, 0.04, 16.0)))
        got = estimate_bits(symbols, GaussianModel(means, scales))

        total = 0.0
        for s, mu, sig in zip(symbols, means, scales):
            sig = min(max(sig, 0.04), 16.0)
            p = 0.5 * (math.erf((s + 0.5 - mu) / (sig * math.sqrt(2))) - math.erf((s - 0.5 - mu) / (sig * math.sqrt(2))))
            total += -math.log2(max(p, 2.0**-60))
        assert abs(got - total) <= 1e-9 * abs(total)

    def test_quantized_table_model(self):
        cdf = QuantizedCdf(0, np.array([TOTAL // 4, TOTAL // 4, TOTAL // 2], dtype=np.int64))
        bits = estimate_bits([0, 1, 2], [cdf, cdf, cdf])
        assert abs(bits - (2.0 + 2.0 + 1.0)) < 1e-12

    def test_logistic_model_positive_and_finite(self):
        rng = np.random.default_rng(9)
        vals = np.rint(rng.normal(0, 2, size=200))
        bits = estimate_bits(vals, LogisticModel(np.zeros(200), np.full(200, 2.0)))
        assert math.isfinite(bits)
        assert bits > 0.0
