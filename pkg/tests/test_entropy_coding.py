import math

import mpmath
import numpy as np
import pytest

from epacodec.autodiff import Tensor, backward, constant
from epacodec.bitstream import RangeCoderError, build_cdf, quantize_pmf, range_decode, range_encode
from epacodec.bitstream.cdf import CdfTable
from epacodec.codec.entropy import P_MIN, bin_probabilities, rate_bits, rate_bits_reference, raw_from_scale

mpmath.mp.dps = 40


def mp_bits(v, mu, s):
    """-log2 of the floored logistic bin mass, in 40-digit arithmetic."""
    F = lambda z: 1 / (1 + mpmath.exp(-z))  # noqa: E731
    p = F((mpmath.mpf(v) + 0.5 - mu) / s) - F((mpmath.mpf(v) - 0.5 - mu) / s)
    return float(-mpmath.log(max(p, mpmath.mpf(P_MIN)), 2))


def t(arr, name=None):
    return Tensor(np.asarray(arr, dtype=np.float64), name=name) if name else constant(np.asarray(arr, float))


# rate estimate ------------------------------------------------------------------------


def test_half_probability_bin_costs_one_bit():
    # logistic mass on [-0.5, 0.5] is 0.5 when tanh(1/(4s)) = 0.5
    s = 1.0 / (4.0 * math.atanh(0.5))
    bits = rate_bits(t(np.zeros((1, 1, 1, 1))), t([0.0]), t([raw_from_scale(s)]))
    assert float(bits.data) == pytest.approx(1.0, abs=1e-6)


def test_far_value_capped_at_16_bits():
    bits = rate_bits(t(np.full((1, 1, 1, 1), 60.0)), t([0.0]), t([raw_from_scale(0.05)]))
    assert float(bits.data) == pytest.approx(16.0, abs=1e-12)


def test_rate_matches_high_precision_scalar_oracle():
    rng = np.random.default_rng(0)
    mu, raw = rng.normal(0, 1.5, 3), rng.normal(0, 1, 3)
    lat = np.round(rng.normal(0, 4, (1, 3, 4, 4)))
    scale = np.logaddexp(0, raw) + 1e-6
    expected = sum(mp_bits(lat[0, c, i, j], mu[c], scale[c]) for c in range(3) for i in range(4) for j in range(4))
    got = float(rate_bits(t(lat), t(mu), t(raw)).data)
    assert abs(got - expected) / expected < 1e-9
    assert rate_bits_reference(lat, mu, raw) == pytest.approx(expected, rel=1e-9)


def test_rate_nonnegative_and_per_symbol_cap():
    rng = np.random.default_rng(1)
    lat = np.round(rng.normal(0, 30, (1, 2, 8, 8)))
    bits = float(rate_bits(t(lat), t([0.3, -2.0]), t([-1.0, 0.5])).data)
    assert 0 <= bits <= 16 * lat.size


def test_rate_gradient_wrt_latent_and_model():
    rng = np.random.default_rng(2)
    lat, mu, raw = rng.normal(0, 2, (1, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)
    g = backward(rate_bits(t(lat, "lat"), t(mu, "mu"), t(raw, "raw")))
    h = 1e-6
    for name, arr in (("lat", lat), ("mu", mu), ("raw", raw)):
        for idx in list(np.ndindex(arr.shape))[:6]:
            old = arr[idx]
            arr[idx] = old + h
            fp = rate_bits_reference(lat, mu, raw)
            arr[idx] = old - h
            fm = rate_bits_reference(lat, mu, raw)
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(g[name][idx] - num) <= 1e-5 * max(abs(num), 1.0)


def test_tail_probabilities_stay_accurate():
    # far right tail: naive F(b) - F(a) cancels to 0 in float64
    p = bin_probabilities(np.array([40.0]), 0.0, 1.0)[0]
    exact = float(1 / (1 + mpmath.exp(-39.5)) - 1 / (1 + mpmath.exp(-40.5)))
    assert p == pytest.approx(exact, rel=1e-9)


# CDF tables ----------------------------------------------------------------------------


def test_cdf_table_invariants_random_models():
    rng = np.random.default_rng(3)
    table = build_cdf(rng.normal(0, 3, 16), rng.normal(0, 2, 16))
    assert np.all(table.freqs >= 1)
    assert np.all(table.freqs.sum(axis=1) == 2**16)
    assert np.all(np.diff(table.cums, axis=1) > 0)
    assert np.all(table.cums[:, -1] == 2**16)


def test_cdf_near_uniform_and_peaked():
    wide = build_cdf(np.array([0.0]), np.array([raw_from_scale(1e5)]))
    assert wide.freqs.max() - wide.freqs.min() <= 1
    narrow = build_cdf(np.array([0.0]), np.array([raw_from_scale(1e-3)]), l_max=64)
    assert narrow.freqs[0, 64] >= 2**16 - 2 * 64


def test_quantize_pmf_sums_exactly():
    rng = np.random.default_rng(4)
    for _ in range(20):
        f = quantize_pmf(rng.dirichlet(np.full(129, 0.05)))
        assert f.sum() == 2**16 and f.min() >= 1


# range coder ----------------------------------------------------------------------------


def _table(seed=5, channels=4):
    rng = np.random.default_rng(seed)
    return build_cdf(rng.normal(0, 1, channels), rng.normal(0.5, 0.5, channels))


def test_empty_sequence():
    blob = range_encode([], _table().cum_lists(), [])
    assert len(blob) <= 8
    assert range_decode(blob, _table().cum_lists(), []) == []


def test_round_trip_and_efficiency_model_distributed():
    table = _table()
    rng = np.random.default_rng(6)
    n = 20000
    tids = rng.integers(0, 4, n)
    probs = table.probabilities()
    symbols = [int(rng.choice(probs.shape[1], p=probs[k])) for k in tids]
    cums = table.cum_lists()
    blob = range_encode(symbols, cums, tids.tolist())
    assert range_decode(blob, cums, tids.tolist()) == symbols
    ideal = -sum(math.log2(probs[k, s]) for k, s in zip(tids, symbols))
    assert len(blob) <= ideal / 8 + 32
    assert 8 * len(blob) <= ideal * 1.01 + 256


def test_identical_high_probability_symbols_cost_little():
    table = CdfTable(quantize_pmf(np.r_[np.full(64, 1e-9), 1.0, np.full(64, 1e-9)])[None], 64)
    blob = range_encode([64] * 5000, table.cum_lists(), [0] * 5000)
    ideal_bytes = 5000 * -math.log2(table.probabilities()[0, 64]) / 8
    assert len(blob) <= ideal_bytes + 8


def test_out_of_support_symbol_rejected():
    table = _table()
    with pytest.raises(RangeCoderError):
        range_encode([129], table.cum_lists(), [0])


def test_truncated_payload_detected():
    table = _table()
    rng = np.random.default_rng(7)
    symbols = rng.integers(50, 80, 3000).tolist()
    blob = range_encode(symbols, table.cum_lists(), [0] * 3000)
    with pytest.raises(RangeCoderError):
        range_decode(blob[: len(blob) // 2], table.cum_lists(), [0] * 3000)
