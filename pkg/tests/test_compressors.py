"""Compression operators: exact small cases, bit costs, statistical bounds."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shiftcomp import compressors as comp
from shiftcomp.compressors import (
    CompressorSpec,
    DimensionMismatch,
    bit_cost,
    compress,
    compress_many,
    decode,
    dense_bits,
    identity_spec,
    index_bits,
    induce,
    induced_omega,
    iterate_compressor,
    negation_scaled,
    rand_k_spec,
    shift,
    shifted,
    top_k_indices,
    top_k_spec,
    variance_check,
    zero_spec,
)

ALL_SPECS = [
    identity_spec(6),
    zero_spec(6),
    rand_k_spec(6, 2),
    top_k_spec(6, 2),
    CompressorSpec("natural_dithering", 6, s=3),
    CompressorSpec("bernoulli", 6, p=0.5),
]


# -- exact small cases --------------------------------------------------------


def test_randk_full_keep_is_identity(rng):
    spec = rand_k_spec(5, 5)
    x = rng.normal(size=5)
    msg = compress(spec, x, rng)
    np.testing.assert_array_equal(msg.dense_value, x)
    assert msg.bits == 5 * (64 + index_bits(5))


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind)
def test_zero_maps_to_zero(spec, rng):
    msg = compress(spec, np.zeros(6), rng)
    np.testing.assert_array_equal(msg.dense_value, np.zeros(6))


def test_randk_two_coordinate_enumeration(rng):
    spec = rand_k_spec(2, 1)
    x = np.array([2.0, 4.0])
    draws = compress_many(spec, x, 100_000, rng)
    for row in draws[:100]:
        assert tuple(row) in {(4.0, 0.0), (0.0, 8.0)}
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 3 * se)


def test_topk_keeps_largest_magnitude(rng):
    msg = compress(top_k_spec(3, 1), np.array([1.0, -3.0, 2.0]), rng)
    np.testing.assert_array_equal(msg.dense_value, [0.0, -3.0, 0.0])


def test_topk_tie_breaks_to_lower_index():
    # equal magnitudes: the earlier coordinate wins, deterministically
    idx = top_k_indices(np.array([1.0, -1.0, 1.0]), 2)
    np.testing.assert_array_equal(np.sort(idx), [0, 1])


# -- variance reports ---------------------------------------------------------


def test_randk_variance_equality(rng):
    rep = variance_check(rand_k_spec(4, 1), np.ones(4), 100_000, rng)
    assert rep.passed
    assert rep.ratio == pytest.approx(3.0, rel=0.05)


def test_identity_variance_zero(rng):
    rep = variance_check(identity_spec(4), np.ones(4), 1_000, rng)
    assert rep.passed
    assert rep.empirical_variance == 0.0


def test_bernoulli_variance(rng):
    rep = variance_check(CompressorSpec("bernoulli", 4, p=0.25), np.ones(4), 100_000, rng)
    assert rep.ratio == pytest.approx(0.75, rel=0.05)


def test_dithering_unbiased_and_bounded(rng):
    spec = CompressorSpec("natural_dithering", 20, s=4)
    x = rng.normal(size=20)
    draws = compress_many(spec, x, 100_000, rng)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 4 * se)
    assert variance_check(spec, x, 100_000, rng).passed


# -- shifted compressors ------------------------------------------------------


def test_shift_by_zero_matches_base_in_distribution():
    spec = rand_k_spec(6, 2)
    x = np.arange(6.0)
    a = shifted(spec, np.zeros(6)).compress(x, np.random.default_rng(7)).dense_value
    b = compress(spec, x, np.random.default_rng(7)).dense_value
    np.testing.assert_array_equal(a, b)


def test_shift_to_evaluation_point_is_exact(rng):
    x0 = rng.normal(size=6)
    op = shift(shifted(rand_k_spec(6, 2), np.zeros(6)), x0)
    for _ in range(20):
        np.testing.assert_array_equal(op.compress(x0, rng).dense_value, x0)


def test_shifted_variance_measured_around_total_shift(rng):
    spec = rand_k_spec(8, 2)
    h, v = rng.normal(size=8), rng.normal(size=8)
    op = shift(shifted(spec, h), v)
    x = rng.normal(size=8)
    draws = np.array([op.compress(x, rng).dense_value for _ in range(20_000)])
    emp = np.mean(np.sum((draws - x) ** 2, axis=1))
    bound = spec.omega * np.sum((x - (h + v)) ** 2)
    assert emp <= bound * 1.05


# -- induced compressors ------------------------------------------------------


def test_induce_full_topk_is_exact(rng):
    x = rng.normal(size=5)
    msg = induce(top_k_spec(5, 5), rand_k_spec(5, 2), x, rng)
    np.testing.assert_array_equal(msg.dense_value, x)


def test_induce_identity_unbiased_is_exact(rng):
    x = rng.normal(size=5)
    msg = induce(top_k_spec(5, 2), identity_spec(5), x, rng)
    np.testing.assert_array_equal(msg.dense_value, x)


def test_induced_variance_ratio(rng):
    biased, unbiased = top_k_spec(4, 1), rand_k_spec(4, 1)
    x = rng.normal(size=4)
    errs = []
    for _ in range(100_000):
        msg = induce(biased, unbiased, x, rng)
        errs.append(np.sum((msg.dense_value - x) ** 2))
    ratio = np.mean(errs) / np.sum(x * x)
    assert induced_omega(biased, unbiased) == pytest.approx(2.25)
    assert ratio <= 2.25 * 1.05


# -- iterate compression and negation scaling ---------------------------------


def test_iterate_compressor_identity_returns_z(rng):
    x, z = rng.normal(size=4), rng.normal(size=4)
    out = iterate_compressor(identity_spec(4), x, 0.7, z, rng)
    np.testing.assert_allclose(out, z, rtol=1e-15, atol=1e-15)


def test_iterate_compressor_fixed_point(rng):
    x = rng.normal(size=4)
    gamma = 0.3
    out = iterate_compressor(rand_k_spec(4, 1), x, gamma, x / gamma, rng)
    np.testing.assert_allclose(out, x / gamma, rtol=1e-15)


def test_iterate_compressor_enumeration(rng):
    spec = rand_k_spec(2, 1)
    x, z = np.array([1.0, 1.0]), np.zeros(2)
    draws = np.array([iterate_compressor(spec, x, 1.0, z, rng) for _ in range(50_000)])
    # each draw keeps one coordinate of x: outputs are (-1, 1) or (1, -1)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0)) <= 4 * se)
    assert np.mean(np.sum(draws**2, axis=1)) <= spec.omega * np.sum(x**2) * 1.05


@pytest.mark.parametrize("t", [1.0, -2.0, 0.5])
def test_negation_scaled_unbiased_same_variance(t, rng):
    spec = rand_k_spec(6, 2)
    z = rng.normal(size=6)
    draws = np.array([negation_scaled(spec, t, z, rng) for _ in range(50_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - z) <= 4 * se)
    emp = np.mean(np.sum((draws - z) ** 2, axis=1))
    assert emp <= spec.omega * np.sum(z * z) * 1.05


# -- bit costs ----------------------------------------------------------------


def test_bit_costs(rng):
    x = rng.normal(size=80)
    assert compress(rand_k_spec(80, 8), x, rng).bits == 8 * (64 + 7) == 568
    assert compress(identity_spec(80), x, rng).bits == 5120
    nd = CompressorSpec("natural_dithering", 80, s=3)
    assert compress(nd, x, rng).bits == 80 * (1 + 2) + 64
    assert compress(zero_spec(80), x, rng).bits == 0


def test_bernoulli_flag_only_bit(rng):
    spec = CompressorSpec("bernoulli", 4, p=1e-12)
    msg = compress(spec, np.ones(4), rng)
    assert msg.payload[0] == "zero"
    assert bit_cost(spec, msg) == 1
    fire = compress(CompressorSpec("bernoulli", 4, p=1.0), np.ones(4), rng)
    assert bit_cost(CompressorSpec("bernoulli", 4, p=1.0), fire) == 1 + dense_bits(4)


# -- payload round-trips and errors -------------------------------------------


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind)
def test_decode_roundtrip_bit_exact(spec, rng):
    x = rng.normal(size=6)
    msg = compress(spec, x, rng)
    np.testing.assert_array_equal(decode(spec, msg.payload), msg.dense_value)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        compress(rand_k_spec(4, 2), np.ones(5), np.random.default_rng(0))
    with pytest.raises(DimensionMismatch):
        shifted(rand_k_spec(4, 2), np.ones(3))


def test_config_roundtrip():
    for spec in ALL_SPECS:
        assert CompressorSpec.from_config(spec.to_config(), spec.d) == spec
    # fractional keep-rate shorthand resolves to a coordinate count
    assert CompressorSpec.from_config({"kind": "rand_k", "q": 0.1}, 80).K == 8


def test_compress_many_matches_scalar_stream():
    # the vectorized sampler consumes the stream like repeated scalar calls
    spec = rand_k_spec(7, 3)
    x = np.arange(7.0)
    many = compress_many(spec, x, 5, np.random.default_rng(3))
    rng = np.random.default_rng(3)
    singles = np.array([compress(spec, x, rng).dense_value for _ in range(5)])
    np.testing.assert_array_equal(many, singles)


# -- property tests -----------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(
    x=hnp.arrays(
        np.float64,
        st.integers(2, 12),
        elements=st.floats(-1e6, 1e6, allow_nan=False),
    ),
    data=st.data(),
)
def test_topk_contraction_property(x, data):
    d = len(x)
    K = data.draw(st.integers(1, d))
    if np.sum(x * x) == 0:
        return
    msg = compress(top_k_spec(d, K), x, np.random.default_rng(0))
    err = np.sum((msg.dense_value - x) ** 2)
    assert err <= (1 - K / d) * np.sum(x * x) * (1 + 1e-12)


def test_topk_contraction_equality_iff_equal_magnitudes():
    x = np.array([2.0, -2.0, 2.0, 2.0])
    msg = compress(top_k_spec(4, 1), x, np.random.default_rng(0))
    err = np.sum((msg.dense_value - x) ** 2)
    assert err == pytest.approx((1 - 1 / 4) * np.sum(x * x))
    y = np.array([3.0, -2.0, 2.0, 2.0])
    err_y = np.sum((compress(top_k_spec(4, 1), y, np.random.default_rng(0)).dense_value - y) ** 2)
    assert err_y < (1 - 1 / 4) * np.sum(y * y)


def test_randk_subset_uniformity(rng):
    # every coordinate appears with frequency K/d
    counts = np.zeros(6)
    N = 60_000
    for _ in range(N):
        counts[comp.rand_k_subset(6, 2, rng)] += 1
    freq = counts / N
    assert np.all(np.abs(freq - 2 / 6) < 0.01)


def test_fault_injection_scale():
    comp.set_fault("randk_scale")
    try:
        msg = compress(rand_k_spec(4, 1), np.ones(4), np.random.default_rng(0))
        assert np.max(np.abs(msg.dense_value)) == pytest.approx(4 / 2)
    finally:
        comp.set_fault("randk_scale", False)
    msg = compress(rand_k_spec(4, 1), np.ones(4), np.random.default_rng(0))
    assert np.max(np.abs(msg.dense_value)) == pytest.approx(4.0)
