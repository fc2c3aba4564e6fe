import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoquant.qtypes import (
    DitherRng,
    QuantizationError,
    QuantSpec,
    QuantStats,
    RangeTracker,
    decode,
    encode,
    encode_dithered,
    quantize,
)


def test_zero_encodes_to_zero():
    for b in (0, 3, 20, 56):
        assert encode(0.0, QuantSpec(b, 3.7)) == 0


def test_round_to_nearest_example():
    spec = QuantSpec(2, 1.0)
    assert spec.resolution == 0.25
    u = encode(0.6, spec)
    assert u == 2
    assert decode(u, spec) == 0.5


def test_saturation_is_counted():
    spec = QuantSpec(2, 1.0)
    stats = QuantStats()
    assert encode(1.5, spec, stats) == 3
    assert stats.saturated == 1
    # the codebook brute force agrees: 3 * 0.25 is the closest representable value
    book = np.arange(-4, 4) * 0.25
    assert book[np.argmin(abs(book - 1.5))] == 0.75
    assert encode(-9.0, spec, stats) == -4
    assert stats.saturated == 2


def test_half_even_ties():
    spec = QuantSpec(2, 1.0)
    assert encode(0.125, spec) == 0
    assert encode(0.375, spec) == 2
    assert encode(-0.125, spec) == 0


def test_non_finite_rejected():
    spec = QuantSpec(4, 1.0)
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(QuantizationError):
            encode(bad, spec)
        with pytest.raises(QuantizationError):
            encode_dithered(bad, spec, DitherRng(0))


def test_spec_validation():
    with pytest.raises(QuantizationError):
        QuantSpec(3, 0.0)
    with pytest.raises(QuantizationError):
        QuantSpec(57, 1.0)
    with pytest.raises(QuantizationError):
        QuantSpec(-1, 1.0)
    s = QuantSpec(5, 3.0)
    assert s.resolution == 3.0 / 32
    assert (s.min_code, s.max_code, s.physical_bits) == (-32, 31, 6)


def test_decode_examples():
    spec = QuantSpec(2, 1.0)
    assert decode(0, spec) == 0.0
    assert decode(2, spec) == 0.5


def test_round_trip_bound():
    rng = np.random.default_rng(7)
    spec = QuantSpec(9, 2.5)
    d = spec.resolution
    v = rng.uniform(-spec.range + d, spec.range - d, 100_000)
    err = decode(encode(v, spec), spec) - v
    assert np.max(np.abs(err)) <= d / 2


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 40), st.floats(1e-3, 1e3), st.floats(-1.0, 1.0))
def test_undithered_error_within_half_step(b, r, frac):
    spec = QuantSpec(b, r)
    v = frac * (r - spec.resolution)
    # slack of a few ulps of v covers the float subtraction itself
    assert abs(decode(encode(v, spec), spec) - v) <= spec.resolution / 2 + 4 * np.spacing(r)


def test_rng_is_counter_based():
    a = DitherRng(11, 3)
    x1 = a.draw(10)
    x2 = a.draw(5)
    b = DitherRng(11, 3)
    assert np.array_equal(b.draw(10), x1)
    assert np.array_equal(DitherRng(11, 3, counter=3).draw(5), x2)
    assert not np.array_equal(DitherRng(11, 4).draw(10), x1)
    assert np.all((x1 >= -0.5) & (x1 < 0.5))


def test_dithered_determinism():
    spec = QuantSpec(6, 1.0)
    v = np.linspace(-0.9, 0.9, 1000)
    u1 = encode_dithered(v, spec, DitherRng(5))
    u2 = encode_dithered(v, spec, DitherRng(5))
    assert np.array_equal(u1, u2)


def test_dithered_on_grid_is_exact():
    spec = QuantSpec(4, 1.0)
    v = np.arange(-15, 15) * spec.resolution
    u = encode_dithered(v, spec, DitherRng(2))
    assert np.array_equal(u, np.arange(-15, 15))


def test_round_up_probability_equals_fraction():
    spec = QuantSpec(2, 1.0)
    n = 100_000
    v = np.full(n, 2.4 * spec.resolution)
    u = encode_dithered(v, spec, DitherRng(123))
    assert set(np.unique(u)) == {2, 3}
    p_up = np.mean(u == 3)
    assert abs(p_up - 0.4) <= 3 * math.sqrt(0.4 * 0.6 / n)


def test_dithered_unbiased():
    spec = QuantSpec(5, 1.0)
    n = 100_000
    for frac in (0.1, 0.37, 0.5, 0.83):
        v = (7 + frac) * spec.resolution
        mean = decode(encode_dithered(np.full(n, v), spec, DitherRng(9)), spec).mean()
        assert abs(mean - v) < 4 * spec.resolution / math.sqrt(12 * n)


def _drift(dither: bool, trials: int):
    spec = QuantSpec(10, 1.0)
    d = spec.resolution
    rng = DitherRng(2024) if dither else None
    y = np.zeros(trials)
    for _ in range(10):
        y = quantize(y + 1.4 * d, spec, rng)
    return y / d


def test_drift_undithered_locks_in():
    y = _drift(False, 5)
    assert np.all(y == 10.0)


def test_drift_dithered_tracks_increment():
    y = _drift(True, 2000)
    assert abs(y.mean() - 14.0) <= 0.5


def test_range_tracker():
    t = RangeTracker()
    t.observe(0.3).observe(-0.7)
    assert t.max_abs == 0.7
    assert t.range == 1.4
    assert RangeTracker().range == 1.0
    with pytest.raises(QuantizationError):
        t.observe(math.nan)
    merged = RangeTracker().observe([0.2]).merge(RangeTracker().observe([-0.9]))
    assert merged.max_abs == 0.9


def test_range_tracker_monotone():
    t = RangeTracker()
    last = 0.0
    for v in np.random.default_rng(0).normal(size=100):
        t.observe(v)
        assert t.max_abs >= last
        last = t.max_abs


def test_scalar_and_array_forms_agree():
    spec = QuantSpec(8, 2.0)
    vals = [0.1, -1.3, 1.99]
    assert [encode(v, spec) for v in vals] == list(encode(np.array(vals), spec))
    assert isinstance(encode(0.1, spec), int)
    assert isinstance(decode(3, spec), float)
