import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from softlabel.dwi import (
    ADC_SCALE,
    BValueSeries,
    DegenerateInputError,
    fit_monoexponential,
    scale_adc,
    scale_s0,
    series_from_pairs,
)
from softlabel.volume import Grid, Volume

G = Grid((1, 1, 1), (1, 1, 1))


def _series(bvals, signals):
    return BValueSeries(bvals, tuple(Volume(G, np.full((1, 1, 1), s)) for s in signals))


def _fit(bvals, signals):
    r = fit_monoexponential(_series(bvals, signals))
    return float(r.adc.data.ravel()[0]), float(r.s0.data.ravel()[0])


def test_flat_signal():
    adc, s0 = _fit((50, 900), (800, 800))
    assert adc == pytest.approx(0, abs=1e-15)
    assert s0 == pytest.approx(800, rel=1e-12)


def test_two_point_decay():
    adc, s0 = _fit((50, 900), (1000, 100))
    assert adc == pytest.approx(math.log(10) / 850, rel=1e-12)
    assert adc == pytest.approx(2.7089e-3, rel=1e-4)
    assert s0 == pytest.approx(1000 * math.exp(50 * adc), rel=1e-12)
    assert s0 == pytest.approx(1145.0, abs=0.1)


def test_rising_signal_gives_negative_adc():
    adc, _ = _fit((50, 900), (100, 1000))
    assert adc == pytest.approx(-2.7089e-3, rel=1e-4)


def test_zero_signal_is_guarded():
    adc, s0 = _fit((50, 900), (0.0, 0.0))
    assert np.isfinite(adc) and np.isfinite(s0)


@given(
    st.floats(0.2e-3, 3.5e-3),
    st.floats(10, 5000),
    st.sampled_from([(50.0, 900.0), (0.0, 600.0), (50.0, 600.0, 900.0)]),
)
def test_noiseless_round_trip(adc, s0, bvals):
    sig = [s0 * math.exp(-b * adc) for b in bvals]
    got_adc, got_s0 = _fit(bvals, sig)
    tol = 1e-9 if len(bvals) == 2 else 1e-6
    assert got_adc == pytest.approx(adc, rel=tol)
    assert got_s0 == pytest.approx(s0, rel=tol)


def test_fit_preserves_negative_adc_in_volume():
    g = Grid((2, 1, 1), (1, 1, 1))
    lo = Volume(g, np.array([1000.0, 100.0]).reshape(2, 1, 1))
    hi = Volume(g, np.array([100.0, 1000.0]).reshape(2, 1, 1))
    adc = fit_monoexponential(BValueSeries((50, 900), (lo, hi))).adc.data.ravel()
    assert adc[1] < 0 < adc[0]
    assert adc[0] == pytest.approx(-adc[1])


def test_series_validation():
    v = Volume(G, np.ones((1, 1, 1)))
    with pytest.raises(ValueError):
        BValueSeries((50.0, 50.0), (v, v))
    with pytest.raises(ValueError):
        BValueSeries((50.0,), (v,))
    with pytest.raises(ValueError):
        BValueSeries((50.0, 900.0), (v, Volume(Grid((1, 1, 1), (2, 1, 1)), np.ones((1, 1, 1)))))


def test_series_from_pairs_sorts():
    a, b = Volume(G, np.full((1, 1, 1), 2.0)), Volume(G, np.full((1, 1, 1), 1.0))
    s = series_from_pairs([(900, b), (50, a)])
    assert s.bvalues == (50.0, 900.0)
    assert s.volumes[0] is a


@pytest.mark.parametrize("adc,expected", [(3.5e-3, 1.0), (0.0, 0.0), (-1.75e-3, -0.5)])
def test_scale_adc_examples(adc, expected):
    out = scale_adc(Volume(G, np.full((1, 1, 1), adc), "adc"))
    assert out.data.ravel()[0] == pytest.approx(expected, rel=1e-12, abs=1e-15)
    assert out.unit == "dimensionless"


def test_adc_scale_constant():
    assert ADC_SCALE == 3.5e-3


@given(st.floats(-10, 10), st.lists(st.floats(-4e-3, 4e-3), min_size=1, max_size=5))
def test_scale_adc_linear(alpha, values):
    v = Volume(Grid((len(values), 1, 1), (1, 1, 1)), np.array(values).reshape(-1, 1, 1), "adc")
    lhs = scale_adc(v.with_data(alpha * v.data)).data
    np.testing.assert_allclose(lhs, alpha * scale_adc(v).data, rtol=1e-12, atol=1e-12)


def test_scale_s0_examples():
    g = Grid((3, 1, 1), (1, 1, 1))
    const = scale_s0(Volume(g, np.full((3, 1, 1), math.e)))
    np.testing.assert_allclose(const.data, 1.0)
    two = scale_s0(Volume(g, np.array([math.e, math.e**2, 0.0]).reshape(3, 1, 1)))
    np.testing.assert_allclose(two.data.ravel(), [0.5, 1.0, 0.0], rtol=1e-12)


def test_scale_s0_degenerate():
    with pytest.raises(DegenerateInputError):
        scale_s0(Volume(G, np.zeros((1, 1, 1))))


def test_scale_s0_body_mask():
    g = Grid((2, 1, 1), (1, 1, 1))
    v = Volume(g, np.array([math.e, math.e**4]).reshape(2, 1, 1))
    out = scale_s0(v, body_mask=np.array([True, False]).reshape(2, 1, 1))
    np.testing.assert_allclose(out.data.ravel(), [1.0, 4.0])


@given(st.lists(st.floats(1.0, 1e6), min_size=2, max_size=8))
def test_scale_s0_max_and_order(values):
    if max(values) <= 1.0 + 1e-9:
        return
    v = Volume(Grid((len(values), 1, 1), (1, 1, 1)), np.array(values).reshape(-1, 1, 1))
    out = scale_s0(v).data.ravel()
    assert out.max() == pytest.approx(1.0, abs=1e-6)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
