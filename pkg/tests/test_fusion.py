import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softlabel.dwi import fit_monoexponential
from softlabel.fusion import (
    AtlasEntry,
    AtlasSource,
    FusionError,
    annotate_case,
    assemble_stack,
    fuse_soft_labels,
)
from softlabel.stack import ATLAS_REGIONS, BACKGROUND, CHANNELS, SPINAL_CANAL
from softlabel.volume import GeometryError, Grid, Volume

G = Grid((3, 2, 2), (1, 1, 1))
SHAPE = G.dims


def _entry(id_, mask, mse, region="liver"):
    return AtlasEntry(id_, None, {region: Volume(G, np.asarray(mask, float), "probability")}, mse)


def _fuse(entries):
    return fuse_soft_labels(entries, "liver").data


def test_single_entry_returns_mask():
    m = np.random.default_rng(0).random(SHAPE)
    assert np.abs(_fuse([_entry("a", m, 7.3)]) - m).max() <= 1e-12


def test_equal_mse_half():
    out = _fuse([_entry("a", np.ones(SHAPE), 2.0), _entry("b", np.zeros(SHAPE), 2.0)])
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_weighted_example():
    out = _fuse([_entry("a", np.ones(SHAPE), 1.0), _entry("b", np.zeros(SHAPE), 3.0)])
    assert np.abs(out - 0.75).max() <= 1e-12


def test_invalid_weight_and_empty():
    with pytest.raises(FusionError):
        _fuse([_entry("a", np.ones(SHAPE), 0.0)])
    with pytest.raises(FusionError):
        _fuse([])


def test_grid_mismatch():
    other = AtlasEntry("b", None, {"liver": Volume(Grid((3, 2, 2), (2, 1, 1)), np.zeros(SHAPE))}, 1.0)
    with pytest.raises(GeometryError):
        _fuse([_entry("a", np.ones(SHAPE), 1.0), other])


masks = st.lists(
    st.tuples(arrays(np.float64, SHAPE, elements=st.floats(0, 1)), st.floats(1e-6, 1e3)),
    min_size=1,
    max_size=6,
)


@given(masks)
def test_convex_combination(items):
    entries = [_entry(f"a{i}", m, e) for i, (m, e) in enumerate(items)]
    out = _fuse(entries)
    stacked = np.stack([m for m, _ in items])
    assert np.all(out >= stacked.min(axis=0) - 1e-12)
    assert np.all(out <= stacked.max(axis=0) + 1e-12)


@given(masks, st.randoms(use_true_random=False))
def test_permutation_invariance(items, rnd):
    entries = [_entry(f"a{i}", m, e) for i, (m, e) in enumerate(items)]
    shuffled = entries[:]
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(_fuse(entries), _fuse(shuffled))


@given(arrays(np.float64, SHAPE, elements=st.floats(0, 1)), st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=6))
def test_identical_masks_fixed_point(mask, mses):
    out = _fuse([_entry(f"a{i}", mask, e) for i, e in enumerate(mses)])
    assert np.abs(out - mask).max() <= 1e-12


# -- assemble_stack ----------------------------------------------------------
def _maps(values):
    """values: (..., 12) foreground values on G."""
    return [Volume(G, values[..., i], "probability") for i in range(11)], Volume(G, values[..., 11], "probability")


def test_all_zero_is_background():
    s = assemble_stack(*_maps(np.zeros(SHAPE + (12,))))
    np.testing.assert_array_equal(s.channel(BACKGROUND), 1.0)
    assert s.names == CHANNELS and s.names[11] == SPINAL_CANAL


def test_one_class_full():
    v = np.zeros(SHAPE + (12,))
    v[..., 3] = 1.0
    s = assemble_stack(*_maps(v))
    np.testing.assert_array_equal(s.channel(BACKGROUND), 0.0)


def test_overshoot_rescaled():
    v = np.zeros(SHAPE + (12,))
    v[..., 0], v[..., 7], v[..., 11] = 0.6, 0.4, 0.2
    s = assemble_stack(*_maps(v))
    np.testing.assert_allclose(s.data[..., 0], 0.5)
    np.testing.assert_allclose(s.data[..., 7], 0.4 / 1.2)
    np.testing.assert_allclose(s.data[..., 11], 0.2 / 1.2)
    np.testing.assert_allclose(s.channel(BACKGROUND), 0.0, atol=1e-15)


def test_assemble_rejects_out_of_range():
    v = np.zeros(SHAPE + (12,))
    v[..., 0] = 1.5
    with pytest.raises(FusionError):
        assemble_stack(*_maps(v))


def test_assemble_needs_eleven_maps():
    maps, canal = _maps(np.zeros(SHAPE + (12,)))
    with pytest.raises(FusionError):
        assemble_stack(maps[:10], canal)


@given(arrays(np.float64, SHAPE + (12,), elements=st.floats(0, 1)), st.floats(0.0, 3.0))
def test_assemble_invariants(values, gain):
    # gain > 1/12 forces frequent overshoot
    s = assemble_stack(*_maps(np.clip(values * gain, 0, 1)))
    s.check(1e-6)


# -- annotate ----------------------------------------------------------------
def test_annotate_identical_single_atlas(small_phantom):
    adc = fit_monoexponential(small_phantom.series).adc
    src = AtlasSource("self", adc, small_phantom.masks())
    canal = small_phantom.mask(SPINAL_CANAL)
    stack, records = annotate_case(adc, [src], spinal_canal=canal)
    stack.check()
    assert len(records) == 1 and records[0]["atlas"] == "self"
    expected = small_phantom.truth.data
    np.testing.assert_allclose(stack.data, expected, atol=1e-6)


def test_annotate_empty_atlas(small_phantom):
    adc = fit_monoexponential(small_phantom.series).adc
    with pytest.raises(FusionError):
        annotate_case(adc, [])


def test_region_list():
    assert len(ATLAS_REGIONS) == 11 and len(CHANNELS) == 13 and CHANNELS[-1] == BACKGROUND
