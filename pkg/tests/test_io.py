import nibabel as nib
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softlabel.io import FormatError, read_stack, read_volume, write_stack, write_volume
from softlabel.stack import CHANNELS, ProbabilityStack
from softlabel.volume import Grid, Volume


def _nifti(path, data, affine, slope=None, inter=None, dtype=None):
    img = nib.Nifti1Image(data, affine)
    if dtype is not None:
        img.set_data_dtype(dtype)
    if slope is not None:
        img.header.set_slope_inter(slope, inter or 0.0)
    nib.save(img, str(path))


def test_hand_written_header(tmp_path):
    p = tmp_path / "a.nii"
    _nifti(p, np.arange(8, dtype=np.float32).reshape(2, 2, 2), np.diag([1.6, 1.6, 5.0, 1.0]))
    v = read_volume(p)
    assert v.data.size == 8
    assert v.grid.spacing == pytest.approx((1.6, 1.6, 5.0))


def test_int16_scaling(tmp_path):
    p = tmp_path / "b.nii"
    img = nib.Nifti1Image(np.full((2, 2, 2), 1500, dtype=np.int16), np.eye(4))
    img.header.set_slope_inter(0.001, 0.0)
    nib.save(img, str(p))
    assert read_volume(p).data[0, 0, 0] == pytest.approx(1.5, rel=1e-6)


def test_unsupported_dtype(tmp_path):
    p = tmp_path / "c.nii"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.uint8), np.eye(4)), str(p))
    with pytest.raises(FormatError):
        read_volume(p)


def test_five_dimensions_rejected(tmp_path):
    p = tmp_path / "d.nii"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 1, 2), dtype=np.float32), np.eye(4)), str(p))
    with pytest.raises(FormatError):
        read_volume(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "e.nii"
    p.write_bytes(b"\0" * 400)
    with pytest.raises(FormatError):
        read_volume(p)


def test_sform_precedence(tmp_path):
    p = tmp_path / "f.nii"
    img = nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float32), None)
    img.set_qform(np.diag([2.0, 2.0, 2.0, 1.0]), code=1)
    img.set_sform(np.diag([3.0, 3.0, 3.0, 1.0]), code=2)
    nib.save(img, str(p))
    assert read_volume(p).grid.spacing == pytest.approx((3.0, 3.0, 3.0))


finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@pytest.mark.parametrize("suffix", [".nii", ".raw"])
@given(
    data=arrays(np.float32, (3, 4, 2), elements=finite32),
    spacing=st.tuples(*[st.floats(0.1, 10)] * 3),
    origin=st.tuples(*[st.floats(-500, 500)] * 3),
)
def test_round_trip(tmp_path_factory, suffix, data, spacing, origin):
    p = tmp_path_factory.mktemp("rt") / f"v{suffix}"
    v = Volume(Grid(data.shape, spacing, origin), data, "adc")
    write_volume(v, p)
    back = read_volume(p)
    np.testing.assert_array_equal(back.data, data)
    assert np.allclose(back.grid.spacing, spacing, atol=1e-5)
    assert np.allclose(back.grid.origin, origin, atol=1e-5)


@pytest.mark.parametrize("suffix", [".nii", ".raw"])
def test_oriented_round_trip(tmp_path, suffix):
    rot = np.array([[0, 0, 1], [0, -1, 0], [1, 0, 0]], dtype=float)
    v = Volume(Grid((2, 3, 4), (1.6, 1.6, 5.0), (1, 2, 3), rot), np.ones((2, 3, 4), np.float32), "mask")
    write_volume(v, tmp_path / f"o{suffix}")
    back = read_volume(tmp_path / f"o{suffix}")
    np.testing.assert_allclose(back.grid.orientation, rot, atol=1e-6)


def test_probability_stored_float32(tmp_path):
    v = Volume(Grid((2, 2, 2), (1, 1, 1)), np.full((2, 2, 2), 0.25), "probability")
    write_volume(v, tmp_path / "p.nii")
    assert nib.load(str(tmp_path / "p.nii")).get_data_dtype() == np.float32


def test_stack_dim4(tmp_path):
    data = np.zeros((2, 2, 2, 13), np.float32)
    data[..., -1] = 1
    s = ProbabilityStack(Grid((2, 2, 2), (1, 1, 1)), data)
    write_stack(s, tmp_path / "s.nii")
    assert nib.load(str(tmp_path / "s.nii")).header["dim"][4] == 13
    back = read_stack(tmp_path / "s.nii")
    assert back.names == CHANNELS
    np.testing.assert_array_equal(back.data, data)


def test_raw_sidecar_is_text(tmp_path):
    v = Volume(Grid((2, 1, 1), (1, 1, 1)), np.array([1.0, 2.0]).reshape(2, 1, 1), "signal")
    write_volume(v, tmp_path / "x.raw")
    side = (tmp_path / "x.raw.txt").read_text()
    assert "dims" in side and "unit: signal" in side
    assert (tmp_path / "x.raw").stat().st_size == 8


def test_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        write_volume(Volume(Grid((1, 1, 1), (1, 1, 1)), np.zeros((1, 1, 1))), tmp_path / "x.img")
