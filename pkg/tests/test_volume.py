import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from brainshift.volume import (GridMismatchError, MaskVolume, ScalarVolume, VectorField, resample,
                               sagittal_flip, split_halves, trilinear_sample, warp)


def test_volume_is_read_only():
    vol = ScalarVolume(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ScalarVolume(np.full((4, 4, 4), np.nan))
    with pytest.raises(ValueError):
        ScalarVolume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        MaskVolume(np.full((5, 4, 4, 4), 1.5))
    with pytest.raises(ValueError):
        VectorField(np.zeros((2, 4, 4, 4)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 6.0), min_size=3, max_size=3))
def test_trilinear_matches_scipy(point):
    data = np.random.default_rng(0).normal(size=(6, 5, 7))
    vol = ScalarVolume(data)
    p = np.clip(point, 0, np.array(data.shape) - 1)
    expect = map_coordinates(data, p[:, None], order=1, mode="nearest")[0]
    assert trilinear_sample(vol, point) == pytest.approx(expect, abs=1e-12)


def test_trilinear_exact_on_linear_function():
    x, y, z = np.meshgrid(np.arange(5.0), np.arange(6.0), np.arange(7.0), indexing="ij")
    vol = ScalarVolume(2 * x - 3 * y + 0.5 * z + 1)
    assert trilinear_sample(vol, (1.3, 2.7, 4.1)) == pytest.approx(2 * 1.3 - 3 * 2.7 + 0.5 * 4.1 + 1)


def test_warp_zero_field_is_identity():
    vol = ScalarVolume(np.random.default_rng(1).normal(size=(6, 6, 6)))
    assert warp(vol, VectorField.zeros(vol.dims)).data is vol.data


def test_warp_integer_shift_reads_neighbour():
    data = np.random.default_rng(2).normal(size=(8, 6, 6))
    u = np.zeros((3, 8, 6, 6))
    u[0] = 1.0
    out = warp(ScalarVolume(data), VectorField(u)).data
    # backward warp: output p reads the input at p + u(p)
    np.testing.assert_allclose(out[:-1], data[1:], atol=1e-12)
    np.testing.assert_allclose(out[-1], data[-1], atol=1e-12)


def test_warp_matches_scipy_on_random_field():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(7, 6, 5))
    u = rng.uniform(-1.5, 1.5, size=(3, 7, 6, 5))
    out = warp(ScalarVolume(data), VectorField(u)).data
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in data.shape], indexing="ij"))
    pts = np.clip(grid + u, 0, np.array(data.shape)[:, None, None, None] - 1)
    expect = map_coordinates(data, pts.reshape(3, -1), order=1, mode="nearest").reshape(data.shape)
    np.testing.assert_allclose(out, expect, atol=1e-10)


def test_warp_grid_mismatch():
    with pytest.raises(GridMismatchError):
        warp(ScalarVolume(np.zeros((4, 4, 4))), VectorField.zeros((4, 4, 5)))


def test_sagittal_flip_involution_and_vector_sign():
    rng = np.random.default_rng(4)
    vol = ScalarVolume(rng.normal(size=(5, 4, 3)))
    np.testing.assert_array_equal(sagittal_flip(sagittal_flip(vol)).data, vol.data)
    fld = VectorField(rng.normal(size=(3, 5, 4, 3)))
    flipped = sagittal_flip(fld)
    np.testing.assert_array_equal(flipped.data[0], -fld.data[0, ::-1])
    np.testing.assert_array_equal(flipped.data[1:], fld.data[1:, ::-1])


def test_split_halves_drops_odd_centre():
    data = np.arange(5 * 2 * 2, dtype=float).reshape(5, 2, 2)
    left, right = split_halves(ScalarVolume(data))
    np.testing.assert_array_equal(left.data, data[:2])
    np.testing.assert_array_equal(right.data, data[3:])


def test_resample_preserves_extent_and_linear_values():
    x = np.meshgrid(np.arange(9.0), np.arange(9.0), np.arange(9.0), indexing="ij")[0]
    out = resample(ScalarVolume(x), (2.0, 1.0, 0.5))
    assert out.dims == (4, 9, 18)
    np.testing.assert_allclose(out.data[:, 0, 0], [0, 2, 4, 6], atol=1e-12)


def test_resample_same_spacing_is_noop():
    vol = ScalarVolume(np.ones((4, 4, 4)))
    assert resample(vol, (1, 1, 1)) is vol
