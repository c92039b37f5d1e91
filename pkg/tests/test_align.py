import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import center_of_mass

from brainshift.align import (AlignConfig, RigidTransform, align_symmetry, alignment_loss, apply_rigid,
                              forward_map, midplane_residual, rotation_matrix)
from brainshift.metrics import EmptySupportError
from brainshift.phantom import PhantomSpec, generate_phantom
from brainshift.volume import ScalarVolume

angles = st.floats(-math.pi, math.pi)


@settings(max_examples=50, deadline=None)
@given(angles, angles, angles)
def test_rotation_matrix_orthonormal(a, b, c):
    R = rotation_matrix(a, b, c)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_identity_short_circuit():
    vol = ScalarVolume(np.random.default_rng(0).normal(size=(6, 6, 6)))
    assert apply_rigid(vol, RigidTransform()) is vol


def test_integer_translation_moves_content():
    data = np.random.default_rng(1).normal(size=(10, 6, 6))
    out = apply_rigid(ScalarVolume(data), RigidTransform(tx=2.0)).data
    np.testing.assert_allclose(out[2:], data[:-2], atol=1e-5)


def _blob(center, dims=(24, 24, 24), width=4.0):
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"))
    r2 = sum((g[i] - center[i]) ** 2 for i in range(3))
    return ScalarVolume(np.exp(-r2 / width))


def test_forward_map_predicts_blob_motion():
    T = RigidTransform(pitch=0.2, yaw=-0.15, roll=0.3, tx=1.0, ty=-0.5, tz=0.5)
    q = np.array([14.0, 10.0, 12.5])
    out = apply_rigid(_blob(q), T)
    R, b = forward_map(T, out.dims, out.spacing)
    np.testing.assert_allclose(center_of_mass(out.data), R @ q + b, atol=0.05)


def test_forward_map_anisotropic_spacing():
    T = RigidTransform(roll=0.3, tx=1.0)
    q = np.array([13.0, 10.0, 12.0])
    blob = _blob(q)
    vol = ScalarVolume(blob.data, (1.0, 1.5, 2.0))
    out = apply_rigid(vol, T)
    R, b = forward_map(T, out.dims, out.spacing)
    sp = np.array(out.spacing)
    np.testing.assert_allclose(np.array(center_of_mass(out.data)) * sp, R @ (q * sp) + b, atol=0.05)


def test_rotate_then_inverse():
    vol = _blob(np.array([13.0, 11.0, 12.0]), width=30.0)
    there = apply_rigid(vol, RigidTransform(yaw=0.2))
    back = apply_rigid(there, RigidTransform(yaw=-0.2))
    assert np.abs(back.data - vol.data).max() < 0.05


def test_midplane_residual():
    dims, sp = (32, 32, 32), (1.0, 1.0, 1.0)
    T = RigidTransform(yaw=0.1, tx=2.0)
    inv = RigidTransform(yaw=-0.1, tx=-2.0 * math.cos(0.1), tz=-2.0 * math.sin(0.1))
    R1, b1 = forward_map(T, dims, sp)
    R2, b2 = forward_map(inv, dims, sp)
    np.testing.assert_allclose(R2 @ R1, np.eye(3), atol=1e-12)
    tilt, off = midplane_residual(T, inv, dims, sp)
    assert tilt < 1e-6 and off < 1e-9
    tilt, off = midplane_residual(RigidTransform(yaw=math.radians(5)), RigidTransform(), dims, sp)
    assert tilt == pytest.approx(5.0)
    # rotation about x keeps the sagittal plane
    tilt, off = midplane_residual(RigidTransform(pitch=0.3, ty=2), RigidTransform(), dims, sp)
    assert tilt < 1e-9 and off < 1e-9


def test_transform_dict_round_trip():
    T = RigidTransform(0.1, -0.2, 0.3, 1.0, 2.0, -3.0)
    assert RigidTransform.from_dict(T.to_dict()) == T
    with pytest.raises(ValueError):
        RigidTransform.from_dict({"shear": 1.0})
    with pytest.raises(ValueError):
        RigidTransform(pitch=math.inf)


def test_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(free=("tx", "warp"))
    with pytest.raises(ValueError):
        AlignConfig(precision="float16")
    with pytest.raises(ValueError):
        AlignConfig(lr=0)


def test_empty_volume_rejected():
    with pytest.raises(EmptySupportError):
        align_symmetry(ScalarVolume(np.full((8, 8, 8), -1000.0)))


def test_recovers_small_perturbation():
    healthy = generate_phantom(PhantomSpec(grid=(32, 32, 32)))
    T = RigidTransform(yaw=math.radians(4), roll=math.radians(-3), tx=1.5)
    moved = apply_rigid(healthy.volume, T)
    assert alignment_loss(moved) > alignment_loss(healthy.volume) + 0.01
    res = align_symmetry(moved, AlignConfig(iterations=120))
    tilt, off = midplane_residual(T, res.transform, moved.dims, moved.spacing)
    assert tilt < 1.0 and off < 1.0
    assert res.trace[res.best_iteration] == min(res.trace)
    assert alignment_loss(res.aligned) < alignment_loss(moved)


def test_linear_ramp_translation():
    x = np.meshgrid(np.arange(10.0), np.arange(6.0), np.arange(6.0), indexing="ij")[0]
    out = apply_rigid(ScalarVolume(3 * x), RigidTransform(tx=1.0)).data
    np.testing.assert_allclose(out[1:-1], 3 * x[1:-1] - 3, atol=1e-5)


def test_rotate_and_back_on_phantom():
    healthy = generate_phantom(PhantomSpec())
    data = healthy.volume.data
    for axis in ("yaw", "roll"):
        there = apply_rigid(healthy.volume, RigidTransform(**{axis: math.radians(8)}))
        back = apply_rigid(there, RigidTransform(**{axis: math.radians(-8)}))
        assert np.abs(back.data - data).mean() < 0.01 * np.ptp(data)


def test_symmetric_phantom_stays_put():
    healthy = generate_phantom(PhantomSpec(grid=(32, 32, 32)))
    res = align_symmetry(healthy.volume, AlignConfig(iterations=40))
    tilt, off = midplane_residual(RigidTransform(), res.transform, healthy.volume.dims, healthy.volume.spacing)
    assert tilt < 0.5 and off < 0.5
    assert res.trace[res.best_iteration] <= res.trace[0]


def test_documented_example_recovery():
    healthy = generate_phantom(PhantomSpec())
    T = RigidTransform(pitch=math.radians(3), yaw=math.radians(5), roll=math.radians(-4), tx=2.0)
    res = align_symmetry(apply_rigid(healthy.volume, T))
    tilt, off = midplane_residual(T, res.transform, healthy.volume.dims, healthy.volume.spacing)
    assert tilt < 0.5 and off < 0.5
