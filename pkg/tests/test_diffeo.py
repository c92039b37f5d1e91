import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.ndimage import gaussian_filter, map_coordinates

from brainshift.diffeo import (VelocityField, compose, gradient_loss_t, integrate_velocity, jacobian_determinant,
                               jacobian_loss)
from brainshift.volume import VectorField


def euler_oracle(v, n_steps=1024):
    """Displacement from forward Euler on dx/dt = v(x), trilinear v, clamp at the border."""
    dims = v.shape[1:]
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij")).reshape(3, -1)
    hi = np.array(dims, dtype=float)[:, None] - 1
    x = grid.copy()
    for _ in range(n_steps):
        pts = np.clip(x, 0, hi)
        vel = np.stack([map_coordinates(v[c], pts, order=1, mode="nearest") for c in range(3)])
        x = x + vel / n_steps
    return (x - grid).reshape(3, *dims)


def linear_field(dims, A):
    c = (np.array(dims, dtype=float) - 1) / 2
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"))
    return np.einsum("ij,j...->i...", A, grid - c[:, None, None, None])


def smooth_field(rng, dims, vmax, sigma=3.0):
    v = np.stack([gaussian_filter(rng.normal(size=dims), sigma, mode="wrap") for _ in range(3)])
    return v * (vmax / np.abs(v).max())


def interior(a, m):
    return a[:, m:-m, m:-m, m:-m]


def test_constant_velocity_is_translation():
    v = np.zeros((3, 12, 12, 12))
    v[0], v[1], v[2] = 1.25, -0.5, 0.75
    u = integrate_velocity(VectorField(v)).data
    np.testing.assert_allclose(interior(u, 3), interior(euler_oracle(v), 3), atol=1e-2)
    np.testing.assert_allclose(interior(u, 3)[0], 1.25, atol=1e-10)


def test_linear_velocity_matches_euler_and_expm():
    dims = (20, 20, 20)
    A = np.array([[0.05, 0.02, 0.0], [-0.03, 0.04, 0.01], [0.0, 0.02, -0.06]])
    v = linear_field(dims, A)
    u = integrate_velocity(VectorField(v)).data
    ref = euler_oracle(v)
    assert np.abs(interior(u - ref, 5)).max() < 1e-2
    # the flow of a linear field is the matrix exponential
    exact = linear_field(dims, expm(A) - np.eye(3))
    assert np.abs(interior(u - exact, 5)).max() < 1e-2


def test_control_grid_linear_velocity():
    dims = (24, 24, 24)
    A = np.array([[0.04, 0.0, 0.01], [0.0, -0.05, 0.0], [0.02, 0.0, 0.03]])
    full = linear_field(dims, A)
    vf = VelocityField(full[:, ::2, ::2, ::2], dims, factor=2)
    u = integrate_velocity(vf).data
    ref = euler_oracle(full)
    assert np.abs(interior(u - ref, 6)).max() < 1e-2


@pytest.mark.parametrize("seed", range(10))
def test_det_positive_on_random_smooth_fields(seed):
    rng = np.random.default_rng(seed)
    dims = (24, 24, 24)
    ctrl = smooth_field(rng, (12, 12, 12), 2.0, sigma=1.5)
    phi = integrate_velocity(VelocityField(ctrl, dims, factor=2))
    assert jacobian_determinant(phi).data.min() > 0
    full = smooth_field(rng, dims, 2.0)
    assert jacobian_determinant(integrate_velocity(VectorField(full))).data.min() > 0


def _family(seed):
    """Smooth test velocities: max|v| = 2 voxels, correlation length 5 voxels."""
    rng = np.random.default_rng(seed)
    dims = (32, 32, 32)
    full = VectorField(smooth_field(rng, dims, 2.0, sigma=5.0))
    ctrl = VelocityField(smooth_field(rng, (16, 16, 16), 2.0, sigma=2.5), dims, factor=2)
    return full, ctrl


def _negate(v):
    if isinstance(v, VelocityField):
        return VelocityField(-v.data, v.image_dims, v.factor)
    return VectorField(-v.data)


@pytest.mark.parametrize("seed", range(4))
def test_doubling_steps_converges(seed):
    for v in _family(seed):
        u7 = integrate_velocity(v, 7).data
        u8 = integrate_velocity(v, 8).data
        assert np.abs(interior(u8 - u7, 6)).max() < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_inverse_consistency(seed):
    for v in _family(seed):
        resid = compose(integrate_velocity(v), integrate_velocity(_negate(v))).data
        assert np.abs(interior(resid, 6)).max() < 0.1


def test_zero_velocity_identity():
    vf = VelocityField.zeros((10, 10, 10))
    assert not np.any(integrate_velocity(vf).data)


def test_translation_composition():
    dims = (10, 10, 10)
    f, g = np.zeros((3, *dims)), np.zeros((3, *dims))
    f[0], g[1] = 1.0, 2.0
    out = compose(VectorField(f), VectorField(g)).data
    np.testing.assert_allclose(interior(out, 3)[0], 1.0)
    np.testing.assert_allclose(interior(out, 3)[1], 2.0)


def test_uniform_expansion_det():
    dims = (12, 12, 12)
    u = linear_field(dims, 0.1 * np.eye(3))
    det = jacobian_determinant(VectorField(u)).data
    np.testing.assert_allclose(det, 1.1 ** 3, atol=1e-12)


def test_jacobian_loss_identity_targets():
    dims = (6, 6, 6)
    zero = VectorField.zeros(dims)
    assert float(jacobian_loss(zero, np.zeros(dims))) == 0.0
    assert float(jacobian_loss(zero, np.ones(dims))) == 1.0


def test_gradient_loss_normalization():
    x = torch.arange(8, dtype=torch.float64)
    v = torch.zeros(3, 8, 5, 6)
    v[0] = x[:, None, None]
    # one component with unit x-slope: 1 of 3 components, 1 of 3 axes
    assert float(gradient_loss_t(v)) == pytest.approx(1 / 9)
    v[1] = x[:, None, None]
    v[2] = x[:, None, None]
    assert float(gradient_loss_t(v)) == pytest.approx(1 / 3)
    # per component and axis, the mean squared x-difference is exactly 1
    assert float((torch.diff(v[0], dim=0) ** 2).mean()) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_loss_zero_for_constant(a, b, c):
    v = torch.tensor([a, b, c], dtype=torch.float64)[:, None, None, None].expand(3, 4, 4, 4)
    assert float(gradient_loss_t(v)) == 0.0


def test_velocity_field_validation():
    with pytest.raises(ValueError):
        VelocityField(np.zeros((3, 4, 4, 4)), (10, 10, 10), factor=2)
    with pytest.raises(ValueError):
        VelocityField(np.full((3, 5, 5, 5), np.inf), (10, 10, 10), factor=2)
