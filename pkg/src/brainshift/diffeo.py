"""Stationary velocity fields: integration, composition, Jacobians, regularizers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .volume import GridMismatchError, ScalarVolume, Spacing, VectorField, identity_grid, sample, to_tensor

DEFAULT_STEPS = 7
DEFAULT_CONTROL_FACTOR = 2


def control_dims(image_dims, factor: int) -> Tuple[int, int, int]:
    return tuple(int(math.ceil(n / factor)) for n in image_dims)  # type: ignore[return-value]


@dataclass(frozen=True)
class VelocityField:
    """Velocity (image voxels per unit time) on a grid coarsened by ``factor``.

    Control node ``k`` sits at image voxel ``k * factor``; image voxels past
    the last node take the edge value.
    """

    data: np.ndarray
    image_dims: Tuple[int, int, int]
    factor: int = DEFAULT_CONTROL_FACTOR
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        dims = tuple(int(n) for n in self.image_dims)
        if self.factor < 1:
            raise ValueError("control factor must be >= 1")
        if data.shape != (3, *control_dims(dims, self.factor)):
            raise GridMismatchError(
                f"control grid {data.shape[1:]} does not match ceil({dims} / {self.factor})")
        if not np.all(np.isfinite(data)):
            raise ValueError("velocity contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "image_dims", dims)

    @classmethod
    def zeros(cls, image_dims, factor: int = DEFAULT_CONTROL_FACTOR, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros((3, *control_dims(image_dims, factor))), image_dims, factor, spacing)

    def upsampled(self) -> VectorField:
        full = upsample_t(to_tensor(self.data), self.image_dims, self.factor)
        return VectorField(full.numpy(), self.spacing)


def upsample_t(ctrl: torch.Tensor, image_dims, factor: int) -> torch.Tensor:
    """Trilinear interpolation of control values at every image voxel."""
    if factor == 1 and tuple(ctrl.shape[-3:]) == tuple(image_dims):
        return ctrl
    pts = identity_grid(image_dims, ctrl.dtype) / factor
    return sample(ctrl, pts)


def integrate_t(v: torch.Tensor, n_steps: int = DEFAULT_STEPS, grid: torch.Tensor | None = None) -> torch.Tensor:
    """Scaling and squaring of a full-resolution velocity ``(3, X, Y, Z)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if grid is None:
        grid = identity_grid(v.shape[1:], v.dtype)
    u = v / (2 ** n_steps)
    for _ in range(n_steps):
        u = u + sample(u, grid + u.movedim(0, -1))
    return u


def control_displacement_t(v_ctrl: torch.Tensor, image_dims, factor: int, n_steps: int = DEFAULT_STEPS,
                           grid: torch.Tensor | None = None) -> torch.Tensor:
    """Image-resolution displacement from a control-grid velocity.

    Scaling and squaring runs on the control grid (in control-node units) and
    the resulting displacement is upsampled trilinearly.
    """
    if factor == 1:
        return integrate_t(v_ctrl, n_steps, grid)
    u_ctrl = integrate_t(v_ctrl / factor, n_steps, grid)
    return upsample_t(u_ctrl, image_dims, factor) * factor


def integrate_velocity(v, n_steps: int = DEFAULT_STEPS) -> VectorField:
    """Exponentiate a stationary velocity into a displacement field.

    Accepts a control-grid ``VelocityField`` or a full-resolution
    ``VectorField``.
    """
    if isinstance(v, VelocityField):
        data = to_tensor(v.data)
        shape = (3, *v.image_dims)
        if not torch.any(data):
            return VectorField(np.zeros(shape), v.spacing)
        return VectorField(control_displacement_t(data, v.image_dims, v.factor, n_steps).numpy(), v.spacing)
    full = to_tensor(v.data)
    if not torch.any(full):
        return VectorField(np.zeros(full.shape), v.spacing)
    return VectorField(integrate_t(full, n_steps).numpy(), v.spacing)


def compose_t(uf: torch.Tensor, ug: torch.Tensor, grid: torch.Tensor | None = None) -> torch.Tensor:
    if grid is None:
        grid = identity_grid(ug.shape[1:], ug.dtype)
    return ug + sample(uf, grid + ug.movedim(0, -1))


def compose(f: VectorField, g: VectorField) -> VectorField:
    """Displacement of ``f o g``: apply ``g``'s lookup, then ``f``'s."""
    if f.dims != g.dims:
        raise GridMismatchError(f"{f.dims} vs {g.dims}")
    if not np.any(f.data):
        return g
    out = compose_t(to_tensor(f.data), to_tensor(g.data))
    return VectorField(out.numpy(), g.spacing)


def _diff(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Central differences, one-sided on the two boundary faces."""
    n = t.shape[dim]
    first = t.narrow(dim, 1, 1) - t.narrow(dim, 0, 1)
    last = t.narrow(dim, n - 1, 1) - t.narrow(dim, n - 2, 1)
    mid = (t.narrow(dim, 2, n - 2) - t.narrow(dim, 0, n - 2)) / 2
    return torch.cat([first, mid, last], dim=dim)


def jacobian_det_t(u: torch.Tensor) -> torch.Tensor:
    """det(I + grad u) for displacement ``u`` of shape (3, X, Y, Z)."""
    if min(u.shape[1:]) < 3:
        raise ValueError("Jacobian needs at least 3 voxels per axis")
    grads = [_diff(u, k + 1) for k in range(3)]
    # j[i][k] = d phi_i / d x_k
    j = [[grads[k][i] + (1.0 if i == k else 0.0) for k in range(3)] for i in range(3)]
    return (j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]))


def jacobian_determinant(phi: VectorField) -> ScalarVolume:
    det = jacobian_det_t(to_tensor(phi.data))
    return ScalarVolume(det.numpy(), phi.spacing)


def jacobian_loss_t(u: torch.Tensor, hematoma: torch.Tensor) -> torch.Tensor:
    return ((jacobian_det_t(u) - (1.0 - hematoma)) ** 2).mean()


def jacobian_loss(phi: VectorField, hematoma) -> torch.Tensor:
    """Mean squared gap between det J and 1 (healthy) / 0 (hematoma)."""
    hem = to_tensor(hematoma)
    if tuple(hem.shape) != phi.dims:
        raise GridMismatchError(f"hematoma {tuple(hem.shape)} vs field {phi.dims}")
    return jacobian_loss_t(to_tensor(phi.data), hem)


def gradient_loss_t(v: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference, averaged over components and axes.

    This is the l2 diffusion regularizer of VoxelMorph's ``Grad`` loss: each
    axis contributes the mean of its squared differences over every node and
    component, and the three axes are averaged.
    """
    total = v.new_zeros(())
    for axis in (1, 2, 3):
        if v.shape[axis] < 2:
            raise ValueError("gradient loss needs at least 2 nodes per axis")
        d = torch.diff(v, dim=axis)
        total = total + (d * d).mean()
    return total / 3


def gradient_loss(v) -> torch.Tensor:
    return gradient_loss_t(to_tensor(v.data))
