"""Voxel-grid containers and the trilinear sampling machinery.

Arrays are indexed ``[x, y, z]`` (x is the left/right axis). Vector-valued
grids carry the component axis first: ``(3, nx, ny, nz)``. Displacements are
in voxel units and follow the backward convention: output voxel ``p`` reads
the input at ``p + u(p)``. All sampling clamps to the grid edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

Spacing = Tuple[float, float, float]

MASK_CLASSES = ("brain", "skull", "hematoma", "ventricle_left", "ventricle_right")

DEFAULT_RESAMPLE_SPACING = (0.40, 0.40, 1.50)


class GridMismatchError(ValueError):
    """Two grids that must agree in shape do not."""


def _frozen(a: np.ndarray, ndim: int, what: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    a.setflags(write=False)
    return a


def _check_spacing(spacing: Sequence[float]) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(s > 0 and np.isfinite(s) for s in sp):
        raise ValueError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp  # type: ignore[return-value]


@dataclass(frozen=True)
class ScalarVolume:
    """CT intensities (pseudo-HU) on a regular grid with spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "volume data"))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(np.asarray(data), self.spacing)


@dataclass(frozen=True)
class MaskVolume:
    """Soft segmentation masks, one channel per entry of ``MASK_CLASSES``."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    classes: Tuple[str, ...] = field(default=MASK_CLASSES)

    def __post_init__(self):
        data = _frozen(self.data, 4, "mask data")
        if data.shape[0] != len(self.classes):
            raise ValueError(f"expected {len(self.classes)} channels, got {data.shape[0]}")
        if data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.classes.index(name)]

    def binarized(self) -> "MaskVolume":
        return MaskVolume((self.data >= 0.5).astype(np.float64), self.spacing, self.classes)

    @classmethod
    def from_channels(cls, channels: dict, spacing: Spacing = (1.0, 1.0, 1.0)) -> "MaskVolume":
        shape = next(iter(channels.values())).shape
        data = np.stack([np.asarray(channels.get(c, np.zeros(shape)), dtype=np.float64) for c in MASK_CLASSES])
        return cls(data, spacing)


@dataclass(frozen=True)
class VectorField:
    """Per-voxel 3-vectors in voxel units (velocities or displacements)."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data, 4, "field data")
        if data.shape[0] != 3:
            raise ValueError(f"vector field needs 3 components, got {data.shape[0]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims, spacing: Spacing = (1.0, 1.0, 1.0)) -> "VectorField":
        return cls(np.zeros((3, *dims)), spacing)


Gridded = Union[ScalarVolume, MaskVolume, VectorField]


# ---------------------------------------------------------------------------
# tensor kernels


def to_tensor(a, dtype=torch.float64) -> torch.Tensor:
    """Copy an array (possibly read-only) into a fresh tensor."""
    return torch.from_numpy(np.array(a, dtype=np.float64)).to(dtype)


def identity_grid(dims, dtype=torch.float64) -> torch.Tensor:
    """Voxel coordinates of every node, shape ``(nx, ny, nz, 3)``."""
    axes = [torch.arange(n, dtype=dtype) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def sample(img: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinearly sample ``img`` (C, nx, ny, nz) at voxel ``points`` (..., 3).

    Returns shape ``(C, *points.shape[:-1])``. Differentiable with respect to
    both the image values and the sample positions.
    """
    dims = img.shape[-3:]
    scale = torch.tensor([2.0 / max(n - 1, 1) for n in dims], dtype=points.dtype)
    norm = points * scale - 1.0
    # grid_sample orders the last axis (W, H, D) = (z, y, x)
    grid = norm.flip(-1).reshape(1, -1, 1, 1, 3)
    out = F.grid_sample(img.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out.reshape(img.shape[0], *points.shape[:-1])


def warp_tensor(img: torch.Tensor, disp: torch.Tensor, grid: torch.Tensor | None = None) -> torch.Tensor:
    """Backward-warp ``img`` (C, X, Y, Z) by displacement ``disp`` (3, X, Y, Z)."""
    if img.shape[-3:] != disp.shape[-3:]:
        raise GridMismatchError(f"image {tuple(img.shape[-3:])} vs field {tuple(disp.shape[-3:])}")
    if grid is None:
        grid = identity_grid(disp.shape[-3:], disp.dtype)
    return sample(img, grid + disp.movedim(0, -1))


def flip_tensor(t: torch.Tensor, vector: bool = False) -> torch.Tensor:
    """Reverse the x axis; for vector data also negate the x component."""
    out = torch.flip(t, dims=(-3,))
    if vector:
        out = torch.cat([-out[:1], out[1:]], dim=0)
    return out


def halves_tensor(t: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    nx = t.shape[-3]
    if nx < 2:
        raise ValueError("need at least 2 slices along x to split")
    h = nx // 2
    return t[..., :h, :, :], t[..., nx - h:, :, :]


# ---------------------------------------------------------------------------
# public volume operations


def trilinear_sample(vol: ScalarVolume, point) -> float:
    """Value of ``vol`` at a continuous voxel coordinate (clamp-to-edge)."""
    data = vol.data
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"point must be 3 finite coordinates, got {point!r}")
    lo, w = [], []
    for axis in range(3):
        n = data.shape[axis]
        c = min(max(p[axis], 0.0), n - 1.0)
        i0 = min(int(np.floor(c)), max(n - 2, 0))
        lo.append(i0)
        w.append(c - i0)
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wt = (w[0] if dx else 1 - w[0]) * (w[1] if dy else 1 - w[1]) * (w[2] if dz else 1 - w[2])
                if wt == 0.0:
                    continue
                acc += wt * data[lo[0] + dx, lo[1] + dy, lo[2] + dz]
    return float(acc)


def warp(vol: Gridded, fld: VectorField):
    """Backward-warp a scalar volume, mask set or vector field channel-wise."""
    if vol.dims != fld.dims:
        raise GridMismatchError(f"volume {vol.dims} vs field {fld.dims}")
    if not np.any(fld.data):
        return vol
    data = vol.data if vol.data.ndim == 4 else vol.data[None]
    out = warp_tensor(to_tensor(data), to_tensor(fld.data)).numpy()
    if isinstance(vol, ScalarVolume):
        return ScalarVolume(out[0], vol.spacing)
    if isinstance(vol, MaskVolume):
        return MaskVolume(np.clip(out, 0.0, 1.0), vol.spacing, vol.classes)
    return VectorField(out, vol.spacing)


def resample(vol: ScalarVolume, target_spacing: Sequence[float] = DEFAULT_RESAMPLE_SPACING) -> ScalarVolume:
    """Trilinear resampling onto a grid with the same physical extent."""
    target = _check_spacing(target_spacing)
    dims = tuple(int(round(n * s / t)) for n, s, t in zip(vol.dims, vol.spacing, target))
    if min(dims) < 1:
        raise ValueError(f"resampling {vol.dims} at {vol.spacing} to {target} leaves an empty axis")
    if dims == vol.dims and target == vol.spacing:
        return vol
    ratio = torch.tensor([t / s for s, t in zip(vol.spacing, target)], dtype=torch.float64)
    pts = identity_grid(dims) * ratio
    out = sample(to_tensor(vol.data)[None], pts)[0]
    return ScalarVolume(out.numpy(), target)


def split_halves(vol: ScalarVolume) -> Tuple[ScalarVolume, ScalarVolume]:
    """Split at the mid-sagittal plane; an odd centre slice goes to neither half."""
    left, right = halves_tensor(to_tensor(vol.data))
    return ScalarVolume(left.numpy(), vol.spacing), ScalarVolume(right.numpy(), vol.spacing)


def sagittal_flip(vol: Gridded):
    """Mirror along x. Vector fields also have their x component negated."""
    if isinstance(vol, VectorField):
        out = vol.data[:, ::-1].copy()
        out[0] = -out[0]
        return VectorField(out, vol.spacing)
    if isinstance(vol, MaskVolume):
        return MaskVolume(vol.data[:, ::-1], vol.spacing, vol.classes)
    return ScalarVolume(vol.data[::-1], vol.spacing)
