"""Rigid mid-sagittal alignment by Adam on finite-difference gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import torch

from .metrics import EmptySupportError, MetricsConfig, symmetry_terms, volume_balance_t
from .volume import ScalarVolume, identity_grid, sample, to_tensor

log = logging.getLogger(__name__)

PARAMS = ("pitch", "yaw", "roll", "tx", "ty", "tz")
# sagittal symmetry cannot see in-plane shifts (ty, tz), so they stay fixed by default
DEFAULT_FREE = ("pitch", "yaw", "roll", "tx")
PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class RigidTransform:
    """Angles in radians, translation in voxels; rotation about the grid centre."""

    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(getattr(self, p)) for p in PARAMS):
            raise ValueError("rigid parameters must be finite")

    @property
    def angles(self) -> Tuple[float, float, float]:
        return (self.pitch, self.yaw, self.roll)

    @property
    def translation(self) -> Tuple[float, float, float]:
        return (self.tx, self.ty, self.tz)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, p) for p in PARAMS], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RigidTransform":
        return cls(*(float(x) for x in a))

    def to_dict(self) -> dict:
        return {p: float(getattr(self, p)) for p in PARAMS}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        unknown = set(d) - set(PARAMS)
        if unknown:
            raise ValueError(f"unknown transform keys: {sorted(unknown)}")
        return cls(**{p: float(d.get(p, 0.0)) for p in PARAMS})

    def is_identity(self) -> bool:
        return not np.any(self.as_array())


@dataclass(frozen=True)
class AlignConfig:
    iterations: int = 150
    lr: float = 0.03
    w_jeffrey: float = 1.0
    w_ssim: float = 1.0
    w_volume: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    angle_step: float = 1e-3
    translation_step: float = 0.1
    free: Tuple[str, ...] = DEFAULT_FREE
    precision: str = "float32"
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if min(self.w_jeffrey, self.w_ssim, self.w_volume) < 0:
            raise ValueError("alignment loss weights must be >= 0")
        object.__setattr__(self, "free", tuple(self.free))
        if not self.free or set(self.free) - set(PARAMS) or len(set(self.free)) != len(self.free):
            raise ValueError(f"free must be a non-empty subset of {PARAMS}, got {self.free}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")


def rotation_matrix(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    cx, sx = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cz, sz = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _source_points(params: np.ndarray, dims, spacing, grid: torch.Tensor) -> torch.Tensor:
    """Input voxel coordinates read by each output voxel, one set per parameter row."""
    sp = np.asarray(spacing, dtype=np.float64)
    c_mm = (np.asarray(dims, dtype=np.float64) - 1) / 2 * sp
    pts = []
    for row in np.atleast_2d(params):
        r_inv = rotation_matrix(*row[:3]).T
        t_mm = row[3:] * sp
        # q = R^-1 (p - c - t) + c in mm; folded into one voxel-space affine
        shift = (c_mm - r_inv @ (c_mm + t_mm)) / sp
        a = r_inv * sp[None, :] / sp[:, None]
        pts.append(grid @ torch.from_numpy(a.T).to(grid.dtype) + torch.from_numpy(shift).to(grid.dtype))
    return torch.stack(pts)


def _apply_batch(x: torch.Tensor, params: np.ndarray, spacing, grid: torch.Tensor) -> torch.Tensor:
    pts = _source_points(params, x.shape, spacing, grid)
    return torch.stack([sample(x[None], p)[0] for p in pts])


def apply_rigid(vol: ScalarVolume, T: RigidTransform) -> ScalarVolume:
    """Resample ``vol`` under ``T``; the identity returns the input untouched."""
    if T.is_identity():
        return vol
    x = to_tensor(vol.data)
    out = _apply_batch(x, T.as_array(), vol.spacing, identity_grid(vol.dims))[0]
    return ScalarVolume(out.numpy(), vol.spacing)


def alignment_loss_t(x: torch.Tensor, cfg: AlignConfig, batch_dims: int = 0) -> torch.Tensor:
    jeff, ssim = symmetry_terms(x, cfg.metrics, batch_dims=batch_dims)
    vol = volume_balance_t(x, cfg.metrics.volume_threshold, cfg.metrics.volume_sharpness)
    return cfg.w_jeffrey * jeff + cfg.w_ssim * ssim + cfg.w_volume * vol


def alignment_loss(vol: ScalarVolume, cfg: AlignConfig = AlignConfig()) -> float:
    return float(alignment_loss_t(to_tensor(vol.data), cfg))


@dataclass
class AlignResult:
    transform: RigidTransform
    aligned: ScalarVolume
    trace: List[float]
    best_iteration: int


def align_symmetry(vol: ScalarVolume, cfg: AlignConfig = AlignConfig()) -> AlignResult:
    """Find the rigid transform that makes ``vol`` most mirror-symmetric about x = centre.

    Each Adam step evaluates the loss at the current parameters and at +/- a
    small step along each free parameter, all in one batched resample. The
    lowest-loss iterate seen is returned.
    """
    dtype = PRECISIONS[cfg.precision]
    x = to_tensor(vol.data, dtype)
    fg = torch.sigmoid((x - cfg.metrics.volume_threshold) / cfg.metrics.volume_sharpness)
    if float(fg.sum()) < 1e-6:
        raise EmptySupportError("volume has no foreground to align")
    grid = identity_grid(vol.dims, dtype)
    idx = [PARAMS.index(p) for p in cfg.free]
    # Adam works on radians and half-extent units (the torch affine
    # convention), so one lr step is about one voxel at the rim for both
    half = np.concatenate([np.ones(3), (np.asarray(vol.dims, dtype=np.float64) - 1) / 2])
    steps = (np.array([cfg.angle_step] * 3 + [cfg.translation_step] * 3) / half)[idx]
    k = len(idx)
    probes = np.zeros((2 * k + 1, 6))
    probes[1 + np.arange(k), idx] = steps
    probes[1 + k + np.arange(k), idx] = -steps

    theta = np.zeros(6)
    m = np.zeros(k)
    v = np.zeros(k)
    trace: List[float] = []
    best = (math.inf, theta.copy(), -1)
    with torch.no_grad():
        for it in range(cfg.iterations):
            batch = _apply_batch(x, (theta + probes) * half, vol.spacing, grid)
            losses = alignment_loss_t(batch, cfg, batch_dims=1).double().numpy()
            if not np.all(np.isfinite(losses)):
                raise FloatingPointError(f"non-finite alignment loss at iteration {it}: params {theta.tolist()}")
            loss = float(losses[0])
            trace.append(loss)
            if loss < best[0]:
                best = (loss, theta.copy(), it)
            grad = (losses[1:k + 1] - losses[k + 1:]) / (2 * steps)
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            m_hat = m / (1 - cfg.beta1 ** (it + 1))
            v_hat = v / (1 - cfg.beta2 ** (it + 1))
            theta[idx] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        final = float(alignment_loss_t(_apply_batch(x, theta * half, vol.spacing, grid), cfg, batch_dims=1)[0])
    if final < best[0]:
        best = (final, theta.copy(), cfg.iterations)
    T = RigidTransform.from_array(best[1] * half)
    log.info("alignment: loss %.5f -> %.5f (best at iteration %d)", trace[0], best[0], best[2])
    return AlignResult(T, apply_rigid(vol, T), trace, best[2])


def forward_map(T: RigidTransform, dims, spacing) -> Tuple[np.ndarray, np.ndarray]:
    """(R, b) in mm such that input point q lands at R q + b in the output."""
    sp = np.asarray(spacing, dtype=np.float64)
    c = (np.asarray(dims, dtype=np.float64) - 1) / 2 * sp
    R = rotation_matrix(*T.angles)
    return R, c + np.asarray(T.translation) * sp - R @ c


def midplane_residual(perturbation: RigidTransform, recovered: RigidTransform, dims, spacing) -> Tuple[float, float]:
    """Where the original mid-sagittal plane ends up after perturb-then-recover.

    Returns (tilt in degrees from the x-normal, offset of the centre from the
    plane in x-voxels). Rotations about the x axis and in-plane shifts leave a
    mirror-symmetric head unchanged, so only these two residuals are
    observable from symmetry.
    """
    R1, b1 = forward_map(perturbation, dims, spacing)
    R2, b2 = forward_map(recovered, dims, spacing)
    R, b = R2 @ R1, R2 @ b1 + b2
    sp = np.asarray(spacing, dtype=np.float64)
    c = (np.asarray(dims, dtype=np.float64) - 1) / 2 * sp
    n = R @ np.array([1.0, 0.0, 0.0])
    tilt = math.degrees(math.acos(min(1.0, abs(n[0]))))
    offset = abs(float(n @ (R @ c + b - c))) / sp[0]
    return tilt, offset
