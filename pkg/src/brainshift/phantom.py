"""Synthetic head phantoms with known cSDH-like compression fields.

A healthy phantom is an ellipsoidal skull shell around a brain with two
mirrored ventricles, exactly symmetric under ``sagittal_flip``. A hematoma is
injected by compressing each brain row along x away from the chosen inner
skull surface and filling the vacated crescent with blood. The compression
is piecewise linear and strictly monotone per row, so the stored field is a
diffeomorphism (det J = 1 + du_x/dx > 0) with an analytic inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .biomarkers import BiomarkerRecord, record_from_case
from .volume import MASK_CLASSES, MaskVolume, ScalarVolume, VectorField, resample, warp

SIDES = ("none", "left", "right", "bilateral")

# fraction of the crescent width kept as compressed brain in the source image
CRESCENT_SOURCE_FRACTION = 0.1


@dataclass(frozen=True)
class Intensities:
    air: float = -1000.0
    brain: float = 35.0
    csf: float = 8.0
    skull: float = 1000.0
    hematoma: float = 70.0


@dataclass(frozen=True)
class PhantomSpec:
    grid: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    side: str = "none"
    thickness: float = 6.0
    intensities: Intensities = field(default_factory=Intensities)

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if isinstance(self.intensities, dict):
            object.__setattr__(self, "intensities", Intensities(**self.intensities))

    def validate(self) -> None:
        if len(self.grid) != 3 or min(self.grid) < 32:
            raise ValueError(f"phantom grid must be >= 32 per axis, got {self.grid}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.thickness < 0:
            raise ValueError("thickness must be non-negative")
        if self.side != "none" and self.thickness >= geometry(self).inner[0] / 2:
            raise ValueError(f"thickness {self.thickness} >= half the inner-skull radius")


@dataclass(frozen=True)
class Geometry:
    center: np.ndarray
    inner: np.ndarray  # inner-skull semi-axes (voxels)
    outer: np.ndarray
    ventricle_offset: float  # |x - cx| of each ventricle centre
    ventricle_axes: np.ndarray
    ventricle_z: float


def geometry(spec: PhantomSpec) -> Geometry:
    n = np.asarray(spec.grid, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    jitter = rng.uniform(-0.02, 0.02, size=6)
    inner = n * (np.array([0.375, 0.40, 0.34]) + jitter[:3] * 0.5)
    outer = inner + n / 16.0
    return Geometry(
        center=(n - 1) / 2,
        inner=inner,
        outer=outer,
        ventricle_offset=float(n[0] * (0.10 + jitter[3] * 0.5)),
        ventricle_axes=n * np.array([0.05, 0.14 + jitter[4], 0.07 + jitter[5] * 0.5]),
        ventricle_z=float(n[2] * 0.03),
    )


@dataclass(frozen=True)
class PhantomCase:
    volume: ScalarVolume
    masks: MaskVolume
    ground_truth_field: VectorField
    inverse_field: VectorField
    side: str = "none"
    thickness: float = 0.0
    spec: Optional[PhantomSpec] = None

    @property
    def laterality(self) -> str:
        if self.side == "none":
            return "none"
        return "bilateral" if self.side == "bilateral" else "unilateral"


def _blur(a: np.ndarray) -> np.ndarray:
    return gaussian_filter(a, sigma=1.0, mode="nearest")


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a[::-1])


def _coords(spec: PhantomSpec, g: Geometry):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) - c for n, c in zip(spec.grid, g.center)], indexing="ij")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> PhantomCase:
    """Healthy, mirror-symmetric head phantom."""
    spec.validate()
    g = geometry(spec)
    x, y, z = _coords(spec, g)
    inside_inner = (x / g.inner[0]) ** 2 + (y / g.inner[1]) ** 2 + (z / g.inner[2]) ** 2 <= 1.0
    inside_outer = (x / g.outer[0]) ** 2 + (y / g.outer[1]) ** 2 + (z / g.outer[2]) ** 2 <= 1.0
    skull = inside_outer & ~inside_inner
    va = g.ventricle_axes
    vent_l = (((x + g.ventricle_offset) / va[0]) ** 2 + (y / va[1]) ** 2
              + ((z - g.ventricle_z) / va[2]) ** 2) <= 1.0
    vent_l &= x < 0
    vent_r = vent_l[::-1]

    it = spec.intensities
    hard = np.full(spec.grid, it.air)
    hard[skull] = it.skull
    hard[inside_inner] = it.brain
    hard[vent_l | vent_r] = it.csf
    vol = _symmetrize(_blur(hard))

    brain = _symmetrize(_blur(inside_inner.astype(np.float64)))
    skull_m = _symmetrize(_blur(skull.astype(np.float64)))
    vl = _blur(vent_l.astype(np.float64))
    chans = {
        "brain": brain,
        "skull": skull_m,
        "hematoma": np.zeros(spec.grid),
        "ventricle_left": vl,
        "ventricle_right": vl[::-1].copy(),
    }
    masks = MaskVolume(np.clip(np.stack([chans[c] for c in MASK_CLASSES]), 0.0, 1.0), spec.spacing)
    zero = VectorField.zeros(spec.grid, spec.spacing)
    return PhantomCase(ScalarVolume(vol, spec.spacing), masks, zero, zero, "none", 0.0, spec)


def _row_maps(depth, half_width, thick):
    """Forward source map and its inverse along one compressed half-row.

    ``depth`` is the distance from the inner skull surface; the crescent
    [0, thick) reads the outermost ``delta`` of healthy brain and the rest of
    the half-row [thick, half_width] is squeezed linearly onto [delta, half_width].
    """
    delta = CRESCENT_SOURCE_FRACTION * thick
    s = depth
    src = np.where(s < thick, s * delta / np.maximum(thick, 1e-12),
                   delta + (s - thick) * (half_width - delta) / np.maximum(half_width - thick, 1e-12))
    inv = np.where(s < delta, s * thick / np.maximum(delta, 1e-12),
                   thick + (s - delta) * (half_width - thick) / np.maximum(half_width - delta, 1e-12))
    inside = (s >= 0) & (s <= half_width) & (thick > 0)
    return np.where(inside, src - s, 0.0), np.where(inside, inv - s, 0.0), inside & (s < thick)


def compression_fields(spec: PhantomSpec, side: str, thickness: float):
    """(forward u_x, inverse u_x, crescent mask) for the requested side(s)."""
    g = geometry(spec)
    x, y, z = _coords(spec, g)
    q = np.clip(1.0 - (y / g.inner[1]) ** 2 - (z / g.inner[2]) ** 2, 0.0, None)
    half = g.inner[0] * np.sqrt(q)
    thick = thickness * q
    fwd = np.zeros(spec.grid)
    inv = np.zeros(spec.grid)
    crescent = np.zeros(spec.grid, dtype=bool)
    if side in ("left", "bilateral"):
        f, i, c = _row_maps(x + half, half, thick)
        f, i, c = f * (x <= 0), i * (x <= 0), c & (x <= 0)
        fwd += f
        inv += i
        crescent |= c
    if side in ("right", "bilateral"):
        f, i, c = _row_maps(half - x, half, thick)
        f, i, c = f * (x > 0), i * (x > 0), c & (x > 0)
        fwd -= f
        inv -= i
        crescent |= c
    return fwd, inv, crescent


def inject_hematoma(healthy: PhantomCase, side: str, thickness: float) -> PhantomCase:
    """Compress the brain away from one (or both) skull sides and fill with blood."""
    if np.any(healthy.ground_truth_field.data):
        raise ValueError("inject_hematoma needs a healthy case (identity ground truth)")
    spec = healthy.spec or PhantomSpec(grid=healthy.volume.dims, spacing=healthy.volume.spacing)
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    if side == "none" or thickness == 0:
        return replace(healthy, side="none", thickness=0.0)
    replace(spec, side=side, thickness=thickness).validate()

    ux, ux_inv, crescent = compression_fields(spec, side, thickness)
    zeros = np.zeros_like(ux)
    fwd = VectorField(np.stack([ux, zeros, zeros]), spec.spacing)
    inv = VectorField(np.stack([ux_inv, zeros, zeros]), spec.spacing)

    hem = crescent.astype(np.float64)
    warped = warp(healthy.masks, fwd)
    vents = warped.channel("ventricle_left") + warped.channel("ventricle_right")
    if np.any(crescent & (vents > 0.5)):
        raise ValueError(f"thickness {thickness} drives the hematoma into a ventricle")

    it = spec.intensities
    soft_hem = _blur(hem)
    vol = warp(healthy.volume, fwd).data
    vol = vol * (1 - soft_hem) + it.hematoma * soft_hem

    chans = {c: warped.channel(c).copy() for c in MASK_CLASSES}
    chans["brain"] *= 1.0 - hem
    # the skull is not part of the compression; the crescent would otherwise drag its blurred rim inward
    chans["skull"] = healthy.masks.channel("skull").copy()
    chans["hematoma"] = hem
    masks = MaskVolume(np.clip(np.stack([chans[c] for c in MASK_CLASSES]), 0.0, 1.0), spec.spacing)
    return PhantomCase(ScalarVolume(vol, spec.spacing), masks, fwd, inv, side, float(thickness),
                       replace(spec, side=side, thickness=thickness))


def make_case(spec: PhantomSpec) -> PhantomCase:
    healthy = generate_phantom(replace(spec, side="none"))
    return inject_hematoma(healthy, spec.side, spec.thickness)


def downsample_case(case: PhantomCase, n: int) -> PhantomCase:
    """Trilinearly resample a case onto an ``n``-per-axis grid of the same extent.

    Below the 32-voxel generation minimum this is how tiny phantoms (for
    finite-difference checks) are made. Every array is low-passed first so
    the coarse grid does not alias; fields are rescaled to the new voxel
    units.
    """
    dims = case.volume.dims
    spacing = tuple(s * d / n for s, d in zip(case.volume.spacing, dims))
    # anti-aliasing blur as in skimage.transform.rescale: sigma = (factor - 1) / 2
    sigma = [max(d / n - 1.0, 0.0) / 2 for d in dims]

    def shrink(a):
        return resample(ScalarVolume(gaussian_filter(a, sigma, mode="nearest"), case.volume.spacing), spacing).data

    vol = ScalarVolume(shrink(case.volume.data), spacing)
    masks = MaskVolume(np.clip(np.stack([shrink(c) for c in case.masks.data]), 0.0, 1.0), spacing)
    scale = np.array([n / d for d in dims])[:, None, None, None]
    fields_ = [VectorField(np.stack([shrink(c) for c in f.data]) * scale, spacing)
               for f in (case.ground_truth_field, case.inverse_field)]
    return PhantomCase(vol, masks, fields_[0], fields_[1], case.side, case.thickness, None)


@dataclass(frozen=True)
class CohortMember:
    case: PhantomCase
    record: BiomarkerRecord


def generate_cohort(n: int, seed: int = 0, severity_range=(2.0, 9.0), surgery_threshold: float = 5.5,
                    margin: float = 0.5, bilateral_fraction: float = 0.3,
                    grid=(64, 64, 64), spacing=(1.0, 1.0, 1.0)) -> List[CohortMember]:
    """Balanced cohort; surgery iff thickness >= threshold (a margin keeps it separable)."""
    if n < 4:
        raise ValueError("cohort needs at least 4 cases")
    lo, hi = severity_range
    if not lo < surgery_threshold - margin < surgery_threshold + margin < hi:
        raise ValueError("surgery threshold and margin must sit strictly inside the severity range")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=bool)
    labels[: n // 2] = True
    rng.shuffle(labels)
    members = []
    for i, surgery in enumerate(labels):
        if surgery:
            thickness = rng.uniform(surgery_threshold + margin, hi)
        else:
            thickness = rng.uniform(lo, surgery_threshold - margin)
        side = "bilateral" if rng.random() < bilateral_fraction else ("left" if rng.random() < 0.5 else "right")
        case_seed = int(rng.integers(0, 2**31 - 1))
        spec = PhantomSpec(grid=tuple(grid), spacing=tuple(spacing), seed=case_seed, side=side,
                           thickness=round(float(thickness), 3))
        case = make_case(spec)
        rec = record_from_case(f"case{i:03d}", case, surgery=bool(case.thickness >= surgery_threshold))
        members.append(CohortMember(case, rec))
    return members
