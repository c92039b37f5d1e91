"""Deformation-magnitude biomarkers, hematoma volumetry and the record CSV."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .fileio import atomic_write
from .volume import GridMismatchError, VectorField

CSV_COLUMNS = ("id", "mls_mm", "hematoma_volume_mm3", "max_shift_mm", "mean_shift_mm",
               "sum_shift_mm", "laterality", "surgery")
LATERALITIES = ("unilateral", "bilateral")
DEFAULT_BILATERAL_THRESHOLD = 0.10


@dataclass(frozen=True)
class BiomarkerRecord:
    id: str
    mls_mm: Optional[float]
    hematoma_volume_mm3: float
    max_shift_mm: float
    mean_shift_mm: float
    sum_shift_mm: float
    surgery: bool
    laterality: str

    def __post_init__(self):
        vals = [self.hematoma_volume_mm3, self.max_shift_mm, self.mean_shift_mm, self.sum_shift_mm]
        if self.mls_mm is not None:
            vals.append(self.mls_mm)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"{self.id}: biomarker values must be finite and >= 0")
        if self.max_shift_mm < self.mean_shift_mm - 1e-9:
            raise ValueError(f"{self.id}: max shift below mean shift")
        if self.laterality not in LATERALITIES:
            raise ValueError(f"{self.id}: laterality must be one of {LATERALITIES}")

    def feature(self, name: str) -> Optional[float]:
        return getattr(self, name)


def extract_biomarkers(fld: VectorField, brain_mask, spacing=None):
    """(max, mean, sum) of per-voxel displacement magnitude in mm inside the brain.

    A soft mask is binarized at 0.5.
    """
    mask = np.asarray(brain_mask) >= 0.5
    if mask.shape != fld.dims:
        raise GridMismatchError(f"mask {mask.shape} vs field {fld.dims}")
    if not mask.any():
        raise ValueError("brain mask is empty")
    sp = np.asarray(fld.spacing if spacing is None else spacing, dtype=np.float64)
    mag = np.sqrt(((fld.data * sp[:, None, None, None]) ** 2).sum(axis=0))[mask]
    return float(mag.max()), float(mag.mean()), float(mag.sum())


def hematoma_volume(mask, spacing) -> float:
    return float(np.asarray(mask, dtype=np.float64).sum() * np.prod(spacing))


def laterality(mask, threshold: float = DEFAULT_BILATERAL_THRESHOLD) -> str:
    """Bilateral iff each half holds at least ``threshold`` of the hematoma mass."""
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("hematoma mask is empty")
    h = m.shape[0] // 2
    left, right = m[:h].sum(), m[m.shape[0] - h:].sum()
    return "bilateral" if min(left, right) >= threshold * total else "unilateral"


def ventricle_centroid_shift(masks) -> float:
    """Signed x offset (voxels) of the combined ventricle centroid from the grid centre."""
    v = masks.channel("ventricle_left") + masks.channel("ventricle_right")
    xs = np.arange(v.shape[0], dtype=np.float64) - (v.shape[0] - 1) / 2
    return float((v.sum(axis=(1, 2)) * xs).sum() / v.sum())


def midline_shift_mm(masks) -> float:
    """|x offset| of the combined ventricle centroid from the grid centre, in mm."""
    return abs(ventricle_centroid_shift(masks)) * masks.spacing[0]


def record_from_field(id: str, fld: VectorField, masks, surgery: bool, mls_mm: Optional[float] = None,
                      bilateral_threshold: float = DEFAULT_BILATERAL_THRESHOLD) -> BiomarkerRecord:
    mx, mean, total = extract_biomarkers(fld, masks.channel("brain"))
    hem = masks.channel("hematoma")
    return BiomarkerRecord(
        id=id,
        mls_mm=mls_mm,
        hematoma_volume_mm3=hematoma_volume(hem, masks.spacing),
        max_shift_mm=mx,
        mean_shift_mm=mean,
        sum_shift_mm=total,
        surgery=surgery,
        laterality=laterality(hem, bilateral_threshold) if hem.sum() > 0 else "unilateral",
    )


def record_from_case(id: str, case, surgery: bool) -> BiomarkerRecord:
    """Biomarkers from a phantom's ground-truth field; MLS from its ventricle centroid."""
    return record_from_field(id, case.ground_truth_field, case.masks, surgery,
                             mls_mm=round(midline_shift_mm(case.masks), 6))


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Iterable[BiomarkerRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_records(records: Iterable[BiomarkerRecord], path) -> None:
    atomic_write(path, records_to_csv(records))


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "y"):
        return True
    if t in ("0", "false", "no", "n"):
        return False
    raise ValueError(f"cannot parse surgery flag {s!r}")


def read_records(path) -> List[BiomarkerRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"biomarker CSV lacks columns: {sorted(missing)}")
        out = []
        for row in reader:
            mls = row["mls_mm"].strip()
            out.append(BiomarkerRecord(
                id=row["id"],
                mls_mm=float(mls) if mls else None,
                hematoma_volume_mm3=float(row["hematoma_volume_mm3"]),
                max_shift_mm=float(row["max_shift_mm"]),
                mean_shift_mm=float(row["mean_shift_mm"]),
                sum_shift_mm=float(row["sum_shift_mm"]),
                surgery=_parse_bool(row["surgery"]),
                laterality=row["laterality"].strip(),
            ))
    return out
