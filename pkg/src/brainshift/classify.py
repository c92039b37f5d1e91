"""Logistic-regression surgery classifiers, ROC analysis and stratified cross-validation."""

from __future__ import annotations

import logging
import math
from xml.sax.saxutils import escape
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .biomarkers import BiomarkerRecord
from .fileio import atomic_write

log = logging.getLogger(__name__)

FEATURES = ("mls_mm", "hematoma_volume_mm3", "max_shift_mm", "mean_shift_mm", "sum_shift_mm")
FEATURE_SETS: Dict[str, Tuple[str, ...]] = {
    "mls": ("mls_mm",),
    "volume": ("hematoma_volume_mm3",),
    "max_shift": ("max_shift_mm",),
    "mean_shift": ("mean_shift_mm",),
    "sum_shift": ("sum_shift_mm",),
    "conventional": ("mls_mm", "hematoma_volume_mm3"),
    "deformation": ("max_shift_mm", "mean_shift_mm", "sum_shift_mm"),
    "joint": FEATURES,
}
SUBGROUPS = ("all", "bilateral", "unilateral")


class ClassificationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True)
class LogisticModel:
    features: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    intercept: float
    iterations: int

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return ((X - self.mean) / self.std) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def score_records(self, records: Sequence[BiomarkerRecord]) -> np.ndarray:
        return self.decision_function(feature_matrix(records, self.features))


def _nll(beta: np.ndarray, Z: np.ndarray, y: np.ndarray, l2: float) -> float:
    eta = Z @ beta
    # log(1 + e^eta) - y*eta, stable for large |eta|
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + 0.5 * l2 * beta[1:] @ beta[1:])


def logistic_fit(X, y, features: Optional[Sequence[str]] = None, l2: float = 1e-4, tol: float = 1e-8,
                 max_iter: int = 100) -> LogisticModel:
    """Penalized logistic regression by iteratively reweighted least squares.

    Minimizes the mean negative log-likelihood plus ``l2/2 * |w|^2`` on
    standardized features; the intercept is not penalized. Newton steps are
    halved until the objective decreases.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise ClassificationError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ClassificationError("features and labels must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ClassificationError("labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos < 2 or len(y) - n_pos < 2:
        raise ClassificationError("need at least 2 records of each class")
    names = tuple(features) if features is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    if np.any(std <= 0):
        bad = [names[i] for i in np.flatnonzero(std <= 0)]
        raise ClassificationError(f"constant feature(s) cannot be standardized: {bad}")
    Z = np.hstack([np.ones((len(y), 1)), (X - mean) / std])
    n, d = Z.shape
    pen = np.full(d, l2)
    pen[0] = 0.0
    beta = np.zeros(d)
    obj = _nll(beta, Z, y, l2)
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(Z @ beta)))
        grad = Z.T @ (p - y) / n + pen * beta
        H = (Z * (p * (1 - p))[:, None]).T @ Z / n + np.diag(pen)
        step = np.linalg.solve(H + 1e-12 * np.eye(d), grad)
        t = 1.0
        while True:
            cand = beta - t * step
            new = _nll(cand, Z, y, l2)
            if new <= obj or t < 1e-10:
                break
            t /= 2
        beta, obj = cand, new
        if np.max(np.abs(t * step)) < tol:
            break
    if not np.all(np.isfinite(beta)):
        raise ClassificationError("logistic fit produced non-finite weights")
    return LogisticModel(names, mean, std, beta[1:].copy(), float(beta[0]), it)


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC with one point per distinct score (ties grouped) and trapezoidal AUC."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ClassificationError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ClassificationError("scores must be finite")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ClassificationError("ROC needs both classes")
    thr, inv = np.unique(-s, return_inverse=True)
    tp = np.cumsum(np.bincount(inv, weights=y, minlength=len(thr)))
    fp = np.cumsum(np.bincount(inv, weights=~y, minlength=len(thr)))
    tpr = np.concatenate([[0.0], tp / P])
    fpr = np.concatenate([[0.0], fp / N])
    # integer trapezoid sum keeps the pairwise identity exact
    tp_i = np.concatenate([[0], tp.round().astype(np.int64)])
    fp_i = np.concatenate([[0], fp.round().astype(np.int64)])
    twice = int(np.sum((fp_i[1:] - fp_i[:-1]) * (tp_i[1:] + tp_i[:-1])))
    return RocCurve(fpr, tpr, np.concatenate([[math.inf], -thr]), twice / (2.0 * P * N))


# ---------------------------------------------------------------------------
# cross-validation


def feature_matrix(records: Sequence[BiomarkerRecord], features: Sequence[str]) -> np.ndarray:
    rows = []
    for r in records:
        vals = [r.feature(f) for f in features]
        if any(v is None for v in vals):
            raise ClassificationError(f"{r.id}: missing feature among {tuple(features)}")
        rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(len(records), len(features))


def usable(records: Sequence[BiomarkerRecord], features: Sequence[str]) -> List[BiomarkerRecord]:
    """Records with every feature present (missing MLS drops a record from MLS sets only)."""
    return [r for r in records if all(r.feature(f) is not None for f in features)]


@dataclass
class FoldResult:
    feature_set: str
    subgroup: str
    fold_aucs: List[float]
    scores: np.ndarray
    labels: np.ndarray

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_aucs))

    @property
    def pooled(self) -> RocCurve:
        return roc_auc(self.scores, self.labels)


def stratified_folds(labels, k: int, seed: int) -> List[np.ndarray]:
    y = np.asarray(labels).astype(int)
    counts = np.bincount(y, minlength=2)
    if len(counts) != 2 or counts.min() < k:
        raise ClassificationError(f"stratified {k}-fold needs >= {k} records per class, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [test for _, test in skf.split(np.zeros(len(y)), y)]


def cross_validate(records: Sequence[BiomarkerRecord], feature_sets: Mapping[str, Sequence[str]] = FEATURE_SETS,
                   k: int = 5, seed: int = 0, subgroup: str = "all") -> Dict[str, FoldResult]:
    """Stratified k-fold AUC of a logistic model per feature set."""
    out: Dict[str, FoldResult] = {}
    for name, feats in feature_sets.items():
        recs = usable(records, feats)
        y = np.array([int(r.surgery) for r in recs])
        X = feature_matrix(recs, feats)
        folds = stratified_folds(y, k, seed)
        scores = np.zeros(len(recs))
        aucs = []
        for test in folds:
            train = np.setdiff1d(np.arange(len(recs)), test)
            model = logistic_fit(X[train], y[train], feats)
            scores[test] = model.decision_function(X[test])
            aucs.append(roc_auc(scores[test], y[test]).auc)
        out[name] = FoldResult(name, subgroup, aucs, scores, y)
    return out


def subgroup_records(records: Sequence[BiomarkerRecord], subgroup: str) -> List[BiomarkerRecord]:
    if subgroup == "all":
        return list(records)
    if subgroup not in SUBGROUPS:
        raise ValueError(f"unknown subgroup {subgroup!r}")
    return [r for r in records if r.laterality == subgroup]


@dataclass
class Report:
    results: List[FoldResult] = field(default_factory=list)
    skipped: List[Tuple[str, str, str]] = field(default_factory=list)

    def get(self, feature_set: str, subgroup: str = "all") -> FoldResult:
        for r in self.results:
            if r.feature_set == feature_set and r.subgroup == subgroup:
                return r
        raise KeyError((feature_set, subgroup))


def evaluate(records: Sequence[BiomarkerRecord], feature_sets: Mapping[str, Sequence[str]] = FEATURE_SETS,
             k: int = 5, seed: int = 0, subgroups: Sequence[str] = SUBGROUPS) -> Report:
    """Cross-validate every feature set within each laterality subgroup.

    Each subgroup is cross-validated on its own records. A subgroup or
    feature set too small to stratify is skipped and listed in the report;
    the ``all`` group must succeed.
    """
    report = Report()
    for sg in subgroups:
        recs = subgroup_records(records, sg)
        for name, feats in feature_sets.items():
            try:
                res = cross_validate(recs, {name: feats}, k, seed, sg)
            except ClassificationError as err:
                if sg == "all":
                    raise
                log.warning("skipping %s/%s: %s", name, sg, err)
                report.skipped.append((name, sg, str(err)))
                continue
            report.results.extend(res.values())
    return report


# ---------------------------------------------------------------------------
# report files


def auc_report_csv(report: Report) -> str:
    lines = ["feature_set,subgroup,fold,auc"]
    for r in report.results:
        for i, auc in enumerate(r.fold_aucs):
            lines.append(f"{r.feature_set},{r.subgroup},{i},{auc!r}")
        lines.append(f"{r.feature_set},{r.subgroup},mean,{r.mean_auc!r}")
        lines.append(f"{r.feature_set},{r.subgroup},pooled,{r.pooled.auc!r}")
    return "\n".join(lines) + "\n"


def roc_points_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{t!r},{f!r},{p!r}")
    return "\n".join(lines) + "\n"


PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def roc_svg(curves: Mapping[str, RocCurve], title: str, size: int = 360) -> str:
    """A plain SVG of ROC curves; deterministic text output."""
    pad = 40
    inner = size - 2 * pad

    def xy(f, t):
        return f"{pad + f * inner:.2f},{pad + (1 - t) * inner:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}">',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="#bbbbbb" stroke-dasharray="4"/>',
             f'<text x="{size / 2:.1f}" y="{pad / 2:.1f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="12">false positive rate</text>',
             f'<text x="12" y="{size / 2:.1f}" transform="rotate(-90 12 {size / 2:.1f})" text-anchor="middle" '
             f'font-size="12">true positive rate</text>']
    for i, (name, c) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(xy(f, t) for f, t in zip(c.fpr, c.tpr))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{pad}" y="{size + 14 + 20 * i}" font-size="12" fill="{color}">'
                     f'{escape(name)} (AUC {c.auc:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(report: Report, out_dir) -> List[Path]:
    """auc_report.csv, one ROC point CSV per (set, subgroup), one SVG per subgroup."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "auc_report.csv"]
    atomic_write(written[0], auc_report_csv(report))
    for sg in SUBGROUPS:
        curves = {r.feature_set: r.pooled for r in report.results if r.subgroup == sg}
        if not curves:
            continue
        for name, c in curves.items():
            p = out / f"roc_{sg}_{name}.csv"
            atomic_write(p, roc_points_csv(c))
            written.append(p)
        p = out / f"roc_{sg}.svg"
        atomic_write(p, roc_svg(curves, f"ROC ({sg})"))
        written.append(p)
    return written
