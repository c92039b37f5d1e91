"""Pseudo-healthy synthesis by direct optimization of a stationary velocity field.

The velocity lives on a coarse control grid and is optimized with Adam against
the weighted sum of seven terms: two intensity-symmetry terms on the warped
CT, ventricle mirror overlap, remaining hematoma mass, skull preservation, a
Jacobian target and a smoothness penalty on the velocity. Gradients come from
reverse-mode autodiff through warping, scaling and squaring and every term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .diffeo import (DEFAULT_CONTROL_FACTOR, DEFAULT_STEPS, VelocityField, control_dims,
                     control_displacement_t, gradient_loss_t, jacobian_loss_t)
from .metrics import MetricsConfig, soft_dice, symmetry_terms
from .fileio import atomic_write
from .volume import (MASK_CLASSES, GridMismatchError, MaskVolume, ScalarVolume, VectorField, flip_tensor,
                     identity_grid, to_tensor, warp_tensor)

log = logging.getLogger(__name__)

TERMS = ("jeffrey", "ssim", "ventricle", "hematoma", "skull", "jacobian", "gradient")
SKULL_THRESHOLD = 300.0


@dataclass(frozen=True)
class LossWeights:
    jeffrey: float = 1.0
    ssim: float = 1.0
    ventricle: float = 1.0
    hematoma: float = 1.0
    skull: float = 5.0
    jacobian: float = 5.0
    gradient: float = 5.0

    def __post_init__(self):
        vals = [getattr(self, t) for t in TERMS]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("loss weights must be finite and >= 0")

    def as_dict(self) -> Dict[str, float]:
        return {t: float(getattr(self, t)) for t in TERMS}

    @classmethod
    def only(cls, term: str, value: float = 1.0) -> "LossWeights":
        return cls(**{t: (value if t == term else 0.0) for t in TERMS})


@dataclass(frozen=True)
class SynthConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 2000
    lr: float = 0.05
    n_steps: int = DEFAULT_STEPS
    control_factor: int = DEFAULT_CONTROL_FACTOR
    # stop once the best loss has improved by less than ``tol`` over the last
    # ``patience`` iterations (patience 0 runs every iteration)
    patience: int = 50
    tol: float = 1e-3
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.n_steps < 1 or self.control_factor < 1:
            raise ValueError("n_steps and control_factor must be >= 1")
        if self.patience < 0 or self.tol < 0:
            raise ValueError("patience and tol must be >= 0")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class EmptyMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# single terms


def ventricle_loss(warped_left, warped_right) -> torch.Tensor:
    """1 - Dice(left ventricle, mirrored right ventricle), both already warped."""
    wl, wr = to_tensor(warped_left) if not torch.is_tensor(warped_left) else warped_left, \
        to_tensor(warped_right) if not torch.is_tensor(warped_right) else warped_right
    if wl.detach().sum() <= 0 or wr.detach().sum() <= 0:
        raise EmptyMaskError("a ventricle channel is empty")
    return 1.0 - soft_dice(wl, flip_tensor(wr))


def hematoma_loss(original, warped) -> torch.Tensor:
    """Fraction of hematoma mass that survives the warp (1 = untouched)."""
    o = original if torch.is_tensor(original) else to_tensor(original)
    w = warped if torch.is_tensor(warped) else to_tensor(warped)
    total = o.sum()
    if total.detach() <= 0:
        raise EmptyMaskError("hematoma mask is empty; the hematoma term is undefined")
    return 1.0 - (total - w.sum()) / total


def skull_loss(original, warped) -> torch.Tensor:
    o = original if torch.is_tensor(original) else to_tensor(original)
    w = warped if torch.is_tensor(warped) else to_tensor(warped)
    if o.detach().sum() <= 0:
        raise EmptyMaskError("skull mask is empty")
    return 1.0 - soft_dice(o, w)


# ---------------------------------------------------------------------------
# compound objective


class Problem:
    """Fixed inputs of one synthesis run as tensors, plus the compound loss."""

    def __init__(self, vol: ScalarVolume, masks: MaskVolume, cfg: SynthConfig, dtype=torch.float64):
        if vol.dims != masks.dims:
            raise GridMismatchError(f"volume {vol.dims} vs masks {masks.dims}")
        self.cfg = cfg
        self.dims = vol.dims
        self.spacing = vol.spacing
        self.dtype = dtype
        self.x = to_tensor(vol.data, dtype)
        self.raw_masks = masks
        m = {c: to_tensor(masks.channel(c), dtype) for c in MASK_CLASSES}
        if float(m["skull"].sum()) <= 0:
            m["skull"] = (self.x > SKULL_THRESHOLD).to(dtype)
        self.masks = m
        self.has_hematoma = float(m["hematoma"].sum()) > 0
        # symmetry is scored inside the skull cavity: brain plus blood
        self.sym_weight = (m["brain"] + m["hematoma"]).clamp(0.0, 1.0)
        self.stack = torch.stack([self.x, m["skull"], m["hematoma"], m["ventricle_left"], m["ventricle_right"]])
        self.grid = identity_grid(self.dims, dtype)
        self.ctrl_dims = control_dims(self.dims, cfg.control_factor)
        self.ctrl_grid = identity_grid(self.ctrl_dims, dtype)
        self._need = set(t for t in TERMS if getattr(cfg.weights, t) > 0)
        if not self.has_hematoma:
            self._need.discard("hematoma")

    def displacement(self, v_ctrl: torch.Tensor) -> torch.Tensor:
        return control_displacement_t(v_ctrl, self.dims, self.cfg.control_factor, self.cfg.n_steps,
                                      self.ctrl_grid)

    def terms(self, v_ctrl: torch.Tensor, all_terms: bool = True) -> Dict[str, torch.Tensor]:
        need = set(TERMS) if all_terms else self._need
        u = self.displacement(v_ctrl)
        warped = warp_tensor(self.stack, u, self.grid)
        px, pskull, phem, pvl, pvr = warped.unbind(0)
        out: Dict[str, torch.Tensor] = {}
        zero = v_ctrl.new_zeros(())
        if need & {"jeffrey", "ssim"}:
            out["jeffrey"], out["ssim"] = symmetry_terms(px, self.cfg.metrics, self.sym_weight)
        out["ventricle"] = ventricle_loss(pvl, pvr) if "ventricle" in need else zero
        out["hematoma"] = hematoma_loss(self.masks["hematoma"], phem) if (
            "hematoma" in need and self.has_hematoma) else zero
        out["skull"] = skull_loss(self.masks["skull"], pskull) if "skull" in need else zero
        if "jacobian" in need:
            # scored on the forward map exp(-v), where the hematoma mask lives
            out["jacobian"] = jacobian_loss_t(self.displacement(-v_ctrl), self.masks["hematoma"])
        else:
            out["jacobian"] = zero
        out["gradient"] = gradient_loss_t(v_ctrl) if "gradient" in need else zero
        for t in TERMS:
            out.setdefault(t, zero)
        return out

    def weighted(self, terms: Dict[str, torch.Tensor]) -> torch.Tensor:
        w = self.cfg.weights
        total = terms["jeffrey"].new_zeros(())
        for t in TERMS:
            lam = getattr(w, t)
            if t == "hematoma" and not self.has_hematoma:
                continue
            if lam > 0:
                total = total + lam * terms[t]
        return total

    def loss(self, v_ctrl: torch.Tensor, all_terms: bool = False):
        terms = self.terms(v_ctrl, all_terms)
        total = self.weighted(terms)
        if not torch.isfinite(total):
            bad = [t for t, v in terms.items() if not torch.isfinite(v)]
            raise DivergenceError(f"non-finite compound loss (terms: {', '.join(bad) or 'weighted sum'})")
        return total, terms


def compound_loss(vol: ScalarVolume, masks: MaskVolume, v: VelocityField,
                  weights: LossWeights = LossWeights(), cfg: Optional[SynthConfig] = None):
    """(total, per-term values) for a velocity on the control grid."""
    cfg = replace(cfg or SynthConfig(), weights=weights, control_factor=v.factor)
    prob = Problem(vol, masks, cfg)
    with torch.no_grad():
        total, terms = prob.loss(to_tensor(v.data), all_terms=True)
    return float(total), {t: float(x) for t, x in terms.items()}


# ---------------------------------------------------------------------------
# optimization


@dataclass
class SynthesisResult:
    velocity: VelocityField
    deformation: VectorField
    pseudo_healthy: ScalarVolume
    warped_masks: MaskVolume
    trace: List[Dict[str, float]]
    hematoma_reduction: Optional[float]
    best_iteration: int

    @property
    def iterations_run(self) -> int:
        return len(self.trace)


def _row(it: int, total: torch.Tensor, terms: Dict[str, torch.Tensor]) -> Dict[str, float]:
    row = {"iter": it, "total": float(total.detach())}
    row.update({t: float(terms[t].detach()) for t in TERMS})
    return row


def optimize_velocity(vol: ScalarVolume, masks: MaskVolume, weights: Optional[LossWeights] = None,
                      cfg: Optional[SynthConfig] = None,
                      callback: Optional[Callable[[Dict[str, float]], None]] = None) -> SynthesisResult:
    """Adam on the control-grid velocity from zero; returns the best iterate."""
    cfg = cfg or SynthConfig()
    if weights is not None:
        cfg = replace(cfg, weights=weights)
    if not any(v > 0 for v in cfg.weights.as_dict().values()):
        raise ValueError("at least one loss weight must be > 0")
    prob = Problem(vol, masks, cfg)
    v = torch.zeros(3, *prob.ctrl_dims, dtype=prob.dtype, requires_grad=True)
    opt = torch.optim.Adam([v], lr=cfg.lr)
    trace: List[Dict[str, float]] = []
    best_loss, best_v, best_it = math.inf, v.detach().clone(), 0
    history: List[float] = []
    for it in range(cfg.iterations):
        opt.zero_grad()
        try:
            total, terms = prob.loss(v)
        except DivergenceError as err:
            raise DivergenceError(f"iteration {it}: {err}", trace) from None
        row = _row(it, total, terms)
        trace.append(row)
        if callback is not None:
            callback(row)
        if row["total"] < best_loss:
            best_loss, best_v, best_it = row["total"], v.detach().clone(), it
        history.append(best_loss)
        if cfg.patience and it >= cfg.patience and history[it - cfg.patience] - best_loss < cfg.tol:
            log.info("synthesis converged at iteration %d", it)
            break
        if total.requires_grad:
            total.backward()
            opt.step()
    return _result(prob, best_v, trace, best_it)


def _result(prob: Problem, v_best: torch.Tensor, trace, best_it: int) -> SynthesisResult:
    with torch.no_grad():
        u = prob.displacement(v_best) if torch.any(v_best) else torch.zeros(3, *prob.dims, dtype=prob.dtype)
        warped = warp_tensor(prob.x[None], u, prob.grid)[0]
        mask_stack = torch.stack([to_tensor(prob.raw_masks.channel(c), prob.dtype) for c in MASK_CLASSES])
        wm = warp_tensor(mask_stack, u, prob.grid).clamp(0.0, 1.0)
    reduction = None
    if prob.has_hematoma:
        hem = prob.masks["hematoma"]
        hw = warp_tensor(hem[None], u, prob.grid)[0] if torch.any(v_best) else hem
        reduction = float(1.0 - hematoma_loss(hem, hw))
    sp = prob.spacing
    return SynthesisResult(
        velocity=VelocityField(v_best.numpy(), prob.dims, prob.cfg.control_factor, sp),
        deformation=VectorField(u.numpy(), sp),
        pseudo_healthy=ScalarVolume(warped.numpy(), sp),
        warped_masks=MaskVolume(wm.numpy(), sp),
        trace=trace,
        hematoma_reduction=reduction,
        best_iteration=best_it,
    )


def gradient_check(vol: ScalarVolume, masks: MaskVolume, weights: LossWeights, v: VelocityField,
                   samples: int = 100, step: float = 1e-3, seed: int = 0,
                   metrics: Optional[MetricsConfig] = None) -> float:
    """Max relative error of the adjoint gradient against central differences.

    Coordinates are drawn uniformly over the control grid (component and
    node). The denominator is max(|adjoint|, 1e-6).
    """
    cfg = SynthConfig(weights=weights, control_factor=v.factor, metrics=metrics or MetricsConfig())
    prob = Problem(vol, masks, cfg)
    base = to_tensor(v.data, prob.dtype)
    vt = base.clone().requires_grad_(True)
    total, _ = prob.loss(vt)
    if total.requires_grad:
        (grad,) = torch.autograd.grad(total, vt)
    else:
        grad = torch.zeros_like(base)
    rng = np.random.default_rng(seed)
    flat = rng.choice(base.numel(), size=min(samples, base.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for i in flat:
            idx = np.unravel_index(i, base.shape)
            plus, minus = base.clone(), base.clone()
            plus[idx] += step
            minus[idx] -= step
            fd = (float(prob.loss(plus)[0]) - float(prob.loss(minus)[0])) / (2 * step)
            g = float(grad[idx])
            worst = max(worst, abs(g - fd) / max(abs(g), 1e-6))
    return worst


TRACE_COLUMNS = ("iter", "total") + TERMS


def trace_to_csv(trace: List[Dict[str, float]]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join(str(int(row["iter"])) if c == "iter" else repr(float(row[c])) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"


def write_trace(path, trace: List[Dict[str, float]]) -> None:
    atomic_write(path, trace_to_csv(trace))
