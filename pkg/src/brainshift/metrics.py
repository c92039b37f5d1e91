"""Differentiable symmetry and overlap losses.

Every loss returns a 0-d ``torch.Tensor`` that carries autograd history when
its inputs do. The tensor kernels (``*_t``) accept leading batch dimensions
``(..., nx, ny, nz)`` and return one value per batch entry; rigid alignment
evaluates its finite-difference probes that way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from .volume import GridMismatchError, ScalarVolume, flip_tensor, halves_tensor

HIST_EPS = 1e-8
DICE_EPS = 1e-8


@dataclass(frozen=True)
class MetricsConfig:
    n_bins: int = 64
    range: Tuple[float, float] = (-100.0, 200.0)
    ssim_window: int = 7
    volume_threshold: float = -200.0
    volume_sharpness: float = 10.0

    def __post_init__(self):
        lo, hi = self.range
        if not hi > lo:
            raise ValueError(f"histogram range must satisfy hi > lo, got {self.range}")
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")
        if self.ssim_window < 1:
            raise ValueError("ssim_window must be positive")
        if self.volume_sharpness <= 0:
            raise ValueError("volume_sharpness must be positive")
        object.__setattr__(self, "range", (float(lo), float(hi)))

    @property
    def intensity_range(self) -> float:
        return self.range[1] - self.range[0]


class EmptySupportError(ValueError):
    """A histogram, mask or foreground has no mass to work with."""


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, ScalarVolume):
        x = x.data
    return torch.from_numpy(np.array(x, dtype=np.float64)).to(dtype)


# ---------------------------------------------------------------------------
# soft histogram


@dataclass(frozen=True)
class SoftHistogram:
    counts: torch.Tensor
    range: Tuple[float, float]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[-1]

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.range[0], self.range[1], self.n_bins)


def soft_histogram_t(x: torch.Tensor, weights: Optional[torch.Tensor], n_bins: int,
                     lo: float, hi: float, batch_dims: int = 0) -> torch.Tensor:
    """Normalized triangular-kernel histogram.

    Bin centres sit at ``linspace(lo, hi, n_bins)``; each value splits its
    weight linearly between the two neighbouring centres. Values outside the
    range are clamped onto the end bins.
    """
    batch = x.shape[:batch_dims]
    xs = x.reshape(*batch, -1)
    w = torch.ones_like(xs) if weights is None else torch.broadcast_to(weights, x.shape).reshape(*batch, -1)
    pos = (xs.clamp(lo, hi) - lo) * ((n_bins - 1) / (hi - lo))
    i0 = pos.detach().floor().clamp(max=n_bins - 2).long()
    frac = pos - i0
    counts = torch.zeros(*batch, n_bins, dtype=xs.dtype)
    counts = counts.scatter_add(-1, i0, w * (1 - frac)).scatter_add(-1, i0 + 1, w * frac)
    total = counts.sum(-1, keepdim=True)
    if torch.any(total.detach() <= 0):
        raise EmptySupportError("histogram has no mass (all weights zero)")
    counts = counts / total + HIST_EPS
    return counts / counts.sum(-1, keepdim=True)


def soft_histogram(vol, mask=None, n_bins: int = 64, range: Sequence[float] = (-100.0, 200.0)) -> SoftHistogram:
    lo, hi = float(range[0]), float(range[1])
    if not hi > lo or n_bins < 2:
        raise ValueError("need hi > lo and n_bins >= 2")
    x = as_tensor(vol)
    w = None
    if mask is not None:
        w = as_tensor(mask)
        if w.shape != x.shape:
            raise GridMismatchError(f"mask {tuple(w.shape)} vs volume {tuple(x.shape)}")
    return SoftHistogram(soft_histogram_t(x, w, n_bins, lo, hi), (lo, hi))


# ---------------------------------------------------------------------------
# Jeffreys divergence


def jeffreys_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Symmetric KL between probability vectors along the last axis."""
    p, q = as_tensor(p), as_tensor(q)
    return ((p - q) * (torch.log(p) - torch.log(q))).sum(-1)


def jeffreys_t(left, right, n_bins, lo, hi, wl=None, wr=None, batch_dims=0):
    hl = soft_histogram_t(left, wl, n_bins, lo, hi, batch_dims)
    hr = soft_histogram_t(right, wr, n_bins, lo, hi, batch_dims)
    return jeffreys_divergence(hl, hr)


def jeffreys_loss(left, right, n_bins: int = 64, range: Sequence[float] = (-100.0, 200.0),
                  masks: Optional[Tuple] = None) -> torch.Tensor:
    l, r = as_tensor(left), as_tensor(right)
    if l.numel() == 0 or r.numel() == 0:
        raise EmptySupportError("empty half")
    wl = wr = None
    if masks is not None:
        wl, wr = as_tensor(masks[0]), as_tensor(masks[1])
    return jeffreys_t(l, r, n_bins, float(range[0]), float(range[1]), wl, wr)


# ---------------------------------------------------------------------------
# SSIM


def box_mean(t: torch.Tensor, k: int, dim: int) -> torch.Tensor:
    """Mean over every length-``k`` window along ``dim`` (valid positions only)."""
    return t.unfold(dim, k, 1).mean(-1)


def ssim_t(a: torch.Tensor, b: torch.Tensor, data_range: float, window: int = 7) -> torch.Tensor:
    """Mean SSIM over all valid uniform windows (window clipped to the grid)."""
    if a.shape != b.shape:
        raise GridMismatchError(f"SSIM inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    dims = a.shape[-3:]
    stack = torch.stack([a, b, a * a, b * b, a * b], dim=0)
    for axis in range(3):
        stack = box_mean(stack, min(window, dims[axis]), stack.dim() - 3 + axis)
    mu_a, mu_b, e_aa, e_bb, e_ab = stack.unbind(0)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean(dim=(-3, -2, -1))


def ssim_loss(left, right, data_range: float = 300.0, window: int = 7) -> torch.Tensor:
    """Negative SSIM between the left half and the mirrored right half."""
    l, r = as_tensor(left), as_tensor(right)
    if l.shape != r.shape:
        raise GridMismatchError(f"halves differ: {tuple(l.shape)} vs {tuple(r.shape)}")
    return -ssim_t(l, flip_tensor(r), data_range, window)


# ---------------------------------------------------------------------------
# foreground balance and overlap


def volume_balance_t(x: torch.Tensor, threshold: float, sharpness: float) -> torch.Tensor:
    fg = torch.sigmoid((x - threshold) / sharpness)
    left, right = halves_tensor(fg)
    total = fg.sum(dim=(-3, -2, -1))
    if torch.any(total.detach() < 1e-6):
        raise EmptySupportError("no foreground above the binarization threshold")
    return (left.sum(dim=(-3, -2, -1)) - right.sum(dim=(-3, -2, -1))).abs() / total


def volume_balance_loss(vol, threshold: float = -200.0, sharpness: float = 10.0) -> torch.Tensor:
    return volume_balance_t(as_tensor(vol), threshold, sharpness)


def soft_dice(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise GridMismatchError(f"masks differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return 2 * (a * b).sum() / ((a * a).sum() + (b * b).sum() + DICE_EPS)


def symmetry_terms(x: torch.Tensor, cfg: MetricsConfig, weights: Optional[torch.Tensor] = None,
                   batch_dims: int = 0):
    """(jeffreys, ssim) of a volume's two halves, optionally mask-weighted.

    With ``weights`` the volume is multiplied by the mask before SSIM and the
    mask weights the histogram entries.
    """
    lo, hi = cfg.range
    xl, xr = halves_tensor(x)
    if weights is None:
        jeff = jeffreys_t(xl, xr, cfg.n_bins, lo, hi, batch_dims=batch_dims)
        ssim = -ssim_t(xl, flip_tensor(xr), cfg.intensity_range, cfg.ssim_window)
    else:
        wl, wr = halves_tensor(weights)
        jeff = jeffreys_t(xl, xr, cfg.n_bins, lo, hi, wl, wr, batch_dims=batch_dims)
        ml, mr = xl * wl, xr * wr
        ssim = -ssim_t(ml, flip_tensor(mr), cfg.intensity_range, cfg.ssim_window)
    return jeff, ssim
