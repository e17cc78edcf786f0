"""
Photometric loss terms and the weighted stage losses.

All images are float arrays of shape (H, W, 3) in [0, 1]. Every term has a
companion `*_grad` returning dL/d(first argument) with the same shape.
Computation runs in float64 regardless of the input precision.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Protocol

import numpy as np
from pydantic import BaseModel, Field

from src.losses.filters import (
    SSIM_WINDOW,
    filter_valid,
    filter_valid_adjoint,
    gaussian_window,
    pyramid_down,
    pyramid_down_adjoint,
)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class LossWeights(BaseModel):
    lambda_dssim: float = Field(default=0.2, ge=0.0)
    gamma_perceptual: float = Field(default=0.5, ge=0.0)


def as_image_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _pixel_mask(mask: Optional[np.ndarray], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {shape[:2]}")
    return mask


# --- L1 ---------------------------------------------------------------------

def l1_loss(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute difference; masked-out pixels are excluded from the denominator."""
    a, b = as_image_pair(img_a, img_b)
    m = _pixel_mask(mask, a.shape)
    count = np.count_nonzero(m) * a.shape[2]
    if count == 0:
        return 0.0
    return float(np.abs(a - b)[m].sum() / count)


def l1_loss_grad(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    a, b = as_image_pair(img_a, img_b)
    m = _pixel_mask(mask, a.shape)
    count = np.count_nonzero(m) * a.shape[2]
    grad = np.zeros_like(a)
    if count:
        grad[m] = np.sign(a - b)[m] / count
    return grad.reshape(np.shape(img_a))


# --- SSIM / D-SSIM ----------------------------------------------------------

@dataclass
class _SsimTerms:
    mu_a: np.ndarray
    mu_b: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    s: np.ndarray


def _check_window(a: np.ndarray) -> None:
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape[1]}x{a.shape[0]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> _SsimTerms:
    _check_window(a)
    window = gaussian_window()
    mu_a = filter_valid(a, window)
    mu_b = filter_valid(b, window)
    var_a = filter_valid(a * a, window) - mu_a * mu_a
    var_b = filter_valid(b * b, window) - mu_b * mu_b
    cov = filter_valid(a * b, window) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    return _SsimTerms(mu_a, mu_b, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


def _masked_ssim_inputs(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray]):
    """Outside the mask the first image is replaced by the second; weights select masked window centres."""
    _check_window(a)
    m = _pixel_mask(mask, a.shape)
    if mask is not None:
        a = np.where(m[..., None], a, b)
    r = SSIM_WINDOW // 2
    centres = m[r:a.shape[0] - r, r:a.shape[1] - r]
    count = np.count_nonzero(centres) * a.shape[2]
    weights = np.zeros(centres.shape + (a.shape[2],))
    if count:
        weights[centres] = 1.0 / count
    return a, m, weights


def structural_similarity(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean SSIM over the valid window positions, averaged over channels.

    With a mask, only windows centred on masked pixels count and unmasked
    pixels of the first image are taken from the second, so they cannot
    lower the score. A mask selecting no window centre scores 1.
    """
    a, b = as_image_pair(img_a, img_b)
    a, _, weights = _masked_ssim_inputs(a, b, mask)
    if not weights.any():
        return 1.0
    return float(np.sum(weights * _ssim_terms(a, b).s))


def structural_similarity_grad(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    a, b = as_image_pair(img_a, img_b)
    a, m, g = _masked_ssim_inputs(a, b, mask)
    t = _ssim_terms(a, b)
    d_mu = t.s * (2.0 * t.mu_b / t.a1 - 2.0 * t.mu_b / t.a2 - 2.0 * t.mu_a / t.b1 + 2.0 * t.mu_a / t.b2)
    d_eaa = -t.s / t.b2
    d_eab = 2.0 * t.s / t.a2
    window = gaussian_window()
    grad = (
        filter_valid_adjoint(g * d_mu, window)
        + 2.0 * a * filter_valid_adjoint(g * d_eaa, window)
        + b * filter_valid_adjoint(g * d_eab, window)
    )
    grad = np.where(m[..., None], grad, 0.0)
    return grad.reshape(np.shape(img_a))


def dssim_loss(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    return (1.0 - structural_similarity(img_a, img_b, mask)) / 2.0


def dssim_loss_grad(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    return -0.5 * structural_similarity_grad(img_a, img_b, mask)


# --- perceptual -------------------------------------------------------------

class PerceptualBackend(Protocol):
    def loss(self, img_a: np.ndarray, img_b: np.ndarray) -> float: ...

    def grad(self, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray: ...


class PyramidGradientLoss:
    """L1 distance between finite-difference gradients on a 3-level binomial pyramid."""

    def __init__(self, levels: int = 3):
        if levels < 1:
            raise ValueError("pyramid needs at least one level")
        self.levels = levels

    def _pyramid(self, diff: np.ndarray):
        levels = [diff]
        for _ in range(self.levels - 1):
            levels.append(pyramid_down(levels[-1]))
        return levels

    def loss(self, img_a: np.ndarray, img_b: np.ndarray) -> float:
        a, b = as_image_pair(img_a, img_b)
        total = 0.0
        for d in self._pyramid(a - b):
            gx = np.diff(d, axis=1)
            gy = np.diff(d, axis=0)
            terms = [np.abs(g).mean() for g in (gx, gy) if g.size]
            total += 0.5 * sum(terms)
        return float(total / self.levels)

    def grad(self, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
        a, b = as_image_pair(img_a, img_b)
        pyramid = self._pyramid(a - b)
        upstream = None
        for d in reversed(pyramid):
            g_d = np.zeros_like(d)
            for axis in (1, 0):
                diff = np.diff(d, axis=axis)
                if not diff.size:
                    continue
                g = np.sign(diff) * (0.5 / (diff.size * self.levels))
                head = [slice(None)] * 3
                tail = [slice(None)] * 3
                head[axis] = slice(1, None)
                tail[axis] = slice(None, -1)
                g_d[tuple(head)] += g
                g_d[tuple(tail)] -= g
            if upstream is not None:
                g_d += pyramid_down_adjoint(upstream, d.shape)
            upstream = g_d
        return upstream.reshape(np.shape(img_a))


PERCEPTUAL_BACKENDS: Dict[str, type] = {"pyramid": PyramidGradientLoss}
_default_backend = PyramidGradientLoss()


def perceptual_loss(img_a: np.ndarray, img_b: np.ndarray, backend: Optional[PerceptualBackend] = None) -> float:
    return (backend or _default_backend).loss(img_a, img_b)


def perceptual_loss_grad(img_a: np.ndarray, img_b: np.ndarray, backend: Optional[PerceptualBackend] = None) -> np.ndarray:
    return (backend or _default_backend).grad(img_a, img_b)


# --- stage losses -----------------------------------------------------------

@dataclass
class StageLoss:
    total: float
    l1: float
    dssim: float
    perc: float
    grad: np.ndarray  # dL/d(render)

    def record(self) -> Dict[str, float]:
        return {"loss": self.total, "l1": self.l1, "dssim": self.dssim, "perc": self.perc}


def _stage_loss(
    render: np.ndarray,
    target: np.ndarray,
    weights: LossWeights,
    use_perceptual: bool,
    mask: Optional[np.ndarray] = None,
    backend: Optional[PerceptualBackend] = None,
) -> StageLoss:
    l1 = l1_loss(render, target, mask)
    grad = l1_loss_grad(render, target, mask)
    dssim = dssim_loss(render, target, mask)
    if weights.lambda_dssim:
        grad = grad + weights.lambda_dssim * dssim_loss_grad(render, target, mask)
    total = l1 + weights.lambda_dssim * dssim
    perc = 0.0
    if use_perceptual:
        perc = perceptual_loss(render, target, backend)
        total += weights.gamma_perceptual * perc
        if weights.gamma_perceptual:
            grad = grad + weights.gamma_perceptual * perceptual_loss_grad(render, target, backend)
    return StageLoss(float(total), l1, dssim, perc, grad)


def loss_static(render: np.ndarray, target_masked: np.ndarray, weights: LossWeights, mask: Optional[np.ndarray] = None) -> StageLoss:
    """L_C = L1 + lambda * D-SSIM against the branch-masked target."""
    return _stage_loss(render, target_masked, weights, False, mask)


def loss_motion(render: np.ndarray, target_masked: np.ndarray, weights: LossWeights, mask: Optional[np.ndarray] = None) -> StageLoss:
    """L_D, same form as L_C on the deformed render."""
    return _stage_loss(render, target_masked, weights, False, mask)


def loss_finetune(
    fused: np.ndarray, target: np.ndarray, weights: LossWeights, backend: Optional[PerceptualBackend] = None
) -> StageLoss:
    """L_F = L1 + lambda * D-SSIM + gamma * perceptual on the full frame."""
    return _stage_loss(fused, target, weights, True, None, backend)


def combine_terms(l1: float, dssim: float, perc: float, weights: LossWeights) -> float:
    return l1 + weights.lambda_dssim * dssim + weights.gamma_perceptual * perc
