"""
Real spherical-harmonic colour decoding (degrees 0-3) with analytic derivatives.

Coefficients are stored per primitive as an array of shape (..., K, 3) with
K = (degree + 1) ** 2, one RGB triple per basis function.
"""
from typing import Tuple

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def num_sh_bases(degree: int) -> int:
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions. Returns (..., K)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    bases = [np.full_like(x, SH_C0)]
    if degree > 0:
        bases += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        bases += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        bases += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(bases, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of every basis polynomial w.r.t. (x, y, z). Returns (..., K, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree > 0:
        rows += [
            (zero, zero - SH_C1, zero),
            (zero, zero, zero + SH_C1),
            (zero - SH_C1, zero, zero),
        ]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero),
        ]
    if degree > 2:
        rows += [
            (SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (SH_C3[2] * -2.0 * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), SH_C3[2] * 8.0 * y * z),
            (SH_C3[3] * -6.0 * x * z, SH_C3[3] * -6.0 * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            (SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), SH_C3[4] * -2.0 * x * y, SH_C3[4] * 8.0 * x * z),
            (SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * -6.0 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_coefficients(sh: np.ndarray, degree: int) -> None:
    expected = num_sh_bases(degree)
    if sh.shape[-2:] != (expected, 3):
        raise ValueError(
            f"SH coefficients of shape {sh.shape} do not match degree {degree} "
            f"(expected (..., {expected}, 3), Z={3 * expected})"
        )


def eval_sh(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Unclamped SH evaluation, (..., K, 3) x (..., 3) -> (..., 3)."""
    _check_coefficients(sh, degree)
    basis = sh_basis(dirs, degree).astype(sh.dtype, copy=False)
    return np.einsum("...k,...kc->...c", basis, sh)


def sh_to_color(sh: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Decoded colour c = max(0, sum_k Y_k(d) f_k) per channel."""
    view_dir = np.asarray(view_dir)
    norms = np.linalg.norm(view_dir, axis=-1)
    if not np.all(np.abs(norms - 1.0) < 1e-6):
        raise ValueError("view_dir must be unit length")
    return np.maximum(eval_sh(sh, view_dir, degree), 0.0)


def sh_to_color_backward(
    sh: np.ndarray, dirs: np.ndarray, degree: int, grad_color: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the clamped colour w.r.t. coefficients and the (unit) direction."""
    basis = sh_basis(dirs, degree).astype(sh.dtype, copy=False)
    raw = np.einsum("...k,...kc->...c", basis, sh)
    grad_raw = np.where(raw > 0.0, grad_color, 0.0)
    grad_sh = basis[..., :, None] * grad_raw[..., None, :]
    # dL/dY_k = sum_c f_kc * dL/dc_c
    grad_basis = np.einsum("...kc,...c->...k", sh, grad_raw)
    grad_dirs = np.einsum("...k,...kj->...j", grad_basis, sh_basis_jacobian(dirs, degree))
    return grad_sh, grad_dirs


def rgb_to_sh(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb) / SH_C0
