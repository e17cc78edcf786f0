"""
Analytic gradients of the tile compositor.

For a pixel with upstream gradients gC (RGB) and gA, and u_k = gC . c_k + gA,

    dL/da_i = T_i u_i - (sum_{k>i} u_k w_k) / (1 - a_i)

for every composited contribution. Gradients then flow through the 2D
Gaussian (conic, mean), the EWA projection, the covariance factorisation
and the SH colour decoder. Per-tile partial sums are merged in tile order.
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from src.core.gaussians import (
    normalize_quaternion,
    normalize_quaternion_backward,
    quaternion_to_rotation_backward,
    scale_activation_grad,
)
from src.core.sh import sh_to_color_backward
from src.rasterizer.forward import (
    RenderOutput,
    TileBin,
    _for_each_tile,
    composite_weights,
    splat_alpha,
    tile_pixels,
)
from src.rasterizer.projection import ProjectionBatch
from src.rasterizer.settings import RasterSettings


@dataclass
class RasterGradients:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    colors: Optional[np.ndarray]  # only when a colour override was rendered
    means2d: np.ndarray           # NDC-scaled screen-space gradient, densification statistic
    visible: np.ndarray           # primitives that reached at least one tile

    def parameters(self) -> Dict[str, np.ndarray]:
        return {
            "means": self.means,
            "scales": self.scales,
            "rotations": self.rotations,
            "opacities": self.opacities,
            "sh": self.sh,
        }


def _tile_backward(
    tile: TileBin,
    batch: ProjectionBatch,
    settings: RasterSettings,
    grad_color: np.ndarray,
    grad_alpha: np.ndarray,
):
    rows = tile.contributors
    px, py = tile_pixels(tile, batch.means2d.dtype)
    conics = batch.conics[rows]
    opac = batch.opacities[rows]
    colors = batch.colors[rows]
    alpha, dx, dy = splat_alpha(px, py, batch.means2d[rows], conics, opac, settings.alpha_skip)
    weights, t_before, included = composite_weights(alpha, settings)

    g_c = grad_color[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)
    g_a = grad_alpha[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 1)

    u = g_c @ colors.T + g_a
    uw = u * weights
    behind = uw.sum(axis=1, keepdims=True) - np.cumsum(uw, axis=1)
    one_minus = 1.0 - alpha
    safe = one_minus > 1e-12
    g_alpha = np.where(included, t_before * u, 0.0) - np.where(
        safe, behind / np.where(safe, one_minus, 1.0), 0.0
    )
    g_alpha = np.where(alpha > 0.0, g_alpha, 0.0)

    g_color = weights.T @ g_c
    g_opacity = (g_alpha * alpha).sum(axis=0) / opac
    g_power = g_alpha * alpha
    a, b, c = conics[:, 0], conics[:, 1], conics[:, 2]
    g_conic = np.stack(
        [
            (-0.5 * dx * dx * g_power).sum(axis=0),
            (-dx * dy * g_power).sum(axis=0),
            (-0.5 * dy * dy * g_power).sum(axis=0),
        ],
        axis=1,
    )
    g_mean2d = np.stack(
        [
            (g_power * (a * dx + b * dy)).sum(axis=0),
            (g_power * (b * dx + c * dy)).sum(axis=0),
        ],
        axis=1,
    )
    return rows, g_mean2d, g_conic, g_opacity, g_color


def render_backward(
    output: RenderOutput,
    grad_color: np.ndarray,
    grad_alpha: Optional[np.ndarray] = None,
) -> RasterGradients:
    """Gradients of a scalar loss w.r.t. every stored field parameter, given dL/dC and dL/dA images."""
    aux = output.aux
    if aux is None:
        raise ValueError("render output carries no auxiliary buffers; run render_forward first")
    field, camera, batch, settings = aux.field, aux.camera, aux.batch, aux.settings
    dtype = field.dtype
    h, w = camera.height, camera.width
    if grad_color.shape != (h, w, 3):
        raise ValueError(f"colour gradient shape {grad_color.shape} does not match image {(h, w, 3)}")
    if grad_alpha is None:
        grad_alpha = np.zeros((h, w), dtype=dtype)
    elif grad_alpha.shape != (h, w):
        raise ValueError(f"opacity gradient shape {grad_alpha.shape} does not match image {(h, w)}")
    grad_color = grad_color.astype(dtype, copy=False)
    grad_alpha = grad_alpha.astype(dtype, copy=False)
    if aux.background is not None:
        # out = C + (1 - A) B
        grad_alpha = grad_alpha - grad_color @ aux.background

    m = len(batch)
    g_mean2d = np.zeros((m, 2), dtype=dtype)
    g_conic = np.zeros((m, 3), dtype=dtype)
    g_opac = np.zeros(m, dtype=dtype)
    g_col = np.zeros((m, 3), dtype=dtype)
    results = _for_each_tile(
        lambda t: _tile_backward(t, batch, settings, grad_color, grad_alpha),
        aux.tiles,
        settings.workers,
    )
    for rows, gm, gk, go, gc in results:
        np.add.at(g_mean2d, rows, gm)
        np.add.at(g_conic, rows, gk)
        np.add.at(g_opac, rows, go)
        np.add.at(g_col, rows, gc)

    n = len(field)
    src = batch.source
    grads = RasterGradients(
        means=np.zeros((n, 3), dtype=dtype),
        scales=np.zeros((n, 3), dtype=dtype),
        rotations=np.zeros((n, 4), dtype=dtype),
        opacities=np.zeros(n, dtype=dtype),
        sh=np.zeros_like(field.sh),
        colors=None if aux.colors_override is None else np.zeros((n, 3), dtype=dtype),
        means2d=np.zeros((n, 2), dtype=dtype),
        visible=np.zeros(n, dtype=bool),
    )
    if m == 0:
        return grads
    grads.visible[src] = True
    grads.means2d[src] = g_mean2d * np.array([0.5 * w, 0.5 * h], dtype=dtype)

    o = batch.opacities
    grads.opacities[src] = g_opac * o * (1.0 - o)

    rot_w = camera.rotation.astype(dtype)
    g_means = np.zeros((m, 3), dtype=dtype)
    if aux.colors_override is None:
        g_sh, g_dirs = sh_to_color_backward(field.sh[src], batch.view_dirs, field.sh_degree, g_col)
        grads.sh[src] = g_sh
        d = batch.view_dirs
        g_means += (g_dirs - d * np.sum(d * g_dirs, axis=1, keepdims=True)) / batch.view_dist[:, None]
    else:
        grads.colors[src] = g_col

    # conic -> 2D covariance: dK = -K dS K
    ka, kb, kc = batch.conics[:, 0], batch.conics[:, 1], batch.conics[:, 2]
    conic = np.stack([np.stack([ka, kb], -1), np.stack([kb, kc], -1)], -2)
    g_k = np.stack(
        [
            np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
            np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1),
        ],
        -2,
    )
    g_cov2d = -conic @ g_k @ conic

    jw = batch.jw
    g_cov3d = np.swapaxes(jw, 1, 2) @ g_cov2d @ jw
    g_jw = 2.0 * g_cov2d @ jw @ batch.cov3d
    g_jac = g_jw @ rot_w.T

    x, y, z = batch.p_cam[:, 0], batch.p_cam[:, 1], batch.p_cam[:, 2]
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    z2 = z * z
    z3 = z2 * z
    g_pcam = np.stack(
        [
            gu * fx / z - g_jac[:, 0, 2] * fx / z2,
            gv * fy / z - g_jac[:, 1, 2] * fy / z2,
            -gu * fx * x / z2
            - gv * fy * y / z2
            - g_jac[:, 0, 0] * fx / z2
            + g_jac[:, 0, 2] * 2.0 * fx * x / z3
            - g_jac[:, 1, 1] * fy / z2
            + g_jac[:, 1, 2] * 2.0 * fy * y / z3,
        ],
        axis=1,
    )
    g_means += g_pcam @ rot_w
    grads.means[src] = g_means

    # Sigma = M M^T with M = R diag(s)
    rot, s = batch.rotations, batch.scales
    g_m = 2.0 * g_cov3d @ (rot * s[:, None, :])
    g_rot = g_m * s[:, None, :]
    g_s = np.einsum("nij,nij->nj", g_m, rot)
    grads.scales[src] = g_s * scale_activation_grad(field.scales[src])

    q_raw = field.rotations[src]
    g_unit = quaternion_to_rotation_backward(normalize_quaternion(q_raw), g_rot)
    grads.rotations[src] = normalize_quaternion_backward(q_raw, g_unit)
    return grads

