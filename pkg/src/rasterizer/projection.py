"""
EWA projection of 3D Gaussians onto the image plane.

Pixel centres sit at integer coordinates: pixel (x, y) is sampled at (x, y).
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.core.camera import Camera
from src.core.gaussians import (
    GaussianField,
    GaussianPrimitive,
    normalize_quaternion,
    quaternion_to_rotation,
    scale_activation,
    sigmoid,
)
from src.core.sh import sh_to_color
from src.rasterizer.settings import RasterSettings


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    index: int


@dataclass
class ProjectionBatch:
    """Visible primitives of one render, plus the intermediates the backward pass reuses."""

    source: np.ndarray      # (M,) index into the primitive set
    means2d: np.ndarray     # (M, 2) pixels
    cov2d: np.ndarray       # (M, 2, 2) dilated
    conics: np.ndarray      # (M, 3) inverse covariance entries (a, b, c)
    depths: np.ndarray      # (M,)
    colors: np.ndarray      # (M, 3)
    opacities: np.ndarray   # (M,) activated
    radii: np.ndarray       # (M,) pixels
    tile_rects: np.ndarray  # (M, 4) tx0, ty0, tx1, ty1 inclusive
    p_cam: np.ndarray
    jw: np.ndarray          # (M, 2, 3) projection Jacobian times view rotation
    cov3d: np.ndarray
    rotations: np.ndarray   # (M, 3, 3) from the normalised quaternion
    scales: np.ndarray      # (M, 3) activated
    view_dirs: np.ndarray   # (M, 3) unit, camera centre to mean
    view_dist: np.ndarray   # (M,)

    def __len__(self) -> int:
        return self.source.shape[0]


def check_finite(field: GaussianField, colors: Optional[np.ndarray] = None) -> None:
    bad = field.first_non_finite()
    if bad is not None:
        raise ValueError(f"primitive {bad} has non-finite parameters")
    if colors is not None:
        rows = np.flatnonzero(~np.isfinite(colors).all(axis=1))
        if rows.size:
            raise ValueError(f"primitive {int(rows[0])} has a non-finite colour override")


def project_gaussians(
    field: GaussianField,
    camera: Camera,
    settings: RasterSettings,
    colors: Optional[np.ndarray] = None,
    cull_footprint: bool = True,
) -> ProjectionBatch:
    dtype = field.dtype
    rot_w = camera.rotation.astype(dtype)
    p_cam_all = field.means @ rot_w.T + camera.translation.astype(dtype)
    keep = p_cam_all[:, 2] > camera.near
    source = np.flatnonzero(keep)

    p_cam = p_cam_all[source]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    means2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1).astype(dtype)

    jac = np.zeros((len(source), 2, 3), dtype=dtype)
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    jw = jac @ rot_w

    scales = scale_activation(field.scales[source])
    rotations = quaternion_to_rotation(normalize_quaternion(field.rotations[source]))
    m = rotations * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    cov2d = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = settings.footprint_sigmas * np.sqrt(lam_max)

    ts = settings.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    x_lo = np.maximum(np.ceil(means2d[:, 0] - radii), 0)
    x_hi = np.minimum(np.floor(means2d[:, 0] + radii), camera.width - 1)
    y_lo = np.maximum(np.ceil(means2d[:, 1] - radii), 0)
    y_hi = np.minimum(np.floor(means2d[:, 1] + radii), camera.height - 1)
    on_screen = (x_lo <= x_hi) & (y_lo <= y_hi)
    tile_rects = np.stack(
        [
            np.clip(x_lo // ts, 0, tiles_x - 1),
            np.clip(y_lo // ts, 0, tiles_y - 1),
            np.clip(x_hi // ts, 0, tiles_x - 1),
            np.clip(y_hi // ts, 0, tiles_y - 1),
        ],
        axis=1,
    ).astype(np.int64)

    cam_pos = camera.position.astype(dtype)
    offsets = field.means[source] - cam_pos
    view_dist = np.linalg.norm(offsets, axis=1)
    view_dirs = offsets / view_dist[:, None]
    if colors is None:
        decoded = sh_to_color(field.sh[source], view_dirs, field.sh_degree)
    else:
        decoded = colors[source]

    batch = ProjectionBatch(
        source=source,
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=z,
        colors=decoded,
        opacities=sigmoid(field.opacities[source]),
        radii=radii,
        tile_rects=tile_rects,
        p_cam=p_cam,
        jw=jw,
        cov3d=cov3d,
        rotations=rotations,
        scales=scales,
        view_dirs=view_dirs,
        view_dist=view_dist,
    )
    if cull_footprint:
        batch = select(batch, np.flatnonzero(on_screen))
    return batch


def select(batch: ProjectionBatch, rows: np.ndarray) -> ProjectionBatch:
    return ProjectionBatch(**{name: value[rows] for name, value in vars(batch).items()})


def project_gaussian(
    primitive: GaussianPrimitive,
    camera: Camera,
    sh_degree: int,
    settings: Optional[RasterSettings] = None,
    index: int = 0,
) -> Optional[ProjectedGaussian]:
    """Project one primitive; None when culled by the near plane or the image bounds."""
    settings = settings or RasterSettings()
    field = GaussianField(
        means=np.asarray(primitive.mean)[None],
        scales=np.asarray(primitive.scale)[None],
        rotations=np.asarray(primitive.rotation)[None],
        opacities=np.asarray([primitive.opacity], dtype=np.asarray(primitive.mean).dtype),
        sh=np.asarray(primitive.sh)[None],
        sh_degree=sh_degree,
    )
    check_finite(field)
    batch = project_gaussians(field, camera, settings)
    if len(batch) == 0:
        return None
    return ProjectedGaussian(
        mean2d=batch.means2d[0],
        cov2d=batch.cov2d[0],
        depth=float(batch.depths[0]),
        color=batch.colors[0],
        opacity=float(batch.opacities[0]),
        index=index,
    )
