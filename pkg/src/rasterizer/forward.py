"""
Tile-based front-to-back alpha compositing and the naive per-pixel reference.

For each pixel the visible contributors (ascending depth, ties by primitive
index) are composited as

    C = sum_i c_i a_i T_i,   A = sum_i a_i T_i,   T_i = prod_{j<i} (1 - a_j)

with a_i = o_i * exp(power_i) and contributions below the skip threshold
treated as zero. With early termination on, a contribution is kept while
T_i >= floor; the one that drives T below the floor is still composited.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.core.camera import Camera
from src.core.gaussians import GaussianField
from src.rasterizer.projection import ProjectionBatch, check_finite, project_gaussians
from src.rasterizer.settings import RasterSettings


@dataclass
class TileBin:
    tile_id: int
    x0: int
    y0: int
    x1: int
    y1: int
    contributors: np.ndarray  # rows of the projection batch, front to back


@dataclass
class RasterAux:
    field: GaussianField
    camera: Camera
    settings: RasterSettings
    batch: ProjectionBatch
    tiles: List[TileBin]
    background: Optional[np.ndarray]
    colors_override: Optional[np.ndarray]


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3), composited over the background when one was given
    alpha: np.ndarray       # (H, W) accumulated opacity
    n_contrib: np.ndarray   # (H, W) surviving contributions per pixel
    aux: Optional[RasterAux] = None


def splat_alpha(
    px: np.ndarray,
    py: np.ndarray,
    means2d: np.ndarray,
    conics: np.ndarray,
    opacities: np.ndarray,
    alpha_skip: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per pixel/primitive alpha with broadcasting; returns (alpha, dx, dy)."""
    dx = px - means2d[..., 0]
    dy = py - means2d[..., 1]
    power = -0.5 * (conics[..., 0] * dx * dx + conics[..., 2] * dy * dy) - conics[..., 1] * dx * dy
    alpha = opacities * np.exp(power)
    alpha = np.where(alpha < alpha_skip, 0.0, alpha).astype(alpha.dtype, copy=False)
    return alpha, dx, dy


def composite_weights(
    alpha: np.ndarray, settings: RasterSettings
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """alpha: (P, n) front to back. Returns (weights, T_before, included)."""
    one_minus = 1.0 - alpha
    t_before = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        t_before[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    if settings.early_termination:
        included = t_before >= settings.transmittance_floor
    else:
        included = np.ones(alpha.shape, dtype=bool)
    weights = np.where(included, alpha * t_before, 0.0).astype(alpha.dtype, copy=False)
    return weights, t_before, included


def bin_tiles(batch: ProjectionBatch, camera: Camera, settings: RasterSettings) -> List[TileBin]:
    """Duplicate each visible primitive into the tiles its footprint overlaps, sorted by (tile, depth, index)."""
    ts = settings.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    if len(batch) == 0:
        return []
    rects = batch.tile_rects
    widths = rects[:, 2] - rects[:, 0] + 1
    counts = widths * (rects[:, 3] - rects[:, 1] + 1)
    rows = np.repeat(np.arange(len(batch)), counts)
    local = np.arange(rows.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = rects[rows, 0] + local % widths[rows]
    ty = rects[rows, 1] + local // widths[rows]
    tile_ids = ty * tiles_x + tx
    order = np.lexsort((batch.source[rows], batch.depths[rows], tile_ids))
    tile_ids, rows = tile_ids[order], rows[order]

    unique_ids, starts = np.unique(tile_ids, return_index=True)
    ends = np.append(starts[1:], tile_ids.size)
    bins = []
    for tile_id, start, end in zip(unique_ids, starts, ends):
        ty0, tx0 = divmod(int(tile_id), tiles_x)
        bins.append(
            TileBin(
                tile_id=int(tile_id),
                x0=tx0 * ts,
                y0=ty0 * ts,
                x1=min((tx0 + 1) * ts, camera.width),
                y1=min((ty0 + 1) * ts, camera.height),
                contributors=rows[start:end],
            )
        )
    return bins


def tile_pixels(tile: TileBin, dtype) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
    return xs.reshape(-1, 1).astype(dtype), ys.reshape(-1, 1).astype(dtype)


def _render_tile(tile: TileBin, batch: ProjectionBatch, settings: RasterSettings):
    rows = tile.contributors
    px, py = tile_pixels(tile, batch.means2d.dtype)
    alpha, _, _ = splat_alpha(
        px, py, batch.means2d[rows], batch.conics[rows], batch.opacities[rows], settings.alpha_skip
    )
    weights, _, included = composite_weights(alpha, settings)
    color = weights @ batch.colors[rows]
    acc = weights.sum(axis=1)
    n_contrib = np.count_nonzero((alpha > 0.0) & included, axis=1)
    return color, acc, n_contrib


def _for_each_tile(fn, tiles: List[TileBin], workers: int) -> list:
    """Apply fn to every tile; results come back in tile order regardless of worker count."""
    if workers <= 1 or len(tiles) <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, tiles))


def composite_background(color: np.ndarray, alpha: np.ndarray, background: np.ndarray) -> np.ndarray:
    return color + (1.0 - alpha)[..., None] * background


def _prepare(field: GaussianField, camera: Camera, colors: Optional[np.ndarray], background):
    if colors is not None and colors.shape != (len(field), 3):
        raise ValueError(f"colour override shape {colors.shape} does not match {len(field)} primitives")
    check_finite(field, colors)
    if background is not None:
        background = np.asarray(background, dtype=field.dtype)
        if background.shape != (3,):
            raise ValueError("background must be an RGB triple")
    return background


def render_forward(
    field: GaussianField,
    camera: Camera,
    settings: Optional[RasterSettings] = None,
    background: Optional[np.ndarray] = None,
    colors: Optional[np.ndarray] = None,
) -> RenderOutput:
    """Tile renderer. `colors` overrides the SH-decoded colour per primitive."""
    settings = settings or RasterSettings()
    background = _prepare(field, camera, colors, background)
    dtype = field.dtype
    h, w = camera.height, camera.width

    batch = project_gaussians(field, camera, settings, colors)
    tiles = bin_tiles(batch, camera, settings)
    results = _for_each_tile(lambda t: _render_tile(t, batch, settings), tiles, settings.workers)

    color = np.zeros((h, w, 3), dtype=dtype)
    alpha = np.zeros((h, w), dtype=dtype)
    n_contrib = np.zeros((h, w), dtype=np.int32)
    for tile, (c, a, n) in zip(tiles, results):
        th, tw = tile.y1 - tile.y0, tile.x1 - tile.x0
        color[tile.y0:tile.y1, tile.x0:tile.x1] = c.reshape(th, tw, 3)
        alpha[tile.y0:tile.y1, tile.x0:tile.x1] = a.reshape(th, tw)
        n_contrib[tile.y0:tile.y1, tile.x0:tile.x1] = n.reshape(th, tw)

    if background is not None:
        color = composite_background(color, alpha, background)
    aux = RasterAux(field, camera, settings, batch, tiles, background, colors)
    return RenderOutput(color=color, alpha=alpha, n_contrib=n_contrib, aux=aux)


def render_naive(
    field: GaussianField,
    camera: Camera,
    settings: Optional[RasterSettings] = None,
    background: Optional[np.ndarray] = None,
    colors: Optional[np.ndarray] = None,
) -> RenderOutput:
    """Reference compositor: every pixel walks all globally depth-sorted primitives, no tiles, no early stop."""
    settings = settings or RasterSettings()
    background = _prepare(field, camera, colors, background)
    dtype = field.dtype
    h, w = camera.height, camera.width

    batch = project_gaussians(field, camera, settings, colors, cull_footprint=False)
    order = np.lexsort((batch.source, batch.depths))
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.reshape(-1).astype(dtype)
    py = ys.reshape(-1).astype(dtype)

    color = np.zeros((h * w, 3), dtype=dtype)
    acc = np.zeros(h * w, dtype=dtype)
    n_contrib = np.zeros(h * w, dtype=np.int32)
    transmittance = np.ones(h * w, dtype=dtype)
    for row in order:
        alpha, _, _ = splat_alpha(
            px, py, batch.means2d[row], batch.conics[row], batch.opacities[row], settings.alpha_skip
        )
        weight = alpha * transmittance
        color += weight[:, None] * batch.colors[row]
        acc += weight
        n_contrib += alpha > 0.0
        transmittance = transmittance * (1.0 - alpha)

    color = color.reshape(h, w, 3)
    acc = acc.reshape(h, w)
    if background is not None:
        color = composite_background(color, acc, background)
    return RenderOutput(color=color, alpha=acc, n_contrib=n_contrib.reshape(h, w), aux=None)
