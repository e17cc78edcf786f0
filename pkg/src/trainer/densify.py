"""
Adaptive density control: clone small / split large high-gradient primitives, prune transparent ones.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.core.gaussians import (
    GaussianField,
    concatenate_fields,
    inverse_scale_activation,
    normalize_quaternion,
    quaternion_to_rotation,
)
from src.rasterizer.backward import RasterGradients
from src.rasterizer.forward import RenderOutput
from src.trainer.config import DensifyConfig


class DensifyStats:
    """Running screen-space gradient norms between densification events."""

    def __init__(self, count: int):
        self.reset(count)

    def reset(self, count: int) -> None:
        self.grad_accum = np.zeros(count)
        self.denom = np.zeros(count)
        self.max_radii = np.zeros(count)

    def update(self, output: RenderOutput, grads: RasterGradients) -> None:
        visible = grads.visible
        self.grad_accum[visible] += np.linalg.norm(grads.means2d[visible], axis=1)
        self.denom[visible] += 1.0
        batch = output.aux.batch
        np.maximum.at(self.max_radii, batch.source, batch.radii)

    def average(self) -> np.ndarray:
        return np.divide(self.grad_accum, self.denom, out=np.zeros_like(self.grad_accum), where=self.denom > 0)


@dataclass
class DensifyResult:
    field: GaussianField
    source: np.ndarray  # per new row, index of the row it inherits optimizer state from, -1 if new
    cloned: int
    split: int
    pruned: int


def _sample_offsets(field: GaussianField, rows: np.ndarray, copies: int, rng: np.random.Generator) -> np.ndarray:
    """Offsets drawn from each primitive's own Gaussian, (len(rows) * copies, 3)."""
    scales = np.repeat(field.activated_scales()[rows], copies, axis=0)
    rot = quaternion_to_rotation(normalize_quaternion(np.repeat(field.rotations[rows], copies, axis=0)))
    z = rng.standard_normal(scales.shape)
    return np.einsum("nij,nj->ni", rot, z * scales)


def _apply_budget(candidates: np.ndarray, grads: np.ndarray, cost: np.ndarray, budget: int) -> np.ndarray:
    """Keep the highest-gradient candidates whose cumulative growth fits the budget."""
    idx = np.flatnonzero(candidates)
    order = idx[np.argsort(-grads[idx], kind="stable")]
    keep = np.zeros_like(candidates)
    used = 0
    for row in order:
        if used + cost[row] > budget:
            continue
        keep[row] = True
        used += cost[row]
    return keep


def densify_and_prune(
    field: GaussianField,
    stats: DensifyStats,
    cfg: DensifyConfig,
    scene_extent: float,
    rng: np.random.Generator,
) -> DensifyResult:
    n = len(field)
    grads = stats.average()
    high = grads >= cfg.grad_threshold
    largest = field.activated_scales().max(axis=1) if n else np.zeros(0)
    small = largest <= cfg.percent_dense * scene_extent
    clone_mask = high & small
    split_mask = high & ~small

    cost = np.where(clone_mask, 1, 0) + np.where(split_mask, cfg.split_children - 1, 0)
    selected = _apply_budget(clone_mask | split_mask, grads, cost, max(cfg.max_primitives - n, 0))
    clone_mask &= selected
    split_mask &= selected

    clone_rows = np.flatnonzero(clone_mask)
    clones = field.take(clone_rows)
    clones = clones.with_parameters({"means": clones.means + _sample_offsets(field, clone_rows, 1, rng).astype(field.dtype)})

    split_rows = np.flatnonzero(split_mask)
    children = field.take(np.repeat(split_rows, cfg.split_children))
    child_scales = inverse_scale_activation(children.activated_scales() / cfg.split_scale_divisor)
    children = children.with_parameters(
        {
            "means": children.means + _sample_offsets(field, split_rows, cfg.split_children, rng).astype(field.dtype),
            "scales": child_scales.astype(field.dtype),
        }
    )

    kept_rows = np.flatnonzero(~split_mask)
    grown = concatenate_fields([field.take(kept_rows), clones, children])
    source = np.concatenate([kept_rows, np.full(len(clones) + len(children), -1)])
    grown_radii = np.concatenate([stats.max_radii[kept_rows], np.zeros(len(clones) + len(children))])

    prune = grown.activated_opacities() < cfg.opacity_threshold
    if cfg.max_screen_size is not None:
        prune |= grown_radii > cfg.max_screen_size
    if cfg.max_world_scale is not None:
        prune |= grown.activated_scales().max(axis=1) > cfg.max_world_scale * scene_extent
    keep = np.flatnonzero(~prune)
    return DensifyResult(
        field=grown.take(keep),
        source=source[keep],
        cloned=len(clone_rows),
        split=len(split_rows),
        pruned=int(prune.sum()),
    )


def scene_extent_of(bbox_lower, bbox_upper) -> float:
    """Half the bounding-box diagonal."""
    return float(0.5 * np.linalg.norm(np.asarray(bbox_upper) - np.asarray(bbox_lower)))


def densify_window(iteration: int, cfg: DensifyConfig, stop: int) -> Tuple[bool, bool]:
    """(accumulate statistics, run densification) for a stage-local iteration."""
    active = iteration < stop
    run = active and iteration >= cfg.start_iteration and iteration > 0 and iteration % cfg.interval == 0
    return active, run
