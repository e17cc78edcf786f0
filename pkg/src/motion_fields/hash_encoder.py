"""
Tri-plane multiresolution hash encoding.

Each of the three axis-aligned planes (XY, YZ, XZ) holds L levels of
feature tables. A point is normalised into the bounding box, projected on
each plane, and the four surrounding grid vertices of every level are
bilinearly interpolated. Coarse levels whose vertex count fits in the
table are indexed densely; finer levels use the spatial hash
(i * 1) xor (j * 2654435761) mod 2^T.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

PLANES: Tuple[Tuple[int, int], ...] = ((0, 1), (1, 2), (0, 2))
HASH_PRIME = np.uint64(2654435761)


class BoundingBox(BaseModel):
    lower: List[float] = Field(default_factory=lambda: [-1.0, -1.0, -1.0])
    upper: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])

    @model_validator(mode="after")
    def _ordered(self):
        if len(self.lower) != 3 or len(self.upper) != 3:
            raise ValueError("bounding box corners must be 3-vectors")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("bounding box upper corner must exceed the lower corner on every axis")
        return self

    def normalize(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map to [0,1]^3 with clamping; returns (coords, inside mask, d coord / d point)."""
        lo = np.asarray(self.lower, dtype=points.dtype)
        extent = np.asarray(self.upper, dtype=points.dtype) - lo
        raw = (points - lo) / extent
        inside = (raw >= 0.0) & (raw <= 1.0)
        return np.clip(raw, 0.0, 1.0), inside, 1.0 / extent


class EncoderConfig(BaseModel):
    levels: int = Field(default=8, ge=1)
    features: int = Field(default=2, ge=1)
    log2_table_size: int = Field(default=15, ge=4, le=24)
    base_resolution: int = Field(default=8, ge=1)
    growth: float = Field(default=1.5, ge=1.0)
    init_range: float = Field(default=1e-4, ge=0.0)

    def resolutions(self) -> List[int]:
        return [int(np.floor(self.base_resolution * self.growth ** level)) for level in range(self.levels)]

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table_size

    @property
    def output_dim(self) -> int:
        return 3 * self.levels * self.features


@dataclass
class PlaneLookup:
    indices: np.ndarray   # (N, 4) corners 00, 10, 01, 11
    weights: np.ndarray   # (N, 4)
    frac: np.ndarray      # (N, 2)
    resolution: int


def plane_lookup(uv: np.ndarray, resolution: int, table_size: int) -> PlaneLookup:
    scaled = uv * resolution
    cell = np.minimum(np.floor(scaled), resolution - 1).astype(np.int64)
    frac = scaled - cell
    i0, j0 = cell[:, 0], cell[:, 1]
    corners = [(i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1)]
    if (resolution + 1) ** 2 <= table_size:
        indices = np.stack([i + j * (resolution + 1) for i, j in corners], axis=1)
    else:
        indices = np.stack(
            [
                ((i.astype(np.uint64) ^ (j.astype(np.uint64) * HASH_PRIME)) % np.uint64(table_size)).astype(np.int64)
                for i, j in corners
            ],
            axis=1,
        )
    fx, fy = frac[:, 0], frac[:, 1]
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return PlaneLookup(indices, weights, frac, resolution)


def interpolate(table: np.ndarray, lookup: PlaneLookup) -> np.ndarray:
    """table: (entries, F) -> (N, F)."""
    return np.einsum("nc,ncf->nf", lookup.weights, table[lookup.indices])


def interpolate_backward(
    table: np.ndarray, lookup: PlaneLookup, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (grad_table, grad_uv) for grad_out of shape (N, F)."""
    grad_table = np.zeros_like(table)
    contrib = lookup.weights[:, :, None] * grad_out[:, None, :]
    np.add.at(grad_table, lookup.indices.reshape(-1), contrib.reshape(-1, table.shape[1]))

    e = table[lookup.indices]  # (N, 4, F)
    fx, fy = lookup.frac[:, 0:1], lookup.frac[:, 1:2]
    d_fx = (1 - fy) * (e[:, 1] - e[:, 0]) + fy * (e[:, 3] - e[:, 2])
    d_fy = (1 - fx) * (e[:, 2] - e[:, 0]) + fx * (e[:, 3] - e[:, 1])
    grad_uv = np.stack(
        [np.sum(d_fx * grad_out, axis=1), np.sum(d_fy * grad_out, axis=1)], axis=1
    ) * lookup.resolution
    return grad_table, grad_uv


@dataclass
class EncodingTrace:
    count: int
    lookups: List[List[PlaneLookup]]  # [plane][level]
    inside: np.ndarray
    coord_scale: np.ndarray


class TriPlaneHashEncoder:
    def __init__(self, config: EncoderConfig, bbox: BoundingBox, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.bbox = bbox
        self.resolutions = config.resolutions()
        shape = (3, config.levels, config.table_size, config.features)
        self.params: Dict[str, np.ndarray] = {
            "tables": rng.uniform(-config.init_range, config.init_range, size=shape).astype(dtype)
        }

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def encode(self, points: np.ndarray) -> Tuple[np.ndarray, EncodingTrace]:
        coords, inside, scale = self.bbox.normalize(points)
        tables = self.params["tables"]
        features, lookups = [], []
        for p, (u, v) in enumerate(PLANES):
            uv = coords[:, (u, v)]
            per_level = []
            for level, res in enumerate(self.resolutions):
                lookup = plane_lookup(uv, res, self.config.table_size)
                features.append(interpolate(tables[p, level], lookup))
                per_level.append(lookup)
            lookups.append(per_level)
        out = np.concatenate(features, axis=1) if features else np.zeros((len(points), 0))
        return out.astype(tables.dtype, copy=False), EncodingTrace(len(points), lookups, inside, scale)

    def backward(self, trace: EncodingTrace, grad_features: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        if grad_features.shape != (trace.count, self.output_dim):
            raise ValueError(
                f"encoding gradient shape {grad_features.shape} does not match trace ({trace.count}, {self.output_dim})"
            )
        tables = self.params["tables"]
        grad_tables = np.zeros_like(tables)
        grad_coords = np.zeros((trace.count, 3), dtype=tables.dtype)
        f = self.config.features
        col = 0
        for p, (u, v) in enumerate(PLANES):
            for level in range(self.config.levels):
                g = grad_features[:, col:col + f]
                col += f
                gt, guv = interpolate_backward(tables[p, level], trace.lookups[p][level], g)
                grad_tables[p, level] += gt
                grad_coords[:, u] += guv[:, 0]
                grad_coords[:, v] += guv[:, 1]
        grad_points = np.where(trace.inside, grad_coords * trace.coord_scale, 0.0)
        return {"tables": grad_tables}, grad_points


def encode_position(encoder: TriPlaneHashEncoder, mean: Sequence[float]) -> np.ndarray:
    """Feature vector of a single world-space position."""
    point = np.asarray(mean, dtype=encoder.params["tables"].dtype).reshape(1, 3)
    features, _ = encoder.encode(point)
    return features[0]
