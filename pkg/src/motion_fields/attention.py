from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from src.core.gaussians import sigmoid
from src.motion_fields.hash_encoder import (
    PLANES,
    BoundingBox,
    PlaneLookup,
    interpolate,
    interpolate_backward,
    plane_lookup,
)


@dataclass
class AttentionTrace:
    count: int
    lookups: List[PlaneLookup]
    inside: np.ndarray
    coord_scale: np.ndarray
    gates: np.ndarray  # (N, D_a + D_e) after the sigmoid


class RegionAttentionField:
    """Coarse dense tri-plane grid of attention logits; V = sigmoid(sum over planes)."""

    def __init__(self, resolution: int, audio_dim: int, expr_dim: int, bbox: BoundingBox, dtype=np.float32):
        self.resolution = resolution
        self.audio_dim = audio_dim
        self.expr_dim = expr_dim
        self.bbox = bbox
        vertices = (resolution + 1) ** 2
        self.params: Dict[str, np.ndarray] = {
            "planes": np.zeros((3, vertices, audio_dim + expr_dim), dtype=dtype)
        }

    @property
    def table_size(self) -> int:
        return (self.resolution + 1) ** 2

    def gates(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, AttentionTrace]:
        """Returns (V_a, V_e, trace) with every component in [0, 1]."""
        coords, inside, scale = self.bbox.normalize(points)
        planes = self.params["planes"]
        logits = np.zeros((len(points), planes.shape[2]), dtype=planes.dtype)
        lookups = []
        for p, (u, v) in enumerate(PLANES):
            lookup = plane_lookup(coords[:, (u, v)], self.resolution, self.table_size)
            logits += interpolate(planes[p], lookup)
            lookups.append(lookup)
        gates = sigmoid(logits)
        trace = AttentionTrace(len(points), lookups, inside, scale, gates)
        return gates[:, :self.audio_dim], gates[:, self.audio_dim:], trace

    def backward(
        self, trace: AttentionTrace, grad_va: np.ndarray, grad_ve: np.ndarray
    ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        grad_gates = np.concatenate([grad_va, grad_ve], axis=1)
        if grad_gates.shape != trace.gates.shape:
            raise ValueError("attention gradient does not match the recorded trace")
        grad_logits = grad_gates * trace.gates * (1.0 - trace.gates)
        planes = self.params["planes"]
        grad_planes = np.zeros_like(planes)
        grad_coords = np.zeros((trace.count, 3), dtype=planes.dtype)
        for p, (u, v) in enumerate(PLANES):
            gp, guv = interpolate_backward(planes[p], trace.lookups[p], grad_logits)
            grad_planes[p] = gp
            grad_coords[:, u] += guv[:, 0]
            grad_coords[:, v] += guv[:, 1]
        grad_points = np.where(trace.inside, grad_coords * trace.coord_scale, 0.0)
        return {"planes": grad_planes}, grad_points
