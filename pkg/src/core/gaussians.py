"""
Canonical Gaussian field (theta_C), per-primitive deformations and the
activations that map stored (raw) parameters to their physical values.

Stored parameters:
    means       (N, 3)  world units
    scales      (N, 3)  raw, activated with a floored softplus
    rotations   (N, 4)  raw quaternion (w, x, y, z), normalised before use
    opacities   (N,)    raw logit, activated with a sigmoid
    sh          (N, K, 3) spherical-harmonic coefficients, K = (degree + 1)^2
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.neighbors import NearestNeighbors

from src.core.sh import num_sh_bases, rgb_to_sh

SCALE_FLOOR = 1e-6
QUATERNION_EPS = 1e-8

PARAMETER_NAMES = ("means", "scales", "rotations", "opacities", "sh")


class BranchTag(str, Enum):
    FACE = "face"
    MOUTH = "mouth"


# --- activations ------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def scale_activation(raw: np.ndarray) -> np.ndarray:
    return np.maximum(softplus(raw), SCALE_FLOOR)


def scale_activation_grad(raw: np.ndarray) -> np.ndarray:
    return np.where(softplus(raw) > SCALE_FLOOR, sigmoid(raw), 0.0)


def inverse_scale_activation(scales: np.ndarray) -> np.ndarray:
    s = np.maximum(np.asarray(scales), SCALE_FLOOR)
    # log(expm1(s)) without overflow for large s
    return s + np.log(-np.expm1(-s))


# --- quaternions ------------------------------------------------------------

def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms < QUATERNION_EPS):
        bad = int(np.argmin(norms.reshape(-1)))
        raise ValueError(f"quaternion {bad} has near-zero norm and cannot be normalised")
    return q / norms


def normalize_quaternion_backward(q: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient through q -> q / |q|."""
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / norms
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=-1, keepdims=True)) / norms


def quaternion_to_rotation(q_unit: np.ndarray) -> np.ndarray:
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    rot = np.empty(q_unit.shape[:-1] + (3, 3), dtype=q_unit.dtype)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def quaternion_to_rotation_backward(q_unit: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unit quaternion given dL/dR of shape (..., 3, 3)."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = grad_rot
    grad_w = 2.0 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    grad_x = 2.0 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2.0 * x * g[..., 1, 1]
        - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2]
    )
    grad_y = 2.0 * (
        -2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
        + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2]
    )
    grad_z = 2.0 * (
        -2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
        - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([grad_w, grad_x, grad_y, grad_z], axis=-1)


def covariance_from_scale_rotation(s_activated: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for a single primitive or a batch."""
    s_activated = np.asarray(s_activated)
    q = np.asarray(q)
    if not (np.all(np.isfinite(s_activated)) and np.all(np.isfinite(q))):
        raise ValueError("covariance inputs must be finite")
    if np.any(s_activated <= 0.0):
        raise ValueError("activated scales must be strictly positive")
    rot = quaternion_to_rotation(normalize_quaternion(q))
    m = rot * s_activated[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# --- primitives and fields --------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh: np.ndarray

    @property
    def activated_scale(self) -> np.ndarray:
        return scale_activation(self.scale)

    @property
    def activated_opacity(self) -> float:
        return float(sigmoid(np.asarray(self.opacity)))


@dataclass(frozen=True)
class GaussianField:
    """An ordered primitive set: the canonical field theta_C or a deformed set theta_D."""

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_degree: int
    branch_tag: BranchTag = BranchTag.FACE

    def __post_init__(self):
        n = self.means.shape[0]
        k = num_sh_bases(self.sh_degree)
        expected = {
            "means": (n, 3),
            "scales": (n, 3),
            "rotations": (n, 4),
            "opacities": (n,),
            "sh": (n, k, 3),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ValueError(f"field '{name}' has shape {actual}, expected {shape}")
        object.__setattr__(self, "branch_tag", BranchTag(self.branch_tag))

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.means.dtype

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[index],
            scale=self.scales[index],
            rotation=self.rotations[index],
            opacity=float(self.opacities[index]),
            sh=self.sh[index],
        )

    def activated_scales(self) -> np.ndarray:
        return scale_activation(self.scales)

    def activated_opacities(self) -> np.ndarray:
        return sigmoid(self.opacities)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def with_parameters(self, params: Dict[str, np.ndarray]) -> "GaussianField":
        return replace(self, **{k: v for k, v in params.items() if k in PARAMETER_NAMES})

    def astype(self, dtype) -> "GaussianField":
        return self.with_parameters({k: v.astype(dtype) for k, v in self.parameters().items()})

    def take(self, indices: np.ndarray) -> "GaussianField":
        return self.with_parameters({k: v[indices] for k, v in self.parameters().items()})

    def first_non_finite(self) -> Optional[int]:
        if len(self) == 0:
            return None
        bad = np.zeros(len(self), dtype=bool)
        for value in self.parameters().values():
            bad |= ~np.isfinite(value.reshape(len(self), -1)).all(axis=1)
        hits = np.flatnonzero(bad)
        return int(hits[0]) if hits.size else None


def concatenate_fields(fields: Sequence[GaussianField]) -> GaussianField:
    head = fields[0]
    params = {
        name: np.concatenate([getattr(f, name) for f in fields], axis=0) for name in PARAMETER_NAMES
    }
    return head.with_parameters(params)


# --- deformation ------------------------------------------------------------

@dataclass(frozen=True)
class DeformationDelta:
    """Per-primitive offsets {d_mu, d_s, d_q}; d_s is applied in raw (pre-activation) space."""

    d_means: np.ndarray
    d_scales: np.ndarray
    d_rotations: np.ndarray

    def __post_init__(self):
        for name in ("d_means", "d_scales", "d_rotations"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"deformation component '{name}' contains non-finite values")

    def __len__(self) -> int:
        return self.d_means.shape[0]

    @classmethod
    def zeros(cls, count: int, dtype=np.float64) -> "DeformationDelta":
        return cls(
            np.zeros((count, 3), dtype=dtype),
            np.zeros((count, 3), dtype=dtype),
            np.zeros((count, 4), dtype=dtype),
        )

    @classmethod
    def translation_only(cls, d_means: np.ndarray) -> "DeformationDelta":
        n = d_means.shape[0]
        return cls(d_means, np.zeros((n, 3), dtype=d_means.dtype), np.zeros((n, 4), dtype=d_means.dtype))

    def negated(self) -> "DeformationDelta":
        return DeformationDelta(-self.d_means, -self.d_scales, -self.d_rotations)


def apply_deformation(field: GaussianField, delta: DeformationDelta) -> GaussianField:
    """theta_D = {mu + d_mu, s + d_s, q + d_q, alpha, f}; alpha and f pass through untouched."""
    if len(delta) != len(field):
        raise ValueError(
            f"deformation count {len(delta)} does not match primitive count {len(field)}"
        )
    rotations = field.rotations + delta.d_rotations
    norms = np.linalg.norm(rotations, axis=1)
    degenerate = np.flatnonzero(norms < QUATERNION_EPS)
    if degenerate.size:
        raise ValueError(
            f"primitive {int(degenerate[0])}: q + dq has near-zero norm and cannot be renormalised"
        )
    return replace(
        field,
        means=field.means + delta.d_means,
        scales=field.scales + delta.d_scales,
        rotations=rotations,
    )


@dataclass(frozen=True)
class HybridModification:
    """Appearance heads of the hybrid ablation: raw-opacity offsets and direct RGB colours."""

    d_opacities: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None


def apply_hybrid_modification(
    field: GaussianField, modification: HybridModification
) -> Tuple[GaussianField, Optional[np.ndarray]]:
    if modification.d_opacities is not None:
        if modification.d_opacities.shape != field.opacities.shape:
            raise ValueError("opacity modification count does not match primitive count")
        field = replace(field, opacities=field.opacities + modification.d_opacities)
    colors = modification.colors
    if colors is not None and colors.shape != (len(field), 3):
        raise ValueError("colour modification count does not match primitive count")
    return field, colors


# --- initialisation ---------------------------------------------------------

def mean_neighbor_distance(points: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """Per-point mean distance to its nearest neighbours."""
    k = min(neighbors, len(points) - 1)
    if k < 1:
        return np.ones(len(points))
    nn = NearestNeighbors(n_neighbors=k + 1).fit(points)
    distances, _ = nn.kneighbors(points)
    return np.maximum(distances[:, 1:].mean(axis=1), 1e-7)


def initialize_field(
    bounds_min: Sequence[float],
    bounds_max: Sequence[float],
    count: int,
    rng: np.random.Generator,
    sh_degree: int = 1,
    branch_tag: BranchTag = BranchTag.FACE,
    initial_opacity: float = 0.1,
    initial_color: float = 0.5,
    dtype=np.float32,
) -> GaussianField:
    """Uniform samples inside the scene box, isotropic scale = mean nearest-neighbour distance."""
    if count < 1:
        raise ValueError("initial primitive count must be positive")
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    means = rng.uniform(lo, hi, size=(count, 3))
    dist = mean_neighbor_distance(means)
    scales = np.repeat(inverse_scale_activation(dist)[:, None], 3, axis=1)
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    opacities = np.full(count, inverse_sigmoid(initial_opacity))
    sh = np.zeros((count, num_sh_bases(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh(initial_color)
    field = GaussianField(means, scales, rotations, opacities, sh, sh_degree, branch_tag)
    return field.astype(dtype)
