"""
Deformation branches.

Face:   delta = MLP(H(mu) ++ (V_a * a) ++ (V_e * e))  -> (d_mu:3, d_s:3, d_q:4) [+ hybrid heads]
Mouth:  delta = MLP(H(mu) ++ a)                       -> d_mu:3, with d_s = d_q = 0
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.core.gaussians import BranchTag, DeformationDelta, HybridModification, sigmoid
from src.motion_fields.attention import AttentionTrace, RegionAttentionField
from src.motion_fields.decoder import DecoderTrace, MlpDecoder
from src.motion_fields.hash_encoder import BoundingBox, EncoderConfig, EncodingTrace, TriPlaneHashEncoder


class HybridMode(str, Enum):
    NONE = "none"
    OPACITY = "opacity"
    OPACITY_RGB = "opacity_rgb"


class FieldConfig(BaseModel):
    kind: BranchTag = BranchTag.FACE
    audio_dim: int = Field(default=16, ge=1)
    expr_dim: int = Field(default=7, ge=1)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    bbox: BoundingBox = Field(default_factory=BoundingBox)
    attention_resolution: int = Field(default=32, ge=1)
    hidden: int = Field(default=64, ge=1)
    depth: int = Field(default=3, ge=1)
    hybrid: HybridMode = HybridMode.NONE

    @model_validator(mode="after")
    def _hybrid_needs_attention(self):
        if self.kind == BranchTag.MOUTH and self.hybrid != HybridMode.NONE:
            raise ValueError("hybrid appearance heads require a face-type branch")
        return self

    @property
    def input_dim(self) -> int:
        if self.kind == BranchTag.FACE:
            return self.encoder.output_dim + self.audio_dim + self.expr_dim
        return self.encoder.output_dim + self.audio_dim

    @property
    def output_dim(self) -> int:
        if self.kind == BranchTag.MOUTH:
            return 3
        return 10 + {HybridMode.NONE: 0, HybridMode.OPACITY: 1, HybridMode.OPACITY_RGB: 4}[self.hybrid]


@dataclass(frozen=True)
class ConditionVector:
    """Per-frame driving signals: audio feature a, expression e, and sampler metrics m."""

    audio: np.ndarray
    expression: np.ndarray
    metrics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "audio", np.asarray(self.audio))
        object.__setattr__(self, "expression", np.asarray(self.expression))
        if not (np.all(np.isfinite(self.audio)) and np.all(np.isfinite(self.expression))):
            raise ValueError("condition vectors must be finite")
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric '{name}' = {value} lies outside [0, 1]")


@dataclass
class FieldTrace:
    kind: BranchTag
    count: int
    hybrid: HybridMode
    encoding: EncodingTrace
    attention: Optional[AttentionTrace]
    decoder: DecoderTrace
    audio: np.ndarray
    expression: Optional[np.ndarray]
    colors: Optional[np.ndarray] = None


@dataclass
class FieldOutput:
    delta: DeformationDelta
    modification: HybridModification
    trace: FieldTrace


@dataclass
class FieldGradients:
    params: Dict[str, np.ndarray]
    positions: np.ndarray


class MotionFieldBranch:
    def __init__(self, config: FieldConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.encoder = TriPlaneHashEncoder(config.encoder, config.bbox, rng, dtype)
        self.attention: Optional[RegionAttentionField] = None
        if config.kind == BranchTag.FACE:
            self.attention = RegionAttentionField(
                config.attention_resolution, config.audio_dim, config.expr_dim, config.bbox, dtype
            )
        self.decoder = MlpDecoder(config.input_dim, config.output_dim, config.hidden, config.depth, rng, dtype)

    @property
    def kind(self) -> BranchTag:
        return self.config.kind

    def _modules(self):
        modules = {"encoder": self.encoder, "decoder": self.decoder}
        if self.attention is not None:
            modules["attention"] = self.attention
        return modules

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live views of every trainable tensor, keyed 'module.name'."""
        return {
            f"{prefix}.{name}": value
            for prefix, module in sorted(self._modules().items())
            for name, value in module.params.items()
        }

    def load_parameters(self, tensors: Dict[str, np.ndarray]) -> None:
        expected = self.parameters()
        if set(tensors) != set(expected):
            raise ValueError(f"tensor names {sorted(tensors)} do not match branch tensors {sorted(expected)}")
        modules = self._modules()
        for key, value in tensors.items():
            if value.shape != expected[key].shape:
                raise ValueError(f"tensor '{key}' has shape {value.shape}, expected {expected[key].shape}")
            prefix, name = key.split(".", 1)
            modules[prefix].params[name] = np.array(value, dtype=self.dtype)

    def set_tensor(self, key: str, value: np.ndarray) -> None:
        """Install an already-shaped tensor without copying (optimizer writeback)."""
        prefix, name = key.split(".", 1)
        self._modules()[prefix].params[name] = value

    def _check_condition(self, means: np.ndarray, audio: np.ndarray, expression: Optional[np.ndarray]) -> None:
        if means.ndim != 2 or means.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {means.shape}")
        if audio.shape != (self.config.audio_dim,):
            raise ValueError(f"audio feature has shape {audio.shape}, expected ({self.config.audio_dim},)")
        if expression is not None and expression.shape != (self.config.expr_dim,):
            raise ValueError(f"expression has shape {expression.shape}, expected ({self.config.expr_dim},)")

    def evaluate(self, means: np.ndarray, condition: ConditionVector) -> FieldOutput:
        if self.kind == BranchTag.FACE:
            return face_deformation(self, means, condition.audio, condition.expression)
        return mouth_deformation(self, means, condition.audio)


def face_deformation(
    branch: MotionFieldBranch, means: np.ndarray, audio: np.ndarray, expression: np.ndarray
) -> FieldOutput:
    if branch.kind != BranchTag.FACE:
        raise ValueError("face_deformation needs a face-type branch")
    audio = np.asarray(audio, dtype=branch.dtype)
    expression = np.asarray(expression, dtype=branch.dtype)
    branch._check_condition(means, audio, expression)
    means = means.astype(branch.dtype, copy=False)

    encoded, enc_trace = branch.encoder.encode(means)
    v_a, v_e, att_trace = branch.attention.gates(means)
    inputs = np.concatenate([encoded, v_a * audio, v_e * expression], axis=1)
    out, dec_trace = branch.decoder.forward(inputs)

    delta = DeformationDelta(out[:, 0:3], out[:, 3:6], out[:, 6:10])
    hybrid = branch.config.hybrid
    modification = HybridModification()
    colors = None
    if hybrid != HybridMode.NONE:
        d_opacity = out[:, 10]
        if hybrid == HybridMode.OPACITY_RGB:
            colors = sigmoid(out[:, 11:14])
        modification = HybridModification(d_opacities=d_opacity, colors=colors)
    trace = FieldTrace(BranchTag.FACE, len(means), hybrid, enc_trace, att_trace, dec_trace, audio, expression, colors)
    return FieldOutput(delta, modification, trace)


def mouth_deformation(branch: MotionFieldBranch, means: np.ndarray, audio: np.ndarray) -> FieldOutput:
    if branch.kind != BranchTag.MOUTH:
        raise ValueError("mouth_deformation needs a mouth-type branch")
    audio = np.asarray(audio, dtype=branch.dtype)
    branch._check_condition(means, audio, None)
    means = means.astype(branch.dtype, copy=False)

    encoded, enc_trace = branch.encoder.encode(means)
    inputs = np.concatenate([encoded, np.broadcast_to(audio, (len(means), audio.size))], axis=1)
    out, dec_trace = branch.decoder.forward(inputs)
    delta = DeformationDelta.translation_only(out)
    trace = FieldTrace(BranchTag.MOUTH, len(means), HybridMode.NONE, enc_trace, None, dec_trace, audio, None)
    return FieldOutput(delta, HybridModification(), trace)


def field_backward(
    branch: MotionFieldBranch,
    trace: FieldTrace,
    grad_delta: DeformationDelta,
    grad_opacities: Optional[np.ndarray] = None,
    grad_colors: Optional[np.ndarray] = None,
) -> FieldGradients:
    """Chain rule from per-primitive gradients on delta (and hybrid heads) to every branch tensor."""
    if trace.kind != branch.kind or trace.hybrid != branch.config.hybrid:
        raise ValueError("field trace was recorded by a different branch configuration")
    if len(grad_delta) != trace.count:
        raise ValueError(f"gradient count {len(grad_delta)} does not match traced primitive count {trace.count}")

    dtype = branch.dtype
    grad_out = np.zeros((trace.count, branch.config.output_dim), dtype=dtype)
    grad_out[:, 0:3] = grad_delta.d_means
    if branch.kind == BranchTag.FACE:
        grad_out[:, 3:6] = grad_delta.d_scales
        grad_out[:, 6:10] = grad_delta.d_rotations
        if trace.hybrid != HybridMode.NONE and grad_opacities is not None:
            grad_out[:, 10] = grad_opacities
        if trace.hybrid == HybridMode.OPACITY_RGB and grad_colors is not None:
            grad_out[:, 11:14] = grad_colors * trace.colors * (1.0 - trace.colors)

    params: Dict[str, np.ndarray] = {}
    dec_grads, grad_inputs = branch.decoder.backward(trace.decoder, grad_out)
    params.update({f"decoder.{k}": v for k, v in dec_grads.items()})

    enc_dim = branch.encoder.output_dim
    enc_grads, positions = branch.encoder.backward(trace.encoding, grad_inputs[:, :enc_dim])
    params.update({f"encoder.{k}": v for k, v in enc_grads.items()})

    if branch.kind == BranchTag.FACE:
        a_dim = branch.config.audio_dim
        grad_va = grad_inputs[:, enc_dim:enc_dim + a_dim] * trace.audio
        grad_ve = grad_inputs[:, enc_dim + a_dim:] * trace.expression
        att_grads, att_positions = branch.attention.backward(trace.attention, grad_va, grad_ve)
        params.update({f"attention.{k}": v for k, v in att_grads.items()})
        positions = positions + att_positions

    ordered = {key: params[key] for key in branch.parameters()}
    return FieldGradients(params=ordered, positions=positions)
