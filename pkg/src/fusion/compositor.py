"""
Face-over-mouth fusion.

    C_head = C_face * A_face + C_mouth * (1 - A_face)

C_face is the face branch's straight (unpremultiplied) colour, A_face its
accumulated opacity, and C_mouth the mouth branch rendered over the dataset
background. The face render itself is premultiplied, so C_face * A_face is
the raw composited face colour and the gradient w.r.t. the raw render is
the upstream gradient unchanged.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson

from src.core.camera import Camera
from src.core.gaussians import apply_deformation, apply_hybrid_modification
from src.dataio.images import write_png
from src.dataio.jsonl import write_jsonl
from src.fusion.model import BranchModel, TalkingHeadModel
from src.losses.metrics import frame_metrics, summarize
from src.motion_fields.branch import ConditionVector, FieldOutput
from src.rasterizer.backward import RasterGradients, render_backward
from src.rasterizer.debug import write_alpha
from src.rasterizer.forward import RenderOutput, render_forward
from src.rasterizer.settings import RasterSettings

# accumulated opacity is a float sum of weights and may overshoot 1 by rounding
ALPHA_TOLERANCE = 1e-6


def _check_fusion_inputs(c_face: np.ndarray, a_face: np.ndarray, c_mouth: np.ndarray) -> None:
    if c_face.shape != c_mouth.shape or c_face.ndim != 3 or c_face.shape[2] != 3:
        raise ValueError(f"face colour {c_face.shape} and mouth colour {c_mouth.shape} must both be (H, W, 3)")
    if a_face.shape != c_face.shape[:2]:
        raise ValueError(f"face opacity {a_face.shape} does not match image {c_face.shape[:2]}")
    if np.any(a_face < -ALPHA_TOLERANCE) or np.any(a_face > 1.0 + ALPHA_TOLERANCE):
        raise ValueError("face opacity lies outside [0, 1]")


def fuse_head(c_face: np.ndarray, a_face: np.ndarray, c_mouth: np.ndarray) -> np.ndarray:
    _check_fusion_inputs(c_face, a_face, c_mouth)
    a = a_face[..., None]
    return c_face * a + c_mouth * (1.0 - a)


def fuse_head_backward(
    grad_head: np.ndarray, c_face: np.ndarray, a_face: np.ndarray, c_mouth: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dL/dC_face, dL/dA_face, dL/dC_mouth)."""
    a = a_face[..., None]
    return grad_head * a, np.sum(grad_head * (c_face - c_mouth), axis=-1), grad_head * (1.0 - a)


def unpremultiply(color: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    safe = np.where(alpha > 0.0, alpha, 1.0)[..., None]
    return np.where(alpha[..., None] > 0.0, color / safe, 0.0)


@dataclass
class BranchRender:
    output: RenderOutput
    field_output: FieldOutput


@dataclass
class FusedFrame:
    color: np.ndarray
    face_alpha: np.ndarray
    face: BranchRender
    mouth: Optional[BranchRender]


def render_branch(
    branch: BranchModel,
    camera: Camera,
    condition: ConditionVector,
    settings: RasterSettings,
    background: Optional[np.ndarray] = None,
) -> BranchRender:
    """Deform the canonical field for one condition and render it."""
    field = branch.field
    field_output = branch.motion.evaluate(field.means, condition)
    deformed = apply_deformation(field, field_output.delta)
    deformed, colors = apply_hybrid_modification(deformed, field_output.modification)
    output = render_forward(deformed, camera, settings, background=background, colors=colors)
    return BranchRender(output=output, field_output=field_output)


def render_head(
    model: TalkingHeadModel,
    camera: Camera,
    condition: ConditionVector,
    settings: Optional[RasterSettings] = None,
) -> FusedFrame:
    settings = settings or RasterSettings()
    if model.single_branch:
        face = render_branch(model.face, camera, condition, settings, model.background)
        return FusedFrame(color=face.output.color, face_alpha=face.output.alpha, face=face, mouth=None)

    face = render_branch(model.face, camera, condition, settings)
    mouth = render_branch(model.mouth, camera, condition, settings, model.background)
    a_face = face.output.alpha
    color = fuse_head(unpremultiply(face.output.color, a_face), a_face, mouth.output.color)
    return FusedFrame(color=color, face_alpha=a_face, face=face, mouth=mouth)


def render_head_backward(frame: FusedFrame, grad_color: np.ndarray) -> Dict[str, RasterGradients]:
    """Raster gradients per branch for an upstream gradient on the fused frame."""
    if frame.mouth is None:
        return {"face": render_backward(frame.face.output, grad_color)}
    c_mouth = frame.mouth.output.color
    a = frame.face_alpha
    # with the premultiplied face render: C_head = C_raw + (1 - A) C_mouth
    grad_alpha = -np.sum(grad_color * c_mouth, axis=-1)
    return {
        "face": render_backward(frame.face.output, grad_color, grad_alpha),
        "mouth": render_backward(frame.mouth.output, grad_color * (1.0 - a)[..., None]),
    }


@dataclass
class SequenceResult:
    colors: List[np.ndarray]
    face_alphas: List[np.ndarray]
    records: List[Dict[str, Any]]
    summary: Dict[str, Any]


def render_sequence(
    model: TalkingHeadModel,
    cameras: Sequence[Camera],
    conditions: Sequence[ConditionVector],
    settings: Optional[RasterSettings] = None,
    out_dir: Optional[Path] = None,
    targets: Optional[Sequence[np.ndarray]] = None,
    mouth_masks: Optional[Sequence[np.ndarray]] = None,
    frame_ids: Optional[Sequence[int]] = None,
    emit_alpha: bool = False,
    workers: int = 1,
    verbose: bool = True,
) -> SequenceResult:
    """Render a camera/condition track; frames render in parallel and are written in order."""
    if len(cameras) != len(conditions):
        raise ValueError(f"camera track has {len(cameras)} frames but condition track has {len(conditions)}")
    if not cameras:
        raise ValueError("track is empty")
    if targets is not None and len(targets) != len(cameras):
        raise ValueError("ground-truth frame count does not match the track length")
    settings = settings or RasterSettings()
    frame_ids = list(frame_ids) if frame_ids is not None else list(range(len(cameras)))

    def _render(i: int) -> Tuple[np.ndarray, np.ndarray]:
        fused = render_head(model, cameras[i], conditions[i], settings)
        return fused.color, fused.face_alpha

    if verbose:
        print(f"🎬 Rendering {len(cameras)} frames with {max(1, workers)} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        rendered = list(executor.map(_render, range(len(cameras))))
    colors = [c for c, _ in rendered]
    alphas = [a for _, a in rendered]

    records: List[Dict[str, Any]] = []
    if targets is not None:
        for i, color in enumerate(colors):
            mask = mouth_masks[i] if mouth_masks is not None else None
            records.append(frame_metrics(frame_ids[i], color, targets[i], mask))
    summary = summarize(records) if records else {"frames": len(colors)}

    if out_dir is not None:
        out = Path(out_dir)
        for i, color in enumerate(colors):
            write_png(out / "frames" / f"{i:05d}.png", color)
            if emit_alpha:
                write_alpha(out / "alpha" / f"{i:05d}.f32", alphas[i])
        if records:
            write_jsonl(out / "metrics.jsonl", records)
            (out / "summary.json").write_bytes(orjson.dumps(summary, option=orjson.OPT_INDENT_2))
        if verbose:
            print(f"✅ Wrote {len(colors)} frames to {out / 'frames'}")
    return SequenceResult(colors=colors, face_alphas=alphas, records=records, summary=summary)
