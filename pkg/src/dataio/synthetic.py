"""
Procedural talking-head scenes.

The ground-truth head is a Gaussian face shell (front hemisphere of an
ellipsoid) with lips, eyes and eyelids, plus an inner mouth cavity with
upper and lower teeth. A jaw trace opens the lower face, the lower teeth
follow the jaw only partially, and a blink trace lowers the eyelids.
Frames are rendered with the reference compositor in double precision.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import orjson
from tqdm import tqdm

from src.core.camera import Camera, rotation_about_x, rotation_about_y
from src.core.gaussians import BranchTag, GaussianField, concatenate_fields, inverse_scale_activation, inverse_sigmoid
from src.core.sh import rgb_to_sh
from src.dataio.images import write_mask, write_png
from src.dataio.manifest import (
    CondFiles,
    DatasetManifest,
    Extrinsics,
    FrameRecord,
    Intrinsics,
    SceneBox,
    SynthSceneSpec,
)
from src.dataio.track import write_track
from src.rasterizer.forward import render_naive
from src.rasterizer.settings import RasterSettings

HEAD_RADII = np.array([0.75, 0.95, 0.62])
MOUTH_LINE = 0.38
JAW_FALLOFF = 0.25
SCENE_LOWER = [-1.0, -1.2, -1.0]
SCENE_UPPER = [1.0, 1.4, 0.4]
METRIC_NAMES = ["lips_open", "blink", "teeth_visible"]

SKIN = (0.86, 0.66, 0.55)
LIPS = (0.72, 0.32, 0.32)
EYE = (0.10, 0.10, 0.16)
LID = (0.78, 0.58, 0.48)
CAVITY = (0.38, 0.06, 0.09)
TEETH = (0.95, 0.94, 0.88)


def front_depth(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """z of the ellipsoid's camera-facing surface (negative z faces the camera)."""
    rx, ry, rz = HEAD_RADII
    inside = np.clip(1.0 - (x / rx) ** 2 - (y / ry) ** 2, 0.0, 1.0)
    return -rz * np.sqrt(inside)


@dataclass
class SyntheticHead:
    face: GaussianField
    mouth: GaussianField
    jaw_weight: np.ndarray    # per face primitive, fraction of the jaw displacement
    lid_rows: np.ndarray      # face primitives that move with the blink
    lower_teeth: np.ndarray   # mouth primitives that follow the jaw partially
    teeth_rows: np.ndarray    # all teeth primitives


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.means: List[np.ndarray] = []
        self.sigmas: List[np.ndarray] = []
        self.colors: List[np.ndarray] = []

    def add(self, means: np.ndarray, sigma: float, color) -> np.ndarray:
        start = sum(len(m) for m in self.means)
        self.means.append(np.asarray(means, dtype=np.float64))
        self.sigmas.append(np.full(len(means), sigma))
        jitter = self.rng.uniform(-0.03, 0.03, size=(len(means), 3))
        self.colors.append(np.clip(np.asarray(color) + jitter, 0.0, 1.0))
        return np.arange(start, start + len(means))

    def build(self, tag: BranchTag, opacity: float) -> GaussianField:
        means = np.concatenate(self.means)
        n = len(means)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        scales = np.repeat(inverse_scale_activation(np.concatenate(self.sigmas))[:, None], 3, axis=1)
        sh = rgb_to_sh(np.concatenate(self.colors))[:, None, :]
        opacities = np.full(n, inverse_sigmoid(opacity))
        return GaussianField(means, scales, rotations, opacities, sh, 0, tag)


def _row(x_lo: float, x_hi: float, y: float, count: int, depth_offset: float) -> np.ndarray:
    x = np.linspace(x_lo, x_hi, count)
    yy = np.full(count, y)
    return np.stack([x, yy, front_depth(x, yy) + depth_offset], axis=1)


def build_head(spec: SynthSceneSpec, rng: np.random.Generator) -> SyntheticHead:
    face = _Builder(rng)
    lip_count, eye_count, lid_count = 10, 3, 4
    shell_count = spec.face_primitives - 2 * lip_count - 2 * eye_count - 2 * lid_count
    if shell_count < 8:
        raise ValueError("face primitive budget too small for the synthetic head")

    # uniform points on the front hemisphere (golden-angle spiral)
    i = np.arange(shell_count) + 0.5
    z = -i / shell_count
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    shell = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1) * HEAD_RADII
    spacing = np.sqrt(2.0 * np.pi * np.mean(HEAD_RADII) ** 2 / shell_count)
    face.add(shell, 0.75 * spacing, SKIN)

    upper_lip = face.add(_row(-0.24, 0.24, MOUTH_LINE - 0.04, lip_count, -0.02), 0.04, LIPS)
    lower_lip = face.add(_row(-0.24, 0.24, MOUTH_LINE + 0.05, lip_count, -0.02), 0.04, LIPS)
    eyes, lids = [], []
    for side in (-1.0, 1.0):
        eyes.append(face.add(_row(side * 0.26 - 0.05, side * 0.26 + 0.05, -0.18, eye_count, -0.01), 0.04, EYE))
        lids.append(face.add(_row(side * 0.26 - 0.07, side * 0.26 + 0.07, -0.29, lid_count, -0.035), 0.045, LID))
    face_field = face.build(BranchTag.FACE, 0.98)

    means = face_field.means
    jaw_weight = np.where(means[:, 1] > MOUTH_LINE, np.exp(-(means[:, 0] / JAW_FALLOFF) ** 2), 0.0)
    jaw_weight[lower_lip] = np.exp(-(means[lower_lip, 0] / JAW_FALLOFF) ** 2)
    jaw_weight[upper_lip] = 0.0

    mouth = _Builder(rng)
    teeth_count = 6
    cavity_count = spec.mouth_primitives - 2 * teeth_count
    if cavity_count < 4:
        raise ValueError("mouth primitive budget too small for the synthetic cavity")
    cols = int(np.ceil(np.sqrt(cavity_count * 2.0)))
    grid = [(x, y) for y in np.linspace(MOUTH_LINE - 0.04, MOUTH_LINE + 0.24, max(cavity_count // cols + 1, 2))
            for x in np.linspace(-0.28, 0.28, cols)][:cavity_count]
    gx = np.array([g[0] for g in grid])
    gy = np.array([g[1] for g in grid])
    mouth.add(np.stack([gx, gy, front_depth(gx, gy) + 0.12], axis=1), 0.06, CAVITY)
    upper_teeth = mouth.add(_row(-0.15, 0.15, MOUTH_LINE + 0.02, teeth_count, 0.05), 0.03, TEETH)
    lower_teeth = mouth.add(_row(-0.15, 0.15, MOUTH_LINE + 0.09, teeth_count, 0.06), 0.03, TEETH)
    mouth_field = mouth.build(BranchTag.MOUTH, 0.98)

    return SyntheticHead(
        face=face_field,
        mouth=mouth_field,
        jaw_weight=jaw_weight,
        lid_rows=np.concatenate(lids),
        lower_teeth=lower_teeth,
        teeth_rows=np.concatenate([upper_teeth, lower_teeth]),
    )


def animate(head: SyntheticHead, jaw: float, blink: float, spec: SynthSceneSpec) -> Tuple[GaussianField, GaussianField]:
    face_means = head.face.means.copy()
    face_means[:, 1] += jaw * spec.jaw_amplitude * head.jaw_weight
    face_means[head.lid_rows, 1] += blink * spec.blink_amplitude * 0.11
    mouth_means = head.mouth.means.copy()
    mouth_means[head.lower_teeth, 1] += jaw * spec.jaw_amplitude * spec.teeth_follow
    return (
        head.face.with_parameters({"means": face_means}),
        head.mouth.with_parameters({"means": mouth_means}),
    )


def jaw_trace(spec: SynthSceneSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.frame_count, dtype=np.float64)
    p1, p2 = rng.uniform(7.0, 11.0), rng.uniform(20.0, 30.0)
    f1, f2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    syllable = (0.5 - 0.5 * np.cos(2.0 * np.pi * t / p1 + f1)) ** 1.5
    envelope = 0.65 + 0.35 * np.sin(2.0 * np.pi * t / p2 + f2)
    return np.clip(syllable * envelope, 0.0, 1.0)


def blink_trace(spec: SynthSceneSpec, rng: np.random.Generator) -> np.ndarray:
    trace = np.zeros(spec.frame_count)
    profile = np.array([0.35, 0.8, 1.0, 0.8, 0.35])
    start = int(rng.integers(2, 12))
    while start < spec.frame_count:
        end = min(start + len(profile), spec.frame_count)
        trace[start:end] = np.maximum(trace[start:end], profile[: end - start])
        start += int(rng.integers(14, 24))
    return trace


def normalized(trace: np.ndarray) -> np.ndarray:
    peak = trace.max() if trace.size else 0.0
    return trace / peak if peak > 0 else np.zeros_like(trace)


def condition_traces(
    spec: SynthSceneSpec, jaw: np.ndarray, blink: np.ndarray, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Audio-like features from the jaw trace and its neighbours, expression units led by the blink."""
    prev = np.concatenate([jaw[:1], jaw[:-1]])
    nxt = np.concatenate([jaw[1:], jaw[-1:]])
    basis = np.stack([jaw, prev, nxt, np.ones_like(jaw)], axis=1)
    mixing = rng.normal(0.0, 1.0, size=(spec.audio_dim, 4)) * spec.condition_gain
    audio = np.tanh(basis @ mixing.T)

    t = np.arange(spec.frame_count, dtype=np.float64)
    expression = np.zeros((spec.frame_count, spec.expr_dim))
    expression[:, 0] = blink
    for k in range(1, spec.expr_dim):
        period, phase = rng.uniform(15.0, 45.0), rng.uniform(0.0, 2.0 * np.pi)
        expression[:, k] = 0.5 + 0.25 * np.sin(2.0 * np.pi * t / period + phase)
    return audio, expression


def frame_camera(spec: SynthSceneSpec, t: int) -> Camera:
    angle = 2.0 * np.pi * t / spec.orbit_period
    yaw = np.deg2rad(spec.orbit_yaw_deg) * np.sin(angle)
    pitch = np.deg2rad(spec.orbit_pitch_deg) * np.cos(angle)
    return Camera(
        rotation=rotation_about_x(pitch) @ rotation_about_y(yaw),
        translation=np.array([0.0, 0.0, spec.camera_distance]),
        fx=spec.focal,
        fy=spec.focal,
        cx=(spec.width - 1) / 2.0,
        cy=(spec.height - 1) / 2.0,
        width=spec.width,
        height=spec.height,
    )


def membership_masks(
    face: GaussianField, mouth: GaussianField, teeth_rows: np.ndarray, camera: Camera, settings: RasterSettings
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(face mask, mouth mask, teeth-dominant mask) from a membership-colour render."""
    scene = concatenate_fields([face, mouth])
    labels = np.zeros((len(scene), 3))
    labels[: len(face), 0] = 1.0
    labels[len(face):, 1] = 1.0
    labels[len(face) + teeth_rows, 1] = 0.0
    labels[len(face) + teeth_rows, 2] = 1.0
    out = render_naive(scene, camera, settings, colors=labels)
    occupied = out.alpha >= 0.5
    inner = out.color[..., 1] + out.color[..., 2]
    mouth_mask = occupied & (inner > out.color[..., 0])
    face_mask = occupied & ~mouth_mask
    teeth = mouth_mask & (out.color[..., 2] > out.color[..., 1])
    return face_mask, mouth_mask, teeth


def generate_synthetic(spec: SynthSceneSpec, out_dir: Path, verbose: bool = True) -> DatasetManifest:
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    head = build_head(spec, rng)
    jaw = jaw_trace(spec, rng)
    blink = blink_trace(spec, rng)
    audio, expression = condition_traces(spec, jaw, blink, rng)
    background = np.asarray(spec.background, dtype=np.float64)
    settings = RasterSettings(workers=1)

    if verbose:
        print(f"🎭 Generating synthetic head: {len(head.face)} face + {len(head.mouth)} mouth primitives, "
              f"{spec.frame_count} frames at {spec.width}x{spec.height}")

    records, teeth_counts = [], []
    for t in tqdm(range(spec.frame_count), desc="synth", disable=not verbose):
        camera = frame_camera(spec, t)
        face_t, mouth_t = animate(head, jaw[t], blink[t], spec)
        scene = concatenate_fields([face_t, mouth_t])
        frame = render_naive(scene, camera, settings, background=background).color
        face_mask, mouth_mask, teeth = membership_masks(face_t, mouth_t, head.teeth_rows, camera, settings)
        teeth_counts.append(float(teeth.sum()))

        name = f"{t:05d}.png"
        write_png(out / "frames" / name, frame)
        write_mask(out / "masks_face" / name, face_mask)
        write_mask(out / "masks_mouth" / name, mouth_mask)
        records.append(
            FrameRecord(
                index=t,
                frame=f"frames/{name}",
                face_mask=f"masks_face/{name}",
                mouth_mask=f"masks_mouth/{name}",
                extrinsics=Extrinsics(rotation=camera.rotation.tolist(), translation=camera.translation.tolist()),
            )
        )

    metrics: Dict[str, List[float]] = {
        "lips_open": normalized(jaw).tolist(),
        "blink": normalized(blink).tolist(),
        "teeth_visible": normalized(np.asarray(teeth_counts)).tolist(),
    }
    cond = CondFiles()
    (out / "cond").mkdir(parents=True, exist_ok=True)
    (out / cond.audio).write_bytes(audio.astype("<f4").tobytes())
    (out / cond.expression).write_bytes(expression.astype("<f4").tobytes())
    (out / cond.metrics).write_bytes(orjson.dumps(metrics, option=orjson.OPT_INDENT_2))

    n_test = int(np.ceil(spec.test_fraction * spec.frame_count)) if spec.test_fraction > 0 else 0
    n_test = min(n_test, spec.frame_count - 1)
    split = spec.frame_count - n_test
    cam0 = frame_camera(spec, 0)
    manifest = DatasetManifest(
        frame_count=spec.frame_count,
        width=spec.width,
        height=spec.height,
        background=list(spec.background),
        intrinsics=Intrinsics(
            fx=cam0.fx, fy=cam0.fy, cx=cam0.cx, cy=cam0.cy, width=spec.width, height=spec.height, near=cam0.near
        ),
        scene_bbox=SceneBox(lower=SCENE_LOWER, upper=SCENE_UPPER),
        audio_dim=spec.audio_dim,
        expr_dim=spec.expr_dim,
        metric_names=METRIC_NAMES,
        cond=cond,
        frames=records,
        train=list(range(split)),
        test=list(range(split, spec.frame_count)),
    )
    manifest.write(out / "manifest.json")
    write_track(out / "track_test.json", manifest, audio, expression, manifest.test)
    if verbose:
        print(f"✅ Synthetic dataset written to {out} ({split} train / {n_test} test)")
    return manifest

