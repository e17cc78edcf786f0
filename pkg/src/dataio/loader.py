from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import orjson

from src.core.camera import Camera
from src.core.gaussians import BranchTag
from src.dataio.images import read_png
from src.dataio.manifest import DatasetError, DatasetManifest, metric_table
from src.motion_fields.branch import ConditionVector
from src.rasterizer.settings import DEFAULT_WORKERS


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    frames: np.ndarray        # (F, H, W, 3) float64 in [0, 1]
    face_masks: np.ndarray    # (F, H, W) bool
    mouth_masks: np.ndarray   # (F, H, W) bool
    cameras: List[Camera]
    conditions: List[ConditionVector]
    metrics: Dict[str, np.ndarray]
    face_targets: np.ndarray
    mouth_targets: np.ndarray

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.manifest.background, dtype=np.float64)

    @property
    def train_indices(self) -> List[int]:
        return list(self.manifest.train)

    @property
    def test_indices(self) -> List[int]:
        return list(self.manifest.test)

    def split(self, name: str) -> List[int]:
        if name == "train":
            return self.train_indices
        if name == "test":
            return self.test_indices
        if name == "all":
            return list(range(self.manifest.frame_count))
        raise ValueError(f"unknown split '{name}'")

    def target(self, frame: int, branch: Optional[BranchTag]) -> np.ndarray:
        """Branch-masked target; None selects the full frame."""
        if branch is None:
            return self.frames[frame]
        if BranchTag(branch) == BranchTag.FACE:
            return self.face_targets[frame]
        return self.mouth_targets[frame]

    def loss_mask(self, frame: int, branch: Optional[BranchTag]) -> Optional[np.ndarray]:
        """Pixels a branch is trained on: the mouth mask, its complement for the face, None for every pixel."""
        if branch is None:
            return None
        if BranchTag(branch) == BranchTag.FACE:
            return ~self.mouth_masks[frame]
        return self.mouth_masks[frame]

    def metrics_for(self, frames: List[int]) -> Dict[str, np.ndarray]:
        return {name: values[frames] for name, values in self.metrics.items()}


def _read_blob(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path}: condition file not found")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != rows * cols:
        raise DatasetError(f"{path}: holds {data.size} floats, expected {rows}x{cols}")
    values = data.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{path}: contains non-finite values")
    return values


def _load_image(path: Path, size, mask: bool) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path}: file referenced by the manifest does not exist")
    pixels = read_png(path)
    width, height = size
    if pixels.shape[:2] != (height, width):
        raise DatasetError(f"{path}: image is {pixels.shape[1]}x{pixels.shape[0]}, expected {width}x{height}")
    if mask:
        if pixels.ndim == 3:
            pixels = pixels[..., 0]
        stray = np.setdiff1d(np.unique(pixels), [0, 255])
        if stray.size:
            raise DatasetError(f"{path}: mask is not binary (found value {int(stray[0])})")
        return pixels == 255
    if pixels.ndim != 3 or pixels.shape[2] < 3:
        raise DatasetError(f"{path}: frame must be an RGB image")
    return pixels[..., :3].astype(np.float64) / 255.0


def load_dataset(path: Path, workers: int = DEFAULT_WORKERS) -> Dataset:
    root = Path(path)
    manifest = DatasetManifest.read(root / "manifest.json")
    size = (manifest.width, manifest.height)
    print(f"📂 Loading dataset {root} ({manifest.frame_count} frames, {manifest.width}x{manifest.height})")

    jobs = []
    for record in manifest.frames:
        jobs.append((root / record.frame, False))
        jobs.append((root / record.face_mask, True))
        jobs.append((root / record.mouth_mask, True))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        decoded = list(executor.map(lambda job: _load_image(job[0], size, job[1]), jobs))

    count = manifest.frame_count
    h, w = manifest.height, manifest.width
    frames = np.stack(decoded[0::3]) if count else np.zeros((0, h, w, 3))
    face_masks = np.stack(decoded[1::3]) if count else np.zeros((0, h, w), dtype=bool)
    mouth_masks = np.stack(decoded[2::3]) if count else np.zeros((0, h, w), dtype=bool)

    audio = _read_blob(root / manifest.cond.audio, count, manifest.audio_dim)
    expression = _read_blob(root / manifest.cond.expression, count, manifest.expr_dim)
    metrics_path = root / manifest.cond.metrics
    if not metrics_path.exists():
        raise DatasetError(f"{metrics_path}: metrics file not found")
    try:
        raw_metrics = orjson.loads(metrics_path.read_bytes())
    except orjson.JSONDecodeError as e:
        raise DatasetError(f"{metrics_path}: not valid JSON ({e})") from e
    try:
        metrics = metric_table(raw_metrics, manifest.metric_names, count)
    except DatasetError as e:
        raise DatasetError(f"{metrics_path}: {e}") from e

    try:
        cameras = [manifest.camera(r) for r in manifest.frames]
    except ValueError as e:
        raise DatasetError(f"{root / 'manifest.json'}: invalid camera ({e})") from e
    conditions = [
        ConditionVector(audio[i], expression[i], {n: float(v[i]) for n, v in metrics.items()})
        for i in range(count)
    ]

    background = np.asarray(manifest.background, dtype=np.float64)
    mouth = mouth_masks[..., None]
    face_targets = np.where(mouth, background, frames)
    mouth_targets = np.where(mouth, frames, background)
    print(f"✅ Dataset ready: {len(manifest.train)} train / {len(manifest.test)} test frames")
    return Dataset(
        root=root,
        manifest=manifest,
        frames=frames,
        face_masks=face_masks,
        mouth_masks=mouth_masks,
        cameras=cameras,
        conditions=conditions,
        metrics=metrics,
        face_targets=face_targets,
        mouth_targets=mouth_targets,
    )
