"""
Driving tracks: per-frame camera pose plus audio and expression features, no images.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import orjson
from pydantic import BaseModel, ValidationError

from src.core.camera import Camera
from src.dataio.manifest import DatasetError, DatasetManifest, Intrinsics
from src.motion_fields.branch import ConditionVector


class TrackFrame(BaseModel):
    rotation: List[List[float]]
    translation: List[float]
    a: List[float]
    e: List[float]


class TrackFile(BaseModel):
    intrinsics: Intrinsics
    frames: List[TrackFrame]


@dataclass
class DrivingTrack:
    cameras: List[Camera]
    conditions: List[ConditionVector]

    def __len__(self) -> int:
        return len(self.cameras)


def write_track(
    path: Path,
    manifest: DatasetManifest,
    audio: np.ndarray,
    expression: np.ndarray,
    frames: Sequence[int],
) -> None:
    track = TrackFile(
        intrinsics=manifest.intrinsics,
        frames=[
            TrackFrame(
                rotation=manifest.frames[i].extrinsics.rotation,
                translation=manifest.frames[i].extrinsics.translation,
                # stored at the precision the dataset condition blobs carry
                a=audio[i].astype("<f4").astype(np.float64).tolist(),
                e=expression[i].astype("<f4").astype(np.float64).tolist(),
            )
            for i in frames
        ],
    )
    Path(path).write_bytes(orjson.dumps(track.model_dump(mode="json"), option=orjson.OPT_INDENT_2))


def load_track(path: Path, audio_dim: int, expr_dim: int, metrics: Optional[dict] = None) -> DrivingTrack:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: track not found")
    try:
        track = TrackFile.model_validate(orjson.loads(path.read_bytes()))
    except orjson.JSONDecodeError as e:
        raise DatasetError(f"{path}: track is not valid JSON ({e})") from e
    except ValidationError as e:
        raise DatasetError(f"{path}: malformed track ({e.errors()[0]['loc']}: {e.errors()[0]['msg']})") from e

    k = track.intrinsics
    cameras, conditions = [], []
    for i, frame in enumerate(track.frames):
        if len(frame.a) != audio_dim or len(frame.e) != expr_dim:
            raise DatasetError(
                f"{path}: frame {i} has a/e sizes {len(frame.a)}/{len(frame.e)}, model expects {audio_dim}/{expr_dim}"
            )
        try:
            cameras.append(
                Camera(
                    rotation=np.asarray(frame.rotation),
                    translation=np.asarray(frame.translation),
                    fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy,
                    width=k.width, height=k.height, near=k.near,
                )
            )
            conditions.append(ConditionVector(np.asarray(frame.a), np.asarray(frame.e), dict(metrics or {})))
        except ValueError as e:
            raise DatasetError(f"{path}: frame {i}: {e}") from e
    return DrivingTrack(cameras=cameras, conditions=conditions)


def track_from_dataset(dataset, frames: Sequence[int]) -> DrivingTrack:
    return DrivingTrack(
        cameras=[dataset.cameras[i] for i in frames],
        conditions=[dataset.conditions[i] for i in frames],
    )
