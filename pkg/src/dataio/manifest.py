from pathlib import Path
from typing import Dict, List

import numpy as np
import orjson
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.core.camera import Camera

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


class Intrinsics(BaseModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    near: float = Field(default=0.2, gt=0)


class Extrinsics(BaseModel):
    rotation: List[List[float]]
    translation: List[float]


class FrameRecord(BaseModel):
    index: int = Field(ge=0)
    frame: str
    face_mask: str
    mouth_mask: str
    extrinsics: Extrinsics


class CondFiles(BaseModel):
    audio: str = "cond/a.bin"
    expression: str = "cond/e.bin"
    metrics: str = "cond/m.json"


class SceneBox(BaseModel):
    lower: List[float]
    upper: List[float]


class DatasetManifest(BaseModel):
    version: int = MANIFEST_VERSION
    frame_count: int = Field(ge=0)
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    background: List[float]
    intrinsics: Intrinsics
    scene_bbox: SceneBox
    audio_dim: int = Field(ge=1)
    expr_dim: int = Field(ge=1)
    metric_names: List[str]
    cond: CondFiles = Field(default_factory=CondFiles)
    frames: List[FrameRecord]
    train: List[int]
    test: List[int]

    @field_validator("background")
    @classmethod
    def _background(cls, v: List[float]) -> List[float]:
        if len(v) != 3 or any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError("background must be an RGB triple in [0, 1]")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.frames) != self.frame_count:
            raise ValueError(f"frame_count {self.frame_count} but {len(self.frames)} frame records")
        if [r.index for r in self.frames] != list(range(self.frame_count)):
            raise ValueError("frame records must be indexed 0..frame_count-1 in order")
        if self.intrinsics.width != self.width or self.intrinsics.height != self.height:
            raise ValueError("intrinsics image size differs from the manifest image size")
        for name, split in (("train", self.train), ("test", self.test)):
            bad = [i for i in split if not 0 <= i < self.frame_count]
            if bad:
                raise ValueError(f"{name} split references missing frames {bad[:5]}")
        return self

    def camera(self, record: FrameRecord) -> Camera:
        k = self.intrinsics
        return Camera(
            rotation=np.asarray(record.extrinsics.rotation),
            translation=np.asarray(record.extrinsics.translation),
            fx=k.fx,
            fy=k.fy,
            cx=k.cx,
            cy=k.cy,
            width=k.width,
            height=k.height,
            near=k.near,
        )

    def write(self, path: Path) -> None:
        Path(path).write_bytes(orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_INDENT_2))

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"{path}: manifest not found")
        try:
            return cls.model_validate(orjson.loads(path.read_bytes()))
        except orjson.JSONDecodeError as e:
            raise DatasetError(f"{path}: manifest is not valid JSON ({e})") from e
        except ValidationError as e:
            raise DatasetError(f"{path}: malformed manifest record ({e.errors()[0]['loc']}: {e.errors()[0]['msg']})") from e


class SynthSceneSpec(BaseModel):
    """Procedural talking-head scene."""

    seed: int = 0
    face_primitives: int = Field(default=420, ge=48)
    mouth_primitives: int = Field(default=90, ge=16)
    jaw_amplitude: float = Field(default=0.16, ge=0.0)
    blink_amplitude: float = Field(default=1.0, ge=0.0)
    teeth_follow: float = Field(default=0.6, ge=0.0)  # lower teeth move this fraction of the jaw
    condition_gain: float = Field(default=1.5, ge=0.0)
    frame_count: int = Field(default=60, ge=1)
    width: int = Field(default=64, ge=16)
    height: int = Field(default=64, ge=16)
    focal: float = Field(default=80.0, gt=0.0)
    camera_distance: float = Field(default=4.0, gt=1.0)
    orbit_yaw_deg: float = 6.0
    orbit_pitch_deg: float = 0.0
    orbit_period: float = Field(default=40.0, gt=0.0)
    audio_dim: int = Field(default=16, ge=4)
    expr_dim: int = Field(default=7, ge=1)
    background: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    test_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)

    @classmethod
    def from_file(cls, path: Path) -> "SynthSceneSpec":
        return cls.model_validate(orjson.loads(Path(path).read_bytes()))


def metric_table(metrics: Dict[str, List[float]], names: List[str], frame_count: int) -> Dict[str, np.ndarray]:
    table = {}
    for name in names:
        if name not in metrics:
            raise DatasetError(f"metric '{name}' missing from the metrics file")
        values = np.asarray(metrics[name], dtype=np.float64)
        if values.shape != (frame_count,):
            raise DatasetError(f"metric '{name}' has {values.size} values, expected {frame_count}")
        if np.any((values < 0.0) | (values > 1.0)) or not np.all(np.isfinite(values)):
            raise DatasetError(f"metric '{name}' has values outside [0, 1]")
        table[name] = values
    return table
