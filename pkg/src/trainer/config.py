from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import orjson
from pydantic import BaseModel, Field, field_validator, model_validator

from src.losses.image_losses import LossWeights
from src.motion_fields.branch import HybridMode
from src.motion_fields.hash_encoder import EncoderConfig
from src.rasterizer.settings import RasterSettings


class Direction(str, Enum):
    ASCENDING = "ascending"
    DESCENDING = "descending"


class IncrementalSamplerConfig(BaseModel):
    metric: str
    b_lower: float = 0.0
    b_upper: float = 0.15
    step: Optional[float] = Field(default=None, ge=0.0)  # None: 1 / (0.7 * stage iterations)
    every: int = Field(default=5, ge=1)
    direction: Direction = Direction.ASCENDING

    @model_validator(mode="after")
    def _window_ordered(self):
        if self.b_lower > self.b_upper:
            raise ValueError(f"sampler '{self.metric}': B_lower {self.b_lower} exceeds B_upper {self.b_upper}")
        return self

    def resolved_step(self, stage_iterations: int) -> float:
        if self.step is not None:
            return self.step
        return 1.0 / (0.7 * max(stage_iterations, 1))


class DensifyConfig(BaseModel):
    grad_threshold: float = Field(default=2e-4, gt=0.0)
    interval: int = Field(default=100, ge=1)
    opacity_threshold: float = Field(default=0.005, gt=0.0)
    max_screen_size: Optional[float] = Field(default=None, gt=0.0)
    max_world_scale: Optional[float] = Field(default=None, gt=0.0)  # of the scene extent
    start_iteration: int = Field(default=100, ge=0)
    stop_fraction: float = Field(default=0.6, ge=0.0, le=1.0)  # of the motion stage
    percent_dense: float = Field(default=0.01, gt=0.0)
    max_primitives: int = Field(default=4000, ge=1)
    split_children: int = Field(default=2, ge=2)
    split_scale_divisor: float = Field(default=1.6, gt=1.0)


class LearningRates(BaseModel):
    means_init: float = 1.6e-4
    means_final: float = 1.6e-6
    scales: float = 5e-3
    rotations: float = 1e-3
    opacities: float = 5e-2
    sh: float = 2.5e-3
    sh_rest_divisor: float = 20.0
    encoder: float = 1e-2
    attention: float = 1e-2
    decoder: float = 1e-3
    weight_decay: float = 1e-6  # AdamW decay on decoder weights

    @field_validator("*")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("learning rates must be non-negative")
        return v


class BranchSchedule(BaseModel):
    initial_primitives: int = Field(default=400, ge=1)
    samplers: List[IncrementalSamplerConfig] = Field(default_factory=list)
    use_incremental_sampling: bool = True


def _default_branches() -> Dict[str, BranchSchedule]:
    return {
        "face": BranchSchedule(
            initial_primitives=600,
            samplers=[
                IncrementalSamplerConfig(metric="lips_open"),
                IncrementalSamplerConfig(metric="blink"),
            ],
        ),
        "mouth": BranchSchedule(
            initial_primitives=200,
            samplers=[IncrementalSamplerConfig(metric="teeth_visible")],
        ),
    }


class TrainSchedule(BaseModel):
    static_iterations: int = Field(default=1000, ge=0)
    motion_iterations: int = Field(default=5000, ge=0)
    finetune_iterations: int = Field(default=1000, ge=0)
    precision: str = "single"
    seed: int = 0
    sh_degree: int = Field(default=1, ge=0, le=3)
    lr: LearningRates = Field(default_factory=LearningRates)
    loss: LossWeights = Field(default_factory=LossWeights)
    densify: DensifyConfig = Field(default_factory=DensifyConfig)
    raster: RasterSettings = Field(default_factory=RasterSettings)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    hybrid: HybridMode = HybridMode.NONE
    branches: Dict[str, BranchSchedule] = Field(default_factory=_default_branches)
    log_every: int = Field(default=10, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)  # 0 disables intermediate checkpoints
    parallel_branches: bool = False  # train face and mouth concurrently in stages 1-2
    verbose: bool = True

    @field_validator("precision")
    @classmethod
    def _precision(cls, v: str) -> str:
        if v not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        return v

    @field_validator("branches")
    @classmethod
    def _both_branches(cls, v: Dict[str, BranchSchedule]) -> Dict[str, BranchSchedule]:
        missing = {"face", "mouth"} - set(v)
        if missing:
            raise ValueError(f"branch schedules missing for {sorted(missing)}")
        return v

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def densify_stop(self) -> int:
        return int(self.densify.stop_fraction * self.motion_iterations)


def load_schedule(path: Optional[Path] = None, **overrides) -> TrainSchedule:
    """Schedule from a JSON file; absent keys keep the desk-scale defaults."""
    data = {}
    if path is not None:
        data = orjson.loads(Path(path).read_bytes())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainSchedule.model_validate(data)
