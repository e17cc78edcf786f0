import math
import os

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

load_dotenv()
DEFAULT_WORKERS = max(1, int(os.environ.get("GAUSS_TALK_THREADS", "1")))


class RasterSettings(BaseModel):
    tile_size: int = Field(default=16, ge=1)
    alpha_skip: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    early_termination: bool = True
    dilation: float = Field(default=0.3, ge=0.0)
    workers: int = Field(default=DEFAULT_WORKERS, ge=1)

    @field_validator("alpha_skip", "transmittance_floor")
    @classmethod
    def _positive_threshold(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("thresholds must lie in (0, 1)")
        return v

    @property
    def footprint_sigmas(self) -> float:
        """Radius multiplier (in standard deviations) that encloses every unskipped contribution."""
        return max(3.0, math.sqrt(2.0 * math.log(1.0 / self.alpha_skip)))
