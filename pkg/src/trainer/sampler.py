"""
Training-frame scheduling with incremental sampling.

On iterations k with k mod K == 0 a frame is drawn uniformly from those whose
metric lies in the sliding window [B_lower + k*T, B_upper + k*T] (on 1 - m for
descending configs). All other iterations, and IS iterations whose window is
empty, take the uniform draw. Uniform and IS draws use separate random
streams, so toggling IS only changes the frames of IS iterations.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.trainer.config import Direction, IncrementalSamplerConfig


def sampling_window(cfg: IncrementalSamplerConfig, k: int, stage_iterations: int) -> Tuple[float, float]:
    step = cfg.resolved_step(stage_iterations)
    return cfg.b_lower + k * step, cfg.b_upper + k * step


def incremental_sample(
    metrics: np.ndarray,
    k: int,
    cfg: IncrementalSamplerConfig,
    rng: np.random.Generator,
    stage_iterations: int = 0,
) -> Optional[int]:
    """Position (into `metrics`) of a frame inside the window, or None when the window is empty."""
    lo, hi = sampling_window(cfg, k, stage_iterations)
    values = np.asarray(metrics, dtype=np.float64)
    if cfg.direction == Direction.DESCENDING:
        values = 1.0 - values
    eligible = np.flatnonzero((values >= lo) & (values <= hi))
    if eligible.size == 0:
        return None
    return int(eligible[rng.integers(eligible.size)])


class FrameScheduler:
    """Per-branch frame picker over a fixed list of training frames."""

    def __init__(
        self,
        frames: List[int],
        metrics: Dict[str, np.ndarray],
        samplers: List[IncrementalSamplerConfig],
        stage_iterations: int,
        seed_sequence: np.random.SeedSequence,
        enabled: bool = True,
    ):
        if not frames:
            raise ValueError("frame scheduler needs at least one training frame")
        for cfg in samplers:
            if cfg.metric not in metrics:
                raise ValueError(f"sampler metric '{cfg.metric}' is not present in the dataset")
        self.frames = list(frames)
        self.metrics = metrics
        self.samplers = samplers
        self.stage_iterations = stage_iterations
        self.enabled = enabled and bool(samplers)
        uniform_seed, is_seed = seed_sequence.spawn(2)
        self.uniform_rng = np.random.default_rng(uniform_seed)
        self.is_rng = np.random.default_rng(is_seed)

    @property
    def cadence(self) -> int:
        return self.samplers[0].every if self.samplers else 1

    def is_iteration(self, k: int) -> bool:
        return self.enabled and k % self.cadence == 0

    def next_frame(self, k: int) -> Tuple[int, Optional[Tuple[float, float]]]:
        """Returns (frame id, window) where window is None for uniform draws."""
        uniform = self.frames[int(self.uniform_rng.integers(len(self.frames)))]
        if not self.is_iteration(k):
            return uniform, None
        cfg = self.samplers[(k // self.cadence) % len(self.samplers)]
        pos = incremental_sample(self.metrics[cfg.metric], k, cfg, self.is_rng, self.stage_iterations)
        if pos is None:
            return uniform, None
        lo, hi = sampling_window(cfg, k, self.stage_iterations)
        if cfg.direction == Direction.DESCENDING:
            lo, hi = 1.0 - hi, 1.0 - lo
        return self.frames[pos], (lo, hi)
