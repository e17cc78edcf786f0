"""
Tile renderer vs. the naive per-pixel compositor on random scenes.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np
from tqdm import tqdm

from src.rasterizer.forward import render_forward, render_naive
from src.rasterizer.settings import DEFAULT_WORKERS, RasterSettings
from src.verification.scenes import random_camera, random_field


@dataclass
class OracleReport:
    scenes: int
    max_color_error: float = 0.0
    max_alpha_error: float = 0.0
    tolerance: float = 1e-5
    failures: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "scenes": self.scenes,
            "max_color_error": self.max_color_error,
            "max_alpha_error": self.max_alpha_error,
            "tolerance": self.tolerance,
            "failures": self.failures,
            "passed": self.passed,
        }


def oracle_check(
    scenes: int = 100,
    seed: int = 0,
    max_primitives: int = 200,
    size: int = 64,
    tolerance: float = 1e-5,
    workers: int = DEFAULT_WORKERS,
    verbose: bool = True,
) -> OracleReport:
    settings = RasterSettings(early_termination=False, workers=workers)
    report = OracleReport(scenes=scenes, tolerance=tolerance)
    for i in tqdm(range(scenes), desc="oracle", disable=not verbose):
        rng = np.random.default_rng([seed, i])
        count = int(rng.integers(1, max_primitives + 1))
        scene = random_field(rng, count, sh_degree=int(rng.integers(0, 4)), spread=1.0, scale_range=(0.02, 0.3))
        camera = random_camera(rng, size=size)
        tiled = render_forward(scene, camera, settings)
        naive = render_naive(scene, camera, settings)
        color_err = float(np.max(np.abs(tiled.color - naive.color)))
        alpha_err = float(np.max(np.abs(tiled.alpha - naive.alpha)))
        report.max_color_error = max(report.max_color_error, color_err)
        report.max_alpha_error = max(report.max_alpha_error, alpha_err)
        if color_err > tolerance or alpha_err > tolerance:
            report.failures.append(i)
    if verbose:
        status = "✅" if report.passed else "❌"
        print(f"{status} Oracle check: {scenes} scenes, max |dC| = {report.max_color_error:.3e}, "
              f"max |dA| = {report.max_alpha_error:.3e}")
    return report
