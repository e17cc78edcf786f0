"""
Central finite-difference checks of every analytic gradient.

Each suite builds random seeded configurations, defines a scalar loss as a
random linear functional of the component's output, and compares the
analytic gradient with (f(x + h) - f(x - h)) / 2h at sampled entries of every
trainable tensor. Half the samples come from entries whose analytic
magnitude is at least 1% of the tensor's largest, the rest uniformly from
all others.
"""
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from src.core.gaussians import BranchTag, DeformationDelta
from src.losses.image_losses import (
    dssim_loss,
    dssim_loss_grad,
    l1_loss,
    l1_loss_grad,
    perceptual_loss,
    perceptual_loss_grad,
)
from src.motion_fields.branch import ConditionVector, FieldConfig, HybridMode, MotionFieldBranch, field_backward
from src.motion_fields.hash_encoder import BoundingBox, EncoderConfig
from src.rasterizer.backward import render_backward
from src.rasterizer.forward import render_forward
from src.rasterizer.settings import RasterSettings
from src.verification.scenes import random_camera, random_field

SUITES = ("raster", "fields", "losses")
SIGNIFICANT = 1e-2
PRECISION = {
    "double": {"dtype": np.float64, "step": 1e-5, "tolerance": 1e-6},
    "single": {"dtype": np.float32, "step": 1e-3, "tolerance": 5e-2},
}

# (tensors, analytic gradients, loss closure)
Case = Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], Callable[[], float]]


def central_difference(loss: Callable[[], float], tensor: np.ndarray, index: tuple, step: float) -> float:
    """Perturbs tensor[index] in place and restores it."""
    original = tensor[index].copy()
    tensor[index] = original + step
    plus = loss()
    tensor[index] = original - step
    minus = loss()
    tensor[index] = original
    return (plus - minus) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 0.0) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return 0.0 if scale == 0.0 else abs(analytic - numeric) / scale


def sample_entries(analytic: np.ndarray, rng: np.random.Generator, samples: int) -> np.ndarray:
    """Half the picks among significant entries, the rest uniformly over all remaining ones."""
    magnitude = np.abs(analytic).reshape(-1)
    peak = magnitude.max() if magnitude.size else 0.0
    significant = np.flatnonzero(magnitude >= SIGNIFICANT * peak) if peak > 0.0 else np.empty(0, dtype=np.int64)
    first = rng.choice(significant, size=min((samples + 1) // 2, significant.size), replace=False)
    rest = np.setdiff1d(np.arange(magnitude.size), first)
    second = rng.choice(rest, size=min(samples - first.size, rest.size), replace=False)
    return np.concatenate([first, second]).astype(np.int64)


def check_tensor(
    loss: Callable[[], float],
    tensor: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    samples: int,
    step: float,
) -> Tuple[int, float]:
    """(entries checked, max relative error) over sampled entries.

    Errors are relative to the larger of the two values, floored at 1% of
    the largest analytic entry. An analytic zero where the loss still moves
    scores 1.
    """
    peak = float(np.abs(analytic).max()) if analytic.size else 0.0
    picks = sample_entries(analytic, rng, samples)
    worst = 0.0
    for flat in picks:
        index = np.unravel_index(flat, tensor.shape)
        numeric = central_difference(loss, tensor, index, step)
        worst = max(worst, relative_error(float(analytic[index]), numeric, SIGNIFICANT * peak))
    return len(picks), worst


@dataclass
class GradCheckResult:
    suite: str
    parameter: str
    cases: int
    checked: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


# --- cases ------------------------------------------------------------------

def raster_case(rng: np.random.Generator, dtype, colour_override: bool = False) -> Case:
    # no early stop and a vanishing skip threshold keep the loss smooth in every parameter
    settings = RasterSettings(alpha_skip=1e-15, early_termination=False, workers=1)
    field = random_field(rng, int(rng.integers(3, 9)), sh_degree=int(rng.integers(0, 3)), dtype=dtype)
    camera = random_camera(rng, size=24)
    background = rng.uniform(0.0, 1.0, size=3)
    pixels = camera.width * camera.height
    w_color = rng.normal(size=(camera.height, camera.width, 3)) / pixels
    w_alpha = rng.normal(size=(camera.height, camera.width)) / pixels
    colors = rng.uniform(0.2, 0.9, size=(len(field), 3)).astype(dtype) if colour_override else None

    def loss() -> float:
        out = render_forward(field, camera, settings, background, colors)
        return float(np.sum(w_color * out.color) + np.sum(w_alpha * out.alpha))

    grads = render_backward(render_forward(field, camera, settings, background, colors), w_color, w_alpha)
    tensors, analytic = field.parameters(), grads.parameters()
    if colour_override:
        tensors = {"colors": colors}
        analytic = {"colors": grads.colors}
    return tensors, analytic, loss


def field_case(rng: np.random.Generator, dtype, kind: BranchTag, hybrid: HybridMode = HybridMode.NONE) -> Case:
    config = FieldConfig(
        kind=kind,
        audio_dim=4,
        expr_dim=3,
        encoder=EncoderConfig(levels=3, features=2, log2_table_size=8, base_resolution=8),
        bbox=BoundingBox(),
        attention_resolution=6,
        hidden=8,
        depth=2,
        hybrid=hybrid,
    )
    branch = MotionFieldBranch(config, rng, dtype)
    for value in branch.parameters().values():
        value[...] = rng.normal(0.0, 0.5, size=value.shape)
    count = int(rng.integers(4, 12))
    means = rng.uniform(-0.8, 0.8, size=(count, 3)).astype(dtype)
    condition = ConditionVector(rng.normal(size=4), rng.uniform(size=3))

    weights = DeformationDelta(rng.normal(size=(count, 3)), rng.normal(size=(count, 3)), rng.normal(size=(count, 4)))
    w_opacity = rng.normal(size=count) if hybrid != HybridMode.NONE else None
    w_colors = rng.normal(size=(count, 3)) if hybrid == HybridMode.OPACITY_RGB else None

    def loss() -> float:
        out = branch.evaluate(means, condition)
        total = np.sum(weights.d_means * out.delta.d_means)
        total += np.sum(weights.d_scales * out.delta.d_scales) + np.sum(weights.d_rotations * out.delta.d_rotations)
        if w_opacity is not None:
            total += np.sum(w_opacity * out.modification.d_opacities)
        if w_colors is not None:
            total += np.sum(w_colors * out.modification.colors)
        return float(total)

    traced = branch.evaluate(means, condition)
    grads = field_backward(branch, traced.trace, weights, w_opacity, w_colors)
    tensors = {**branch.parameters(), "positions": means}
    analytic = {**grads.params, "positions": grads.positions}
    return tensors, analytic, loss


def loss_cases(rng: np.random.Generator, dtype) -> Dict[str, Case]:
    size = 24
    a = rng.uniform(0.1, 0.9, size=(size, size, 3)).astype(dtype)
    # keep |a - b| away from the L1 kink
    b = (a + rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.02, 0.1, size=a.shape)).astype(dtype)
    mask = rng.random((size, size)) < 0.5
    pairs = {
        "l1": (l1_loss, l1_loss_grad),
        "dssim": (dssim_loss, dssim_loss_grad),
        "masked_dssim": (lambda x, y: dssim_loss(x, y, mask), lambda x, y: dssim_loss_grad(x, y, mask)),
        "perceptual": (perceptual_loss, perceptual_loss_grad),
    }
    return {
        name: ({"image": a}, {"image": grad(a, b)}, lambda fn=fn: float(fn(a, b)))
        for name, (fn, grad) in pairs.items()
    }


# --- suites -----------------------------------------------------------------

def _parameter_class(name: str) -> str:
    return name.split(".", 1)[0] if name.startswith("decoder.") else name


def _suite_cases(suite: str, rng: np.random.Generator, dtype, config: int) -> Iterable[Tuple[str, Case]]:
    if suite == "raster":
        yield "", raster_case(rng, dtype)
        if config % 4 == 0:
            yield "", raster_case(rng, dtype, colour_override=True)
    elif suite == "fields":
        hybrid = list(HybridMode)[config % len(HybridMode)]
        yield "face/", field_case(rng, dtype, BranchTag.FACE, hybrid)
        yield "mouth/", field_case(rng, dtype, BranchTag.MOUTH)
    elif suite == "losses":
        for name, case in loss_cases(rng, dtype).items():
            yield f"{name}/", case
    else:
        raise ValueError(f"unknown gradcheck module '{suite}', expected one of {SUITES}")


def run_gradcheck(
    modules: Iterable[str] = SUITES,
    precision: str = "double",
    configs: int = 20,
    samples: int = 20,
    seed: int = 0,
) -> List[GradCheckResult]:
    if precision not in PRECISION:
        raise ValueError(f"precision must be one of {sorted(PRECISION)}")
    setup = PRECISION[precision]
    results: List[GradCheckResult] = []
    for suite in modules:
        checked: Dict[str, int] = defaultdict(int)
        cases: Dict[str, int] = defaultdict(int)
        worst: Dict[str, float] = defaultdict(float)
        for config in range(configs):
            rng = np.random.default_rng([seed, SUITES.index(suite) if suite in SUITES else 99, config])
            for prefix, (tensors, analytic, loss) in _suite_cases(suite, rng, setup["dtype"], config):
                for name, tensor in tensors.items():
                    key = prefix + _parameter_class(name)
                    n, err = check_tensor(loss, tensor, analytic[name], rng, samples, setup["step"])
                    cases[key] += 1
                    checked[key] += n
                    worst[key] = max(worst[key], err)
        for key in sorted(cases):
            results.append(GradCheckResult(suite, key, cases[key], checked[key], worst[key], setup["tolerance"]))
    return results
