"""Linear image operators used by the structural and perceptual terms, each with its adjoint."""
from functools import lru_cache

import numpy as np
from scipy import signal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
BINOMIAL_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@lru_cache(maxsize=8)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    window = np.outer(g, g)
    window.flags.writeable = False
    return window


def filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Windowed weighted mean at every position where the window fits, per channel."""
    return np.stack(
        [signal.correlate2d(image[..., c], window, mode="valid") for c in range(image.shape[-1])],
        axis=-1,
    )


def filter_valid_adjoint(grad: np.ndarray, window: np.ndarray) -> np.ndarray:
    return np.stack(
        [signal.convolve2d(grad[..., c], window, mode="full") for c in range(grad.shape[-1])],
        axis=-1,
    )


@lru_cache(maxsize=16)
def downsample_operator(n: int) -> np.ndarray:
    """Binomial blur with reflected borders followed by 2x decimation, as an (ceil(n/2), n) matrix."""
    rows = (n + 1) // 2
    op = np.zeros((rows, n))
    for r in range(rows):
        centre = 2 * r
        for k, tap in zip(range(-2, 3), BINOMIAL_TAPS):
            idx = centre + k
            if idx < 0:
                idx = -idx
            if idx >= n:
                idx = 2 * (n - 1) - idx
            op[r, int(np.clip(idx, 0, n - 1))] += tap
    op.flags.writeable = False
    return op


def pyramid_down(image: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (ceil(H/2), ceil(W/2), C)."""
    dh = downsample_operator(image.shape[0])
    dw = downsample_operator(image.shape[1])
    return np.einsum("ih,hwc,jw->ijc", dh, image, dw)


def pyramid_down_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    dh = downsample_operator(shape[0])
    dw = downsample_operator(shape[1])
    return np.einsum("ih,ijc,jw->hwc", dh, grad, dw)
