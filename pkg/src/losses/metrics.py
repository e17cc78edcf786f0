from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.losses.image_losses import as_image_pair, structural_similarity

PSNR_CAP = 100.0


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    a, b = as_image_pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(-10.0 * np.log10(mse)))


def masked_psnr(img_a: np.ndarray, img_b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR restricted to mask pixels (all channels)."""
    a, b = as_image_pair(img_a, img_b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    mse = float(np.mean(((a - b) ** 2)[mask]))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(-10.0 * np.log10(mse)))


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    return structural_similarity(img_a, img_b)


def frame_metrics(
    frame: int, render: np.ndarray, target: np.ndarray, mouth_mask: Optional[np.ndarray] = None
) -> Dict[str, Any]:
    record = {"frame": int(frame), "psnr": psnr(render, target), "ssim": ssim(render, target)}
    if mouth_mask is not None and np.any(mouth_mask):
        record["psnr_mouth"] = masked_psnr(render, target, mouth_mask)
    return record


def summarize(records: List[Dict[str, Any]]) -> Dict[str, float]:
    """Mean of every numeric metric column across frames."""
    if not records:
        return {"frames": 0}
    df = pd.DataFrame(records)
    summary = {"frames": int(len(df))}
    for column in ("psnr", "ssim", "psnr_mouth"):
        if column in df:
            summary[column] = float(df[column].mean())
    return summary
