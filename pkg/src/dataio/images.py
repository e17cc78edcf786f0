from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> None:
    """Float image in [0, 1], (H, W, 3) colour or (H, W) single channel."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    array = to_uint8(image)
    Image.fromarray(array).save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    """Decoded pixels as uint8, (H, W, 3) for colour files, (H, W) for masks."""
    with Image.open(path) as img:
        return np.asarray(img).copy()
