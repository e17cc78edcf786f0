from pathlib import Path
from typing import Dict

import numpy as np

from src.dataio.images import write_png
from src.rasterizer.forward import RenderOutput


def write_alpha(path: Path, alpha: np.ndarray) -> Path:
    """Opacity as a raw little-endian float32 file (H*W values, row-major)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(alpha, dtype="<f4").tobytes())
    return path


def dump_render(output: RenderOutput, directory: Path, name: str = "render") -> Dict[str, str]:
    """Colour as PNG, opacity through write_alpha."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    color_path = directory / f"{name}.png"
    write_png(color_path, output.color)
    alpha_path = write_alpha(directory / f"{name}_alpha.f32", output.alpha)
    print(f"🖼️ Render dump written: {color_path} ({output.alpha.shape[1]}x{output.alpha.shape[0]})")
    return {"color": str(color_path), "alpha": str(alpha_path)}
