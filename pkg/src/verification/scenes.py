import numpy as np

from src.core.camera import Camera, rotation_about_x, rotation_about_y
from src.core.gaussians import BranchTag, GaussianField, inverse_scale_activation, inverse_sigmoid
from src.core.sh import num_sh_bases, rgb_to_sh


def random_field(
    rng: np.random.Generator,
    count: int,
    sh_degree: int = 1,
    spread: float = 0.6,
    scale_range=(0.06, 0.25),
    dtype=np.float64,
) -> GaussianField:
    """Anisotropic primitives around the origin with positive SH colours."""
    means = rng.uniform(-spread, spread, size=(count, 3))
    scales = inverse_scale_activation(rng.uniform(*scale_range, size=(count, 3)))
    rotations = rng.normal(size=(count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = inverse_sigmoid(rng.uniform(0.2, 0.9, size=count))
    sh = rng.normal(0.0, 0.08, size=(count, num_sh_bases(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh(rng.uniform(0.3, 0.8, size=(count, 3)))
    field = GaussianField(means, scales, rotations, opacities, sh, sh_degree, BranchTag.FACE)
    return field.astype(dtype)


def random_camera(rng: np.random.Generator, size: int = 32, distance: float = 4.0) -> Camera:
    rotation = rotation_about_x(rng.uniform(-0.2, 0.2)) @ rotation_about_y(rng.uniform(-0.3, 0.3))
    return Camera(
        rotation=rotation,
        translation=np.array([0.0, 0.0, distance]),
        fx=1.3 * size,
        fy=1.3 * size,
        cx=(size - 1) / 2.0,
        cy=(size - 1) / 2.0,
        width=size,
        height=size,
    )
