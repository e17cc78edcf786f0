import numpy as np
import pytest

from src.dataio.loader import load_dataset
from src.dataio.manifest import SynthSceneSpec
from src.dataio.synthetic import generate_synthetic
from src.motion_fields.hash_encoder import EncoderConfig
from src.rasterizer.settings import RasterSettings
from src.trainer.config import BranchSchedule, DensifyConfig, IncrementalSamplerConfig, TrainSchedule

TINY_SCENE = SynthSceneSpec(
    seed=4,
    face_primitives=48,
    mouth_primitives=16,
    frame_count=6,
    width=16,
    height=16,
    focal=22.0,
    audio_dim=4,
    expr_dim=3,
    test_fraction=0.3,
)


@pytest.fixture(scope="session")
def tiny_scene():
    return TINY_SCENE


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_dataset")
    generate_synthetic(TINY_SCENE, out, verbose=False)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir, workers=1)


@pytest.fixture
def tiny_schedule():
    """A few iterations of every stage on a handful of primitives."""
    return TrainSchedule(
        static_iterations=3,
        motion_iterations=4,
        finetune_iterations=2,
        precision="double",
        seed=2,
        sh_degree=1,
        encoder=EncoderConfig(levels=2, features=2, log2_table_size=6, base_resolution=4),
        densify=DensifyConfig(interval=2, start_iteration=0, grad_threshold=1e-6, max_primitives=64),
        raster=RasterSettings(workers=1),
        branches={
            "face": BranchSchedule(
                initial_primitives=24,
                samplers=[IncrementalSamplerConfig(metric="lips_open", b_upper=1.0, every=2)],
            ),
            "mouth": BranchSchedule(
                initial_primitives=12,
                samplers=[IncrementalSamplerConfig(metric="teeth_visible", b_upper=1.0, every=2)],
            ),
        },
        log_every=1,
        verbose=False,
    )


@pytest.fixture
def model_arrays():
    """Every tensor of a model, keyed by branch, for bitwise comparisons."""

    def collect(model):
        arrays = {}
        for name, branch in model.branches().items():
            for key, value in branch.field.parameters().items():
                arrays[f"{name}/field/{key}"] = np.asarray(value)
            for key, value in branch.motion.parameters().items():
                arrays[f"{name}/motion/{key}"] = np.asarray(value)
        return arrays

    return collect
