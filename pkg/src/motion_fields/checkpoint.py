from pathlib import Path

import numpy as np

from src.core.checkpoint import BundleManifest, CheckpointError, read_bundle, write_bundle
from src.motion_fields.branch import FieldConfig, MotionFieldBranch


def save_branch(branch: MotionFieldBranch, prefix: Path) -> Path:
    manifest = BundleManifest(kind="motion_field", tensors=[], meta={"config": branch.config.model_dump(mode="json")})
    return write_bundle(prefix, branch.parameters(), manifest)


def load_branch(prefix: Path) -> MotionFieldBranch:
    manifest, tensors = read_bundle(prefix)
    if manifest.kind != "motion_field":
        raise CheckpointError(f"{prefix}: expected a motion_field bundle, found '{manifest.kind}'")
    try:
        config = FieldConfig.model_validate(manifest.meta["config"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{prefix}: missing or invalid field config ({e})") from e
    dtype = np.dtype(manifest.dtype).newbyteorder("=")
    # tables are overwritten below, the seed only fixes shapes
    branch = MotionFieldBranch(config, np.random.default_rng(0), dtype)
    try:
        branch.load_parameters(tensors)
    except ValueError as e:
        raise CheckpointError(f"{prefix}: {e}") from e
    return branch
