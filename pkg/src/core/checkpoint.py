"""
Tensor bundles on disk: a JSON manifest plus one little-endian float blob.

Fields are written field-major in declared order. float32 tensors are stored
as '<f4'; float64 tensors (double-precision runs) as '<f8' so a save/load
round-trip is always bit-exact.
"""
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import orjson
from pydantic import BaseModel, Field, ValidationError

from src.core.gaussians import PARAMETER_NAMES, BranchTag, GaussianField

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


class TensorEntry(BaseModel):
    name: str
    shape: List[int]


class BundleManifest(BaseModel):
    version: int = FORMAT_VERSION
    kind: str
    dtype: str = "<f4"
    tensors: List[TensorEntry]
    meta: Dict[str, Any] = Field(default_factory=dict)


class FieldManifest(BundleManifest):
    kind: str = "gaussian_field"
    sh_degree: int
    branch_tag: BranchTag
    count: int


def _paths(prefix: Path) -> Tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def write_bundle(prefix: Path, tensors: Dict[str, np.ndarray], manifest: BundleManifest) -> Path:
    """Write tensors in dict order; returns the manifest path."""
    manifest_path, blob_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    dtypes = {str(np.asarray(t).dtype) for t in tensors.values()}
    wide = "float64" in dtypes
    manifest.dtype = _DTYPES["float64" if wide else "float32"]
    manifest.tensors = [TensorEntry(name=k, shape=list(np.shape(v))) for k, v in tensors.items()]
    with open(blob_path, "wb") as f:
        for value in tensors.values():
            f.write(np.ascontiguousarray(value, dtype=manifest.dtype).tobytes())
    manifest_path.write_bytes(orjson.dumps(manifest.model_dump(mode="json"), option=orjson.OPT_INDENT_2))
    return manifest_path


def read_bundle(prefix: Path, model: type = BundleManifest) -> Tuple[Any, Dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(prefix)
    if not manifest_path.exists():
        raise CheckpointError(f"{manifest_path}: checkpoint manifest not found")
    if not blob_path.exists():
        raise CheckpointError(f"{blob_path}: checkpoint blob not found")
    try:
        manifest = model.model_validate(orjson.loads(manifest_path.read_bytes()))
    except (orjson.JSONDecodeError, ValidationError) as e:
        raise CheckpointError(f"{manifest_path}: malformed manifest ({e})") from e
    if manifest.version != FORMAT_VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported version {manifest.version}")
    if manifest.dtype not in _DTYPES.values():
        raise CheckpointError(f"{manifest_path}: unsupported dtype {manifest.dtype}")

    blob = np.frombuffer(blob_path.read_bytes(), dtype=manifest.dtype)
    expected = sum(int(np.prod(e.shape)) for e in manifest.tensors)
    if blob.size != expected:
        raise CheckpointError(f"{blob_path}: holds {blob.size} values, manifest declares {expected}")

    native = np.dtype(manifest.dtype).newbyteorder("=")
    tensors, offset = {}, 0
    for entry in manifest.tensors:
        size = int(np.prod(entry.shape))
        tensors[entry.name] = blob[offset:offset + size].reshape(entry.shape).astype(native)
        offset += size
    return manifest, tensors


def save_field(field: GaussianField, prefix: Path) -> Path:
    manifest = FieldManifest(
        tensors=[],
        sh_degree=field.sh_degree,
        branch_tag=field.branch_tag,
        count=len(field),
    )
    return write_bundle(prefix, field.parameters(), manifest)


def load_field(prefix: Path) -> GaussianField:
    manifest, tensors = read_bundle(prefix, FieldManifest)
    names = tuple(e.name for e in manifest.tensors)
    if names != PARAMETER_NAMES:
        raise CheckpointError(f"{prefix}: field order {names} differs from {PARAMETER_NAMES}")
    if tensors["means"].shape[0] != manifest.count:
        raise CheckpointError(f"{prefix}: count {manifest.count} does not match stored primitives")
    try:
        return GaussianField(sh_degree=manifest.sh_degree, branch_tag=manifest.branch_tag, **tensors)
    except ValueError as e:
        raise CheckpointError(f"{prefix}: {e}") from e
