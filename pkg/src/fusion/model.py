"""
Trained talking-head model: a canonical field plus a motion field per branch.

On disk a model is a directory with `model.json` and one tensor bundle per
field and per motion field.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import orjson
from pydantic import BaseModel, ValidationError

from src.core.checkpoint import CheckpointError, load_field, save_field
from src.core.gaussians import BranchTag, GaussianField
from src.motion_fields.branch import MotionFieldBranch
from src.motion_fields.checkpoint import load_branch, save_branch

MODEL_VERSION = 1


class BranchEntry(BaseModel):
    field: str
    motion: str


class ModelManifest(BaseModel):
    version: int = MODEL_VERSION
    single_branch: bool = False
    background: List[float]
    branches: Dict[str, BranchEntry]


@dataclass
class BranchModel:
    field: GaussianField
    motion: MotionFieldBranch

    @property
    def tag(self) -> BranchTag:
        return self.field.branch_tag

    def save(self, directory: Path, name: str) -> BranchEntry:
        directory = Path(directory)
        save_field(self.field, directory / f"{name}_field")
        save_branch(self.motion, directory / f"{name}_motion")
        return BranchEntry(field=f"{name}_field", motion=f"{name}_motion")

    @classmethod
    def load(cls, directory: Path, entry: BranchEntry) -> "BranchModel":
        directory = Path(directory)
        return cls(field=load_field(directory / entry.field), motion=load_branch(directory / entry.motion))


@dataclass
class TalkingHeadModel:
    face: BranchModel
    mouth: Optional[BranchModel]
    background: np.ndarray

    @property
    def single_branch(self) -> bool:
        return self.mouth is None

    def branches(self) -> Dict[str, BranchModel]:
        out = {"face": self.face}
        if self.mouth is not None:
            out["mouth"] = self.mouth
        return out

    def primitive_counts(self) -> Dict[str, int]:
        return {name: len(b.field) for name, b in self.branches().items()}

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = {name: branch.save(directory, name) for name, branch in self.branches().items()}
        manifest = ModelManifest(
            single_branch=self.single_branch,
            background=[float(c) for c in self.background],
            branches=entries,
        )
        path = directory / "model.json"
        path.write_bytes(orjson.dumps(manifest.model_dump(mode="json"), option=orjson.OPT_INDENT_2))
        return path

    @classmethod
    def load(cls, directory: Path) -> "TalkingHeadModel":
        path = Path(directory) / "model.json"
        if not path.exists():
            raise CheckpointError(f"{path}: model manifest not found")
        try:
            manifest = ModelManifest.model_validate(orjson.loads(path.read_bytes()))
        except (orjson.JSONDecodeError, ValidationError) as e:
            raise CheckpointError(f"{path}: malformed model manifest ({e})") from e
        if manifest.version != MODEL_VERSION:
            raise CheckpointError(f"{path}: unsupported model version {manifest.version}")
        if "face" not in manifest.branches:
            raise CheckpointError(f"{path}: model has no face branch")
        if manifest.single_branch == ("mouth" in manifest.branches):
            raise CheckpointError(f"{path}: branch list disagrees with single_branch={manifest.single_branch}")

        face = BranchModel.load(directory, manifest.branches["face"])
        mouth = None
        if not manifest.single_branch:
            mouth = BranchModel.load(directory, manifest.branches["mouth"])
            if mouth.field.sh_degree != face.field.sh_degree:
                raise CheckpointError(f"{path}: face and mouth fields use different SH degrees")
        return cls(face=face, mouth=mouth, background=np.asarray(manifest.background, dtype=np.float64))
