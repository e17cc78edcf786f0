"""
Three-stage optimisation of the talking-head model.

static    canonical field alone on branch-masked targets, densification on
motion    canonical field and motion field jointly on deformed renders,
          incremental sampling per branch, densification until its stop iteration
finetune  SH colour tensors of both branches only, on fused full frames

Face and mouth share no state in the first two stages and may train
concurrently; each branch draws from its own seeded streams.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.gaussians import PARAMETER_NAMES, BranchTag, DeformationDelta, GaussianField, initialize_field
from src.core.sh import num_sh_bases
from src.dataio.loader import Dataset
from src.fusion.compositor import SequenceResult, render_branch, render_head, render_head_backward, render_sequence
from src.fusion.model import BranchModel, TalkingHeadModel
from src.losses.image_losses import StageLoss, loss_finetune, loss_motion, loss_static
from src.motion_fields.branch import FieldConfig, FieldOutput, HybridMode, MotionFieldBranch, field_backward
from src.motion_fields.hash_encoder import BoundingBox
from src.rasterizer.backward import RasterGradients, render_backward
from src.rasterizer.forward import RenderOutput, render_forward
from src.trainer.config import BranchSchedule, LearningRates, TrainSchedule
from src.trainer.densify import DensifyStats, densify_and_prune, densify_window, scene_extent_of
from src.trainer.optimizer import Adam, expon_lr
from src.trainer.sampler import FrameScheduler
from src.trainer.training_log import TrainingLogger

FACE, MOUTH, HEAD = "face", "mouth", "head"
STAGES = ("all", "static", "motion", "finetune")
_BRANCH_KEYS = {FACE: 0, MOUTH: 1, HEAD: 2}
_STREAM_KEYS = {"init": 0, "static": 1, "motion": 2, "finetune": 3, "densify": 4}


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, branch: str, iteration: int, loss: float):
        super().__init__(f"{stage} stage diverged on branch '{branch}' at iteration {iteration} (loss={loss})")
        self.stage = stage
        self.branch = branch
        self.iteration = iteration
        self.loss = loss


def seed_stream(seed: int, branch: str, stream: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _BRANCH_KEYS[branch], _STREAM_KEYS[stream]])


def sh_learning_rate(sh_degree: int, lr: LearningRates) -> np.ndarray:
    """Per-coefficient rate: full rate for the DC term, divided rate for higher bands."""
    rates = np.full((1, num_sh_bases(sh_degree), 1), lr.sh / lr.sh_rest_divisor)
    rates[:, 0, :] = lr.sh
    return rates


def field_learning_rates(field: GaussianField, lr: LearningRates, extent: float) -> Dict[str, object]:
    return {
        "means": lr.means_init * extent,
        "scales": lr.scales,
        "rotations": lr.rotations,
        "opacities": lr.opacities,
        "sh": sh_learning_rate(field.sh_degree, lr),
    }


def motion_learning_rates(motion: MotionFieldBranch, lr: LearningRates) -> Dict[str, float]:
    rates = {"encoder": lr.encoder, "attention": lr.attention, "decoder": lr.decoder}
    return {key: rates[key.split(".", 1)[0]] for key in motion.parameters()}


def branch_plan(name: str, schedule: TrainSchedule) -> BranchSchedule:
    """Single-branch runs get the face samplers and the combined primitive budget."""
    if name == HEAD:
        face, mouth = schedule.branches[FACE], schedule.branches[MOUTH]
        return BranchSchedule(
            initial_primitives=face.initial_primitives + mouth.initial_primitives,
            samplers=face.samplers,
            use_incremental_sampling=face.use_incremental_sampling,
        )
    return schedule.branches[name]


def build_branch(name: str, dataset: Dataset, schedule: TrainSchedule) -> BranchModel:
    tag = BranchTag.MOUTH if name == MOUTH else BranchTag.FACE
    plan = branch_plan(name, schedule)
    rng = np.random.default_rng(seed_stream(schedule.seed, name, "init"))
    box = dataset.manifest.scene_bbox
    field = initialize_field(
        box.lower, box.upper, plan.initial_primitives, rng,
        sh_degree=schedule.sh_degree, branch_tag=tag, dtype=schedule.dtype,
    )
    config = FieldConfig(
        kind=tag,
        audio_dim=dataset.manifest.audio_dim,
        expr_dim=dataset.manifest.expr_dim,
        encoder=schedule.encoder,
        bbox=BoundingBox(lower=box.lower, upper=box.upper),
        hybrid=schedule.hybrid if tag == BranchTag.FACE else HybridMode.NONE,
    )
    return BranchModel(field=field, motion=MotionFieldBranch(config, rng, schedule.dtype))


class BranchTrainer:
    """Optimizer, densification statistics and per-step logic for one branch."""

    def __init__(
        self,
        name: str,
        branch: BranchModel,
        dataset: Dataset,
        schedule: TrainSchedule,
        logger: TrainingLogger,
        checkpoint_dir: Optional[Path] = None,
    ):
        self.name = name
        self.dataset = dataset
        self.schedule = schedule
        self.logger = logger
        self.checkpoint_dir = checkpoint_dir
        self.field = branch.field
        self.motion = branch.motion
        self.target_tag = None if name == HEAD else self.field.branch_tag

        box = dataset.manifest.scene_bbox
        self.extent = scene_extent_of(box.lower, box.upper)
        self.densify_cfg = schedule.densify
        if name == HEAD:
            self.densify_cfg = schedule.densify.model_copy(update={"max_primitives": 2 * schedule.densify.max_primitives})
        self.rng = np.random.default_rng(seed_stream(schedule.seed, name, "densify"))

        lr = schedule.lr
        motion_params = self.motion.parameters()
        self.motion_keys = list(motion_params)
        self.optimizer = Adam(
            {**self.field.parameters(), **motion_params},
            {**field_learning_rates(self.field, lr, self.extent), **motion_learning_rates(self.motion, lr)},
            weight_decay={k: lr.weight_decay for k in motion_params if k.startswith("decoder.w")},
        )
        self.stats = DensifyStats(len(self.field))

    @property
    def model(self) -> BranchModel:
        return BranchModel(field=self.field, motion=self.motion)

    def means_lr(self, iteration: int, stage_iterations: int) -> float:
        """Centre learning rate, decaying from its initial to its final value over one stage."""
        lr = self.schedule.lr
        return expon_lr(iteration, lr.means_init * self.extent, lr.means_final * self.extent, stage_iterations)

    def _sync(self) -> None:
        params = self.optimizer.params
        self.field = self.field.with_parameters({k: params[k] for k in PARAMETER_NAMES})
        for key in self.motion_keys:
            self.motion.set_tensor(key, params[key])

    def render(self, frame: int, deform: bool) -> Tuple[RenderOutput, Optional[FieldOutput]]:
        camera = self.dataset.cameras[frame]
        background = self.dataset.background
        if not deform:
            return render_forward(self.field, camera, self.schedule.raster, background=background), None
        rendered = render_branch(self.model, camera, self.dataset.conditions[frame], self.schedule.raster, background)
        return rendered.output, rendered.field_output

    def step(
        self,
        stage: str,
        iteration: int,
        frame: int,
        window: Optional[Tuple[float, float]],
        stage_iterations: int,
        deform: bool,
    ) -> Tuple[RenderOutput, RasterGradients, StageLoss]:
        output, field_output = self.render(frame, deform)
        target = self.dataset.target(frame, self.target_tag)
        loss_fn = loss_motion if deform else loss_static
        mask = self.dataset.loss_mask(frame, self.target_tag)
        loss = loss_fn(output.color, target, self.schedule.loss, mask)
        if not np.isfinite(loss.total):
            raise DivergenceError(stage, self.name, iteration, loss.total)

        grads = render_backward(output, loss.grad)
        updates = grads.parameters()
        if deform:
            delta_grad = DeformationDelta(grads.means, grads.scales, grads.rotations)
            motion_grads = field_backward(self.motion, field_output.trace, delta_grad, grads.opacities, grads.colors)
            updates.update(motion_grads.params)
        self.optimizer.step(updates, {"means": self.means_lr(iteration, stage_iterations)})
        self._sync()
        self.logger.log_step(stage, self.name, iteration, loss, len(self.field), frame, window)
        return output, grads, loss

    def densify(self, iteration: int, stop: int, output: RenderOutput, grads: RasterGradients) -> None:
        accumulate, run = densify_window(iteration, self.densify_cfg, stop)
        if accumulate:
            self.stats.update(output, grads)
        if not run:
            return
        result = densify_and_prune(self.field, self.stats, self.densify_cfg, self.extent, self.rng)
        self.optimizer.remap_rows(PARAMETER_NAMES, result.source, result.field.parameters())
        self.field = result.field
        self.stats.reset(len(self.field))
        if result.cloned or result.split or result.pruned:
            self.logger.info(
                f"🌱 {self.name} @ {iteration}: {result.cloned} cloned, {result.split} split, "
                f"{result.pruned} pruned -> {len(self.field)} primitives"
            )

    def maybe_checkpoint(self, stage: str, iteration: int) -> None:
        every = self.schedule.checkpoint_every
        if self.checkpoint_dir is None or not every or (iteration + 1) % every:
            return
        self.model.save(self.checkpoint_dir / f"{stage}-{iteration + 1:06d}", self.name)


def _training_frames(dataset: Dataset) -> List[int]:
    frames = dataset.train_indices
    if not frames:
        raise ValueError("dataset has no training frames")
    return frames


def stage_static_init(trainer: BranchTrainer) -> GaussianField:
    schedule = trainer.schedule
    frames = _training_frames(trainer.dataset)
    scheduler = FrameScheduler(
        frames, trainer.dataset.metrics_for(frames), [], schedule.static_iterations,
        seed_stream(schedule.seed, trainer.name, "static"), enabled=False,
    )
    trainer.logger.info(f"🧱 Static init [{trainer.name}]: {schedule.static_iterations} iterations, {len(trainer.field)} primitives")
    for k in trainer.logger.progress(schedule.static_iterations, f"static/{trainer.name}"):
        frame, _ = scheduler.next_frame(k)
        output, grads, _ = trainer.step("static", k, frame, None, schedule.static_iterations, deform=False)
        trainer.densify(k, schedule.static_iterations, output, grads)
        trainer.maybe_checkpoint("static", k)
    return trainer.field


def stage_motion_learning(trainer: BranchTrainer) -> BranchModel:
    schedule = trainer.schedule
    frames = _training_frames(trainer.dataset)
    plan = branch_plan(trainer.name, schedule)
    scheduler = FrameScheduler(
        frames, trainer.dataset.metrics_for(frames), plan.samplers, schedule.motion_iterations,
        seed_stream(schedule.seed, trainer.name, "motion"), enabled=plan.use_incremental_sampling,
    )
    stop = schedule.densify_stop()
    trainer.stats.reset(len(trainer.field))
    trainer.logger.info(
        f"🌀 Motion learning [{trainer.name}]: {schedule.motion_iterations} iterations, "
        f"incremental sampling {'on' if scheduler.enabled else 'off'}"
    )
    for k in trainer.logger.progress(schedule.motion_iterations, f"motion/{trainer.name}"):
        frame, window = scheduler.next_frame(k)
        output, grads, _ = trainer.step("motion", k, frame, window, schedule.motion_iterations, deform=True)
        trainer.densify(k, stop, output, grads)
        trainer.maybe_checkpoint("motion", k)
    return trainer.model


def stage_finetune(
    model: TalkingHeadModel,
    dataset: Dataset,
    schedule: TrainSchedule,
    logger: TrainingLogger,
    checkpoint_dir: Optional[Path] = None,
) -> TalkingHeadModel:
    """Colour-only refinement on fused frames; every non-SH tensor is left untouched."""
    frames = _training_frames(dataset)
    optimizers = {
        name: Adam({"sh": branch.field.sh}, {"sh": sh_learning_rate(branch.field.sh_degree, schedule.lr)})
        for name, branch in model.branches().items()
    }
    rng = np.random.default_rng(seed_stream(schedule.seed, HEAD, "finetune"))
    logger.info(f"🎨 Fine-tuning colours: {schedule.finetune_iterations} iterations")
    for k in logger.progress(schedule.finetune_iterations, "finetune"):
        frame = frames[int(rng.integers(len(frames)))]
        fused = render_head(model, dataset.cameras[frame], dataset.conditions[frame], schedule.raster)
        loss = loss_finetune(fused.color, dataset.frames[frame], schedule.loss)
        if not np.isfinite(loss.total):
            raise DivergenceError("finetune", HEAD, k, loss.total)
        grads = render_head_backward(fused, loss.grad)

        updated = {}
        for name, branch in model.branches().items():
            optimizers[name].step({"sh": grads[name].sh})
            field = branch.field.with_parameters({"sh": optimizers[name].params["sh"]})
            updated[name] = BranchModel(field=field, motion=branch.motion)
        model = TalkingHeadModel(face=updated[FACE], mouth=updated.get(MOUTH), background=model.background)
        logger.log_step("finetune", HEAD, k, loss, sum(model.primitive_counts().values()), frame)
        if checkpoint_dir is not None and schedule.checkpoint_every and (k + 1) % schedule.checkpoint_every == 0:
            model.save(checkpoint_dir / f"finetune-{k + 1:06d}")
    return model


@dataclass
class TrainResult:
    model: TalkingHeadModel
    records: List[dict]
    log_path: Optional[Path]


def train_all(
    dataset: Dataset,
    schedule: TrainSchedule,
    out_dir: Optional[Path] = None,
    stage: str = "all",
    single_branch: bool = False,
    model: Optional[TalkingHeadModel] = None,
) -> TrainResult:
    """Run the requested stage(s); 'motion' and 'finetune' resume from `model`."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}', expected one of {STAGES}")
    if stage in ("motion", "finetune") and model is None:
        raise ValueError(f"stage '{stage}' needs a trained model to resume from")
    _training_frames(dataset)

    out = Path(out_dir) if out_dir is not None else None
    logger = TrainingLogger(out / "train_log.jsonl" if out else None, schedule.verbose, schedule.log_every)
    checkpoint_dir = out / "checkpoints" if out is not None and schedule.checkpoint_every else None

    if model is None:
        names = [HEAD] if single_branch else [FACE, MOUTH]
        branches = {name: build_branch(name, dataset, schedule) for name in names}
    else:
        branches = {(HEAD if model.single_branch else name): b for name, b in model.branches().items()}

    if stage in ("all", "static", "motion"):
        trainers = [BranchTrainer(n, b, dataset, schedule, logger, checkpoint_dir) for n, b in branches.items()]

        def run(trainer: BranchTrainer) -> BranchModel:
            if stage in ("all", "static"):
                stage_static_init(trainer)
            if stage in ("all", "motion"):
                stage_motion_learning(trainer)
            return trainer.model

        workers = 2 if schedule.parallel_branches and len(trainers) > 1 else 1
        with ThreadPoolExecutor(max_workers=workers) as executor:
            branches = dict(zip(branches, executor.map(run, trainers)))

    face = branches[HEAD] if HEAD in branches else branches[FACE]
    model = TalkingHeadModel(face=face, mouth=branches.get(MOUTH), background=dataset.background)
    if stage in ("all", "finetune"):
        model = stage_finetune(model, dataset, schedule, logger, checkpoint_dir)

    if out is not None:
        model.save(out)
        logger.info(f"💾 Model saved to {out} ({model.primitive_counts()})")
    return TrainResult(model=model, records=logger.records, log_path=logger.path)


def evaluate(
    model: TalkingHeadModel,
    dataset: Dataset,
    split: str = "test",
    out_dir: Optional[Path] = None,
    schedule: Optional[TrainSchedule] = None,
    workers: int = 1,
    verbose: bool = True,
) -> SequenceResult:
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"split '{split}' has no frames")
    settings = schedule.raster if schedule is not None else None
    return render_sequence(
        model,
        [dataset.cameras[i] for i in frames],
        [dataset.conditions[i] for i in frames],
        settings=settings,
        out_dir=out_dir,
        targets=[dataset.frames[i] for i in frames],
        mouth_masks=[dataset.mouth_masks[i] for i in frames],
        frame_ids=frames,
        workers=workers,
        verbose=verbose,
    )
