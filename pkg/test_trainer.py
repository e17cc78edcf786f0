from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.gaussians import BranchTag, DeformationDelta, inverse_scale_activation, inverse_sigmoid
from src.dataio.jsonl import read_jsonl
from src.fusion.model import TalkingHeadModel
from src.losses.image_losses import StageLoss, loss_motion
from src.motion_fields.branch import field_backward
from src.rasterizer.backward import render_backward
from src.trainer import (
    Adam,
    DensifyConfig,
    DivergenceError,
    FrameScheduler,
    IncrementalSamplerConfig,
    TrainSchedule,
    densify_and_prune,
    incremental_sample,
    load_schedule,
    stage_finetune,
    stage_static_init,
    train_all,
)
from src.trainer.ablation import run_decomposition_ablation
from src.trainer.config import BranchSchedule, Direction, LearningRates
from src.trainer.densify import DensifyStats, densify_window
from src.trainer.optimizer import expon_lr
from src.trainer.sampler import sampling_window
from src.trainer.stages import BranchTrainer, build_branch, evaluate, seed_stream
from src.trainer.training_log import TrainingLogger
from src.verification.scenes import random_field


# --- incremental sampling ---------------------------------------------------

def test_sampling_window_slides_with_iteration():
    cfg = IncrementalSamplerConfig(metric="m", b_lower=0.1, b_upper=0.2, step=0.01)
    assert sampling_window(cfg, 0, 100) == pytest.approx((0.1, 0.2))
    assert sampling_window(cfg, 10, 100) == pytest.approx((0.2, 0.3))


def test_default_step_covers_the_range_in_most_of_the_stage():
    cfg = IncrementalSamplerConfig(metric="m")
    assert cfg.resolved_step(1000) == pytest.approx(1.0 / 700.0)


def test_incremental_sample_stays_inside_the_window():
    metrics = np.linspace(0.0, 1.0, 11)
    cfg = IncrementalSamplerConfig(metric="m", b_lower=0.05, b_upper=0.25, step=0.0)
    rng = np.random.default_rng(0)
    picks = {incremental_sample(metrics, 0, cfg, rng) for _ in range(50)}
    assert picks == {1, 2}


def test_incremental_sample_with_empty_window():
    cfg = IncrementalSamplerConfig(metric="m", b_lower=0.0, b_upper=0.15, step=0.0)
    assert incremental_sample(np.full(5, 0.9), 0, cfg, np.random.default_rng(0)) is None


def test_descending_sampler_starts_from_high_metrics():
    cfg = IncrementalSamplerConfig(metric="m", b_lower=0.0, b_upper=0.15, step=0.0, direction=Direction.DESCENDING)
    assert incremental_sample(np.array([0.95, 0.5, 0.05]), 0, cfg, np.random.default_rng(0)) == 0


def test_sampler_window_must_be_ordered():
    with pytest.raises(ValidationError, match="exceeds"):
        IncrementalSamplerConfig(metric="m", b_lower=0.3, b_upper=0.1)


def _scheduler(enabled, frames=20):
    metrics = {"m": np.linspace(0.0, 1.0, frames)}
    cfg = IncrementalSamplerConfig(metric="m", b_lower=0.0, b_upper=0.15, step=0.02, every=3)
    return FrameScheduler(list(range(frames)), metrics, [cfg], 30, np.random.SeedSequence(5), enabled=enabled)


def test_toggling_incremental_sampling_only_changes_sampled_iterations():
    on, off = _scheduler(True), _scheduler(False)
    metrics = np.linspace(0.0, 1.0, 20)
    for k in range(30):
        frame_on, window = on.next_frame(k)
        frame_off, no_window = off.next_frame(k)
        assert no_window is None
        if k % 3:
            assert window is None
            assert frame_on == frame_off
        else:
            lo, hi = window
            assert lo <= metrics[frame_on] <= hi


def test_scheduler_validation():
    with pytest.raises(ValueError, match="at least one"):
        FrameScheduler([], {}, [], 10, np.random.SeedSequence(0))
    with pytest.raises(ValueError, match="not present"):
        FrameScheduler([0], {}, [IncrementalSamplerConfig(metric="blink")], 10, np.random.SeedSequence(0))


# --- optimizer --------------------------------------------------------------

def test_adam_minimises_a_quadratic():
    x = np.zeros(1)
    adam = Adam({"x": x}, {"x": 0.1})
    for _ in range(500):
        current = adam.params["x"]
        adam.step({"x": 2.0 * (current - 3.0)})
    assert adam.params["x"][0] == pytest.approx(3.0, abs=1e-4)
    assert x[0] == 0.0


def test_adam_zero_gradient_leaves_tensor_unchanged():
    value = np.array([1.0, -2.0, 3.0])
    adam = Adam({"v": value}, {"v": 0.5})
    adam.step({"v": np.zeros(3)})
    np.testing.assert_array_equal(adam.params["v"], value)


def test_adam_weight_decay_shrinks_decayed_tensors():
    adam = Adam({"w": np.ones(2), "b": np.ones(2)}, {"w": 0.1, "b": 0.1}, weight_decay={"w": 0.5})
    adam.step({"w": np.zeros(2), "b": np.zeros(2)})
    np.testing.assert_allclose(adam.params["w"], 0.95)
    np.testing.assert_array_equal(adam.params["b"], 1.0)


def test_adam_rejects_bad_gradients():
    adam = Adam({"v": np.zeros(3)}, {"v": 0.1})
    with pytest.raises(ValueError, match="shape"):
        adam.step({"v": np.zeros(2)})
    with pytest.raises(ValueError, match="unknown tensor"):
        adam.step({"w": np.zeros(3)})
    with pytest.raises(ValueError, match="no learning rate"):
        Adam({"v": np.zeros(3)}, {})


def test_adam_remaps_state_after_densification():
    adam = Adam({"p": np.zeros((3, 2))}, {"p": 0.1})
    adam.step({"p": np.arange(6, dtype=np.float64).reshape(3, 2)})
    before = adam.exp_avg["p"].copy()
    adam.remap_rows(["p"], np.array([2, -1, 0]), {"p": np.zeros((3, 2))})
    np.testing.assert_array_equal(adam.exp_avg["p"], np.stack([before[2], np.zeros(2), before[0]]))


def test_exponential_learning_rate_schedule():
    assert expon_lr(0, 1e-2, 1e-4, 100) == pytest.approx(1e-2)
    assert expon_lr(100, 1e-2, 1e-4, 100) == pytest.approx(1e-4)
    assert expon_lr(50, 1e-2, 1e-4, 100) == pytest.approx(1e-3)
    assert expon_lr(500, 1e-2, 1e-4, 100) == pytest.approx(1e-4)


# --- densification ----------------------------------------------------------

def _densify_setup(scales, opacities, grads):
    n = len(scales)
    field = random_field(np.random.default_rng(0), n)
    field = field.with_parameters(
        {
            "scales": inverse_scale_activation(np.repeat(np.asarray(scales, dtype=np.float64)[:, None], 3, axis=1)),
            "opacities": inverse_sigmoid(np.asarray(opacities, dtype=np.float64)),
        }
    )
    stats = DensifyStats(n)
    stats.grad_accum[:] = grads
    stats.denom[:] = 1.0
    return field, stats


def _densify(field, stats, **overrides):
    cfg = DensifyConfig(grad_threshold=1e-3, percent_dense=0.1, **overrides)
    return densify_and_prune(field, stats, cfg, 1.0, np.random.default_rng(1))


def test_densify_leaves_quiet_opaque_fields_alone():
    field, stats = _densify_setup([0.05, 0.3, 0.05], [0.5, 0.5, 0.5], [0.0, 1e-4, 5e-4])
    result = _densify(field, stats)
    assert (result.cloned, result.split, result.pruned) == (0, 0, 0)
    np.testing.assert_array_equal(result.field.means, field.means)
    np.testing.assert_array_equal(result.source, [0, 1, 2])


def test_densify_splits_large_primitives():
    field, stats = _densify_setup([0.05, 0.5, 0.05], [0.5, 0.5, 0.5], [0.0, 1e-2, 0.0])
    result = _densify(field, stats)
    assert result.split == 1 and len(result.field) == 4
    np.testing.assert_allclose(result.field.activated_scales()[2:], 0.5 / 1.6)
    np.testing.assert_array_equal(result.source, [0, 2, -1, -1])


def test_densify_clones_small_primitives():
    field, stats = _densify_setup([0.05, 0.05], [0.5, 0.5], [1e-2, 0.0])
    result = _densify(field, stats)
    assert result.cloned == 1 and len(result.field) == 3
    np.testing.assert_allclose(result.field.activated_scales()[2], 0.05)


def test_densify_prunes_transparent_primitives():
    field, stats = _densify_setup([0.05, 0.05, 0.05], [0.5, 0.001, 0.5], [0.0, 0.0, 0.0])
    result = _densify(field, stats)
    assert result.pruned == 1
    np.testing.assert_array_equal(result.source, [0, 2])


def test_world_scale_pruning_has_its_own_setting():
    field, stats = _densify_setup([0.05, 0.3, 0.05], [0.5, 0.5, 0.5], [0.0, 0.0, 0.0])
    stats.max_radii[:] = 2.0
    assert _densify(field, stats, max_screen_size=5.0).pruned == 0
    result = _densify(field, stats, max_world_scale=0.2)
    assert result.pruned == 1
    np.testing.assert_array_equal(result.source, [0, 2])
    assert _densify(field, stats, max_screen_size=1.0).pruned == 3


def test_densify_respects_the_primitive_budget():
    field, stats = _densify_setup([0.05, 0.05, 0.05], [0.5, 0.5, 0.5], [2e-3, 5e-3, 0.0])
    result = _densify(field, stats, max_primitives=4)
    assert result.cloned == 1 and len(result.field) == 4
    # the clone copies the colour of the stronger candidate
    np.testing.assert_array_equal(result.field.sh[3], field.sh[1])


def test_densify_window():
    cfg = DensifyConfig(interval=10, start_iteration=20)
    assert densify_window(5, cfg, 100) == (True, False)
    assert densify_window(30, cfg, 100) == (True, True)
    assert densify_window(100, cfg, 100) == (False, False)


# --- configuration ----------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValidationError, match="precision"):
        TrainSchedule(precision="half")
    with pytest.raises(ValidationError, match="mouth"):
        TrainSchedule(branches={"face": BranchSchedule()})
    with pytest.raises(ValidationError, match="non-negative"):
        LearningRates(scales=-1.0)


def test_load_schedule_applies_overrides(tmp_path):
    path = tmp_path / "schedule.json"
    path.write_text('{"static_iterations": 7, "seed": 1}')
    schedule = load_schedule(path, seed=9, precision=None)
    assert schedule.static_iterations == 7
    assert schedule.seed == 9
    assert schedule.precision == "single"
    assert schedule.densify_stop() == int(0.6 * schedule.motion_iterations)


def test_seed_streams_are_independent_per_branch():
    a = np.random.default_rng(seed_stream(0, "face", "motion")).random()
    b = np.random.default_rng(seed_stream(0, "mouth", "motion")).random()
    c = np.random.default_rng(seed_stream(0, "face", "motion")).random()
    assert a != b and a == c


# --- stages -----------------------------------------------------------------

def _trainer(name, dataset, schedule):
    return BranchTrainer(name, build_branch(name, dataset, schedule), dataset, schedule, TrainingLogger(verbose=False))


def test_fresh_motion_field_renders_the_canonical_field(tiny_dataset, tiny_schedule):
    for name in ("face", "mouth"):
        trainer = _trainer(name, tiny_dataset, tiny_schedule)
        static, _ = trainer.render(0, deform=False)
        deformed, field_output = trainer.render(0, deform=True)
        assert np.all(field_output.delta.d_means == 0.0)
        np.testing.assert_array_equal(deformed.color, static.color)
        np.testing.assert_array_equal(deformed.alpha, static.alpha)


def test_zero_static_iterations_leave_the_field_unchanged(tiny_dataset, tiny_schedule):
    schedule = tiny_schedule.model_copy(update={"static_iterations": 0})
    trainer = _trainer("face", tiny_dataset, schedule)
    before = trainer.field
    assert stage_static_init(trainer) is before


def test_static_stage_steps_the_canonical_field(tiny_dataset, tiny_schedule):
    trainer = _trainer("mouth", tiny_dataset, tiny_schedule)
    before = trainer.field
    after = stage_static_init(trainer)
    assert after is not before
    assert len(trainer.logger.records) == tiny_schedule.static_iterations
    assert after.first_non_finite() is None


def test_training_without_train_frames_fails(tiny_dataset, tiny_schedule):
    empty = replace(tiny_dataset, manifest=tiny_dataset.manifest.model_copy(update={"train": []}))
    with pytest.raises(ValueError, match="no training frames"):
        train_all(empty, tiny_schedule)


def test_train_all_argument_checks(tiny_dataset, tiny_schedule):
    with pytest.raises(ValueError, match="unknown stage"):
        train_all(tiny_dataset, tiny_schedule, stage="warmup")
    with pytest.raises(ValueError, match="needs a trained model"):
        train_all(tiny_dataset, tiny_schedule, stage="motion")


def test_non_finite_loss_raises_divergence(tiny_dataset, tiny_schedule):
    poisoned = replace(tiny_dataset, face_targets=np.full_like(tiny_dataset.face_targets, np.nan))
    with pytest.raises(DivergenceError, match="face") as info:
        train_all(poisoned, tiny_schedule, stage="static")
    assert info.value.stage == "static"
    assert info.value.iteration == 0


def test_finetune_only_changes_colours(tiny_dataset, tiny_schedule, model_arrays):
    model = train_all(tiny_dataset, tiny_schedule, stage="static").model
    before = model_arrays(model)
    tuned = stage_finetune(model, tiny_dataset, tiny_schedule, TrainingLogger(verbose=False))
    after = model_arrays(tuned)
    assert before.keys() == after.keys()
    for key in before:
        if key.endswith("/field/sh"):
            assert not np.array_equal(before[key], after[key]), key
        else:
            assert before[key].tobytes() == after[key].tobytes(), key
    for name, branch in tuned.branches().items():
        assert branch.field.means is model.branches()[name].field.means


def test_training_is_deterministic(tiny_dataset, tiny_schedule, model_arrays):
    first = model_arrays(train_all(tiny_dataset, tiny_schedule).model)
    parallel = tiny_schedule.model_copy(update={"parallel_branches": True})
    second = model_arrays(train_all(tiny_dataset, parallel).model)
    assert first.keys() == second.keys()
    for key in first:
        assert first[key].tobytes() == second[key].tobytes(), key


def test_train_all_writes_model_and_log(tmp_path, tiny_dataset, tiny_schedule, model_arrays):
    result = train_all(tiny_dataset, tiny_schedule, tmp_path / "run")
    loaded = TalkingHeadModel.load(tmp_path / "run")
    assert loaded.primitive_counts() == result.model.primitive_counts()
    saved, trained = model_arrays(loaded), model_arrays(result.model)
    for key in trained:
        assert saved[key].tobytes() == trained[key].tobytes(), key

    records = read_jsonl(result.log_path)
    assert len(records) == len(result.records) > 0
    assert {r["stage"] for r in records} == {"static", "motion", "finetune"}
    assert any(r["window_lo"] is not None for r in records if r["stage"] == "motion")


def test_staged_training_resumes_from_checkpoint(tmp_path, tiny_dataset, tiny_schedule):
    out = tmp_path / "staged"
    static = train_all(tiny_dataset, tiny_schedule, out, stage="static").model
    resumed = train_all(tiny_dataset, tiny_schedule, out, stage="motion", model=TalkingHeadModel.load(out)).model
    assert set(resumed.branches()) == {"face", "mouth"}
    assert resumed.face.field.sh_degree == static.face.field.sh_degree


def test_single_branch_training(tiny_dataset, tiny_schedule):
    model = train_all(tiny_dataset, tiny_schedule, stage="static", single_branch=True).model
    assert model.single_branch
    assert set(model.primitive_counts()) == {"face"}


def test_evaluate_rejects_empty_split(tiny_dataset, tiny_schedule):
    model = train_all(tiny_dataset, tiny_schedule.model_copy(update={"static_iterations": 0}), stage="static").model
    empty = replace(tiny_dataset, manifest=tiny_dataset.manifest.model_copy(update={"test": []}))
    with pytest.raises(ValueError, match="has no frames"):
        evaluate(model, empty, "test", verbose=False)
    result = evaluate(model, tiny_dataset, "test", verbose=False)
    assert result.summary["frames"] == len(tiny_dataset.test_indices)


def test_decomposition_ablation_reports_both_variants(tmp_path, tiny_dataset, tiny_schedule):
    schedule = tiny_schedule.model_copy(update={"motion_iterations": 2, "finetune_iterations": 0})
    report = run_decomposition_ablation(tiny_dataset, schedule, tmp_path)
    assert [row["variant"] for row in report["variants"]] == ["two_branch", "single_branch"]
    assert all(row["frames"] == len(tiny_dataset.test_indices) for row in report["variants"])
    if "mouth_psnr_gain" in report:
        assert report["two_branch_not_worse"] == (report["mouth_psnr_gain"] >= 0.0)
    assert (tmp_path / "ablation.json").exists()
    assert (tmp_path / "single_branch" / "model.json").exists()


def test_motion_step_moves_centres_by_the_rasterizer_gradient_only(tiny_dataset, tiny_schedule):
    branch = build_branch("face", tiny_dataset, tiny_schedule)
    rng = np.random.default_rng(3)
    for key, value in branch.motion.parameters().items():
        if key.startswith("decoder."):
            branch.motion.set_tensor(key, rng.normal(0.0, 0.05, value.shape).astype(value.dtype))
    trainer = BranchTrainer("face", branch, tiny_dataset, tiny_schedule, TrainingLogger(verbose=False))
    frame = tiny_dataset.train_indices[0]

    output, field_output = trainer.render(frame, deform=True)
    assert np.abs(field_output.delta.d_means).max() > 0.0
    loss = loss_motion(
        output.color, tiny_dataset.target(frame, BranchTag.FACE), tiny_schedule.loss,
        tiny_dataset.loss_mask(frame, BranchTag.FACE),
    )
    raster = render_backward(output, loss.grad)
    delta = DeformationDelta(raster.means, raster.scales, raster.rotations)
    assert np.abs(field_backward(trainer.motion, field_output.trace, delta).positions).max() > 0.0

    trainer.step("motion", 0, frame, None, tiny_schedule.motion_iterations, deform=True)
    first_moment = trainer.optimizer.exp_avg["means"]
    np.testing.assert_allclose(first_moment, (1.0 - trainer.optimizer.beta1) * raster.means, rtol=1e-12, atol=0.0)


def test_centre_learning_rate_restarts_every_stage(tiny_dataset, tiny_schedule):
    trainer = _trainer("mouth", tiny_dataset, tiny_schedule)
    lr = tiny_schedule.lr
    for iterations in (tiny_schedule.static_iterations, tiny_schedule.motion_iterations):
        assert trainer.means_lr(0, iterations) == pytest.approx(lr.means_init * trainer.extent)
        assert trainer.means_lr(iterations, iterations) == pytest.approx(lr.means_final * trainer.extent)


def test_incrementally_sampled_frames_lie_in_their_window(tiny_dataset, tiny_schedule):
    schedule = tiny_schedule.model_copy(update={"motion_iterations": 10, "finetune_iterations": 0})
    records = train_all(tiny_dataset, schedule).records
    sampled = [r for r in records if r["window_lo"] is not None]
    assert {r["branch"] for r in sampled} == {"face", "mouth"}
    for record in sampled:
        metric = schedule.branches[record["branch"]].samplers[0].metric
        value = tiny_dataset.metrics[metric][record["frame"]]
        assert record["window_lo"] <= value <= record["window_hi"], record


def test_training_log_appends_json_lines(tmp_path):
    logger = TrainingLogger(tmp_path / "logs" / "train_log.jsonl", verbose=False, log_every=2)
    loss = StageLoss(total=0.5, l1=np.float64(0.25), dssim=0.1, perc=0.0, grad=np.zeros(1))
    logger.log_step("static", "face", 0, loss, 10, 3)
    logger.log_step("motion", "face", 1, loss, 10, 4, (0.1, 0.2))
    logger.log_step("motion", "face", 3, loss, 10, 5)
    records = read_jsonl(logger.path)
    assert records == logger.records
    assert [r["iter"] for r in records] == [0, 1]
    assert records[1]["window_hi"] == 0.2 and records[0]["window_lo"] is None
