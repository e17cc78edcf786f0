from dataclasses import replace

import numpy as np
import pytest

from src.core.checkpoint import CheckpointError
from src.core.gaussians import BranchTag
from src.fusion import TalkingHeadModel
from src.fusion.compositor import fuse_head, fuse_head_backward, render_head, render_head_backward, render_sequence
from src.fusion.model import BranchModel
from src.motion_fields import ConditionVector, EncoderConfig, FieldConfig, MotionFieldBranch
from src.rasterizer import RasterSettings
from src.trainer.stages import evaluate
from src.verification.gradcheck import central_difference
from src.verification.scenes import random_camera, random_field

SMOOTH = RasterSettings(alpha_skip=1e-15, early_termination=False, workers=1)
SMALL_ENCODER = EncoderConfig(levels=2, features=2, log2_table_size=8, base_resolution=4)


def pixel(*values):
    return np.array(values, dtype=np.float64).reshape(1, 1, -1)


def test_opaque_face_hides_the_mouth():
    out = fuse_head(pixel(0.2, 0.4, 0.6), np.ones((1, 1)), pixel(1.0, 0.0, 0.0))
    np.testing.assert_allclose(out, pixel(0.2, 0.4, 0.6))


def test_transparent_face_shows_the_mouth():
    out = fuse_head(pixel(0.2, 0.4, 0.6), np.zeros((1, 1)), pixel(1.0, 0.0, 0.0))
    np.testing.assert_allclose(out, pixel(1.0, 0.0, 0.0))


def test_half_transparent_face_blends():
    out = fuse_head(pixel(1.0, 1.0, 1.0), np.full((1, 1), 0.5), pixel(0.0, 0.0, 0.0))
    np.testing.assert_allclose(out, pixel(0.5, 0.5, 0.5))


def test_fused_colour_is_convex():
    rng = np.random.default_rng(0)
    c_face = rng.uniform(size=(10, 100, 3))
    c_mouth = rng.uniform(size=(10, 100, 3))
    a_face = rng.uniform(size=(10, 100))
    out = fuse_head(c_face, a_face, c_mouth)
    lo, hi = np.minimum(c_face, c_mouth), np.maximum(c_face, c_mouth)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_fusion_input_validation():
    with pytest.raises(ValueError, match="outside"):
        fuse_head(pixel(0.0, 0.0, 0.0), np.full((1, 1), 1.2), pixel(0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="does not match"):
        fuse_head(np.zeros((2, 2, 3)), np.zeros((3, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match=r"\(H, W, 3\)"):
        fuse_head(np.zeros((2, 2, 3)), np.zeros((2, 2)), np.zeros((2, 3, 3)))


def test_fusion_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    c_face = rng.uniform(size=(3, 4, 3))
    a_face = rng.uniform(0.1, 0.9, size=(3, 4))
    c_mouth = rng.uniform(size=(3, 4, 3))
    weights = rng.normal(size=(3, 4, 3))
    g_face, g_alpha, g_mouth = fuse_head_backward(weights, c_face, a_face, c_mouth)

    def loss():
        return float(np.sum(weights * fuse_head(c_face, a_face, c_mouth)))

    for tensor, analytic, index in ((c_face, g_face, (1, 2, 0)), (a_face, g_alpha, (2, 3)), (c_mouth, g_mouth, (0, 1, 2))):
        assert central_difference(loss, tensor, index, 1e-6) == pytest.approx(analytic[index], rel=1e-7, abs=1e-10)


def _model(rng, audio_dim=4, expr_dim=3, single=False):
    def branch(tag, count):
        field = replace(random_field(rng, count, sh_degree=1, spread=0.5), branch_tag=tag)
        config = FieldConfig(
            kind=tag, audio_dim=audio_dim, expr_dim=expr_dim, encoder=SMALL_ENCODER,
            attention_resolution=4, hidden=8, depth=2,
        )
        motion = MotionFieldBranch(config, rng, np.float64)
        for key, value in motion.parameters().items():
            if key.startswith("decoder."):
                value[...] = rng.normal(0.0, 0.05, size=value.shape)
        return BranchModel(field=field, motion=motion)

    face = branch(BranchTag.FACE, 8)
    mouth = None if single else branch(BranchTag.MOUTH, 5)
    return TalkingHeadModel(face=face, mouth=mouth, background=np.array([0.9, 0.95, 1.0]))


def _condition(rng):
    return ConditionVector(rng.normal(size=4), rng.uniform(size=3))


def test_render_head_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = _model(rng)
    camera = random_camera(rng, size=20)
    condition = _condition(rng)
    weights = rng.normal(size=(20, 20, 3)) / 400.0
    frame = render_head(model, camera, condition, SMOOTH)
    grads = render_head_backward(frame, weights)

    def loss():
        return float(np.sum(weights * render_head(model, camera, condition, SMOOTH).color))

    for name in ("face", "mouth"):
        branch = model.branches()[name]
        for param in ("sh", "opacities"):
            analytic = getattr(grads[name], param)
            index = np.unravel_index(np.argmax(np.abs(analytic)), analytic.shape)
            numeric = central_difference(loss, getattr(branch.field, param), index, 1e-6)
            assert numeric == pytest.approx(analytic[index], rel=1e-5), (name, param)


def test_single_branch_model_renders_over_the_background():
    rng = np.random.default_rng(3)
    model = _model(rng, single=True)
    camera = random_camera(rng, size=16)
    frame = render_head(model, camera, _condition(rng))
    assert frame.mouth is None
    assert frame.color is frame.face.output.color
    assert frame.face.output.aux.background is not None
    assert set(render_head_backward(frame, np.ones((16, 16, 3)))) == {"face"}


def test_constant_conditions_give_identical_frames(tmp_path):
    rng = np.random.default_rng(4)
    model = _model(rng)
    camera = random_camera(rng, size=16)
    condition = _condition(rng)
    result = render_sequence(model, [camera] * 3, [condition] * 3, out_dir=tmp_path, emit_alpha=True, workers=2, verbose=False)
    assert result.colors[0].tobytes() == result.colors[1].tobytes() == result.colors[2].tobytes()
    assert sorted(p.name for p in (tmp_path / "frames").iterdir()) == ["00000.png", "00001.png", "00002.png"]
    assert sorted(p.name for p in (tmp_path / "alpha").iterdir()) == ["00000.f32", "00001.f32", "00002.f32"]
    alpha = np.frombuffer((tmp_path / "alpha" / "00001.f32").read_bytes(), dtype="<f4").reshape(16, 16)
    np.testing.assert_array_equal(alpha, result.face_alphas[1].astype(np.float32))
    assert result.summary == {"frames": 3}


def test_sequence_worker_count_does_not_change_frames():
    rng = np.random.default_rng(5)
    model = _model(rng)
    cameras = [random_camera(rng, size=16) for _ in range(4)]
    conditions = [_condition(rng) for _ in range(4)]
    serial = render_sequence(model, cameras, conditions, verbose=False)
    threaded = render_sequence(model, cameras, conditions, workers=3, verbose=False)
    for a, b in zip(serial.colors, threaded.colors):
        assert a.tobytes() == b.tobytes()


def test_sequence_argument_checks():
    rng = np.random.default_rng(6)
    model = _model(rng)
    camera = random_camera(rng, size=16)
    with pytest.raises(ValueError, match="track is empty"):
        render_sequence(model, [], [], verbose=False)
    with pytest.raises(ValueError, match="condition track"):
        render_sequence(model, [camera, camera], [_condition(rng)], verbose=False)


def test_model_save_load_renders_identically(tmp_path):
    rng = np.random.default_rng(7)
    model = _model(rng)
    model.save(tmp_path)
    loaded = TalkingHeadModel.load(tmp_path)
    assert loaded.primitive_counts() == {"face": 8, "mouth": 5}
    camera = random_camera(rng, size=16)
    condition = _condition(rng)
    assert render_head(loaded, camera, condition).color.tobytes() == render_head(model, camera, condition).color.tobytes()


def test_model_load_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        TalkingHeadModel.load(tmp_path)
    (tmp_path / "model.json").write_text('{"version": 1, "single_branch": true, "background": [1, 1, 1], "branches": {}}')
    with pytest.raises(CheckpointError, match="no face branch"):
        TalkingHeadModel.load(tmp_path)
    (tmp_path / "model.json").write_text("not json")
    with pytest.raises(CheckpointError, match="malformed"):
        TalkingHeadModel.load(tmp_path)


def test_evaluation_reports_sequence_metrics(tmp_path, tiny_dataset):
    rng = np.random.default_rng(8)
    model = _model(rng)
    result = evaluate(model, tiny_dataset, "all", out_dir=tmp_path, verbose=False)
    frames = tiny_dataset.split("all")
    assert [r["frame"] for r in result.records] == frames
    direct = render_sequence(
        model,
        tiny_dataset.cameras,
        tiny_dataset.conditions,
        targets=list(tiny_dataset.frames),
        verbose=False,
    )
    assert result.summary["psnr"] == pytest.approx(direct.summary["psnr"])
    assert (tmp_path / "summary.json").exists()
    assert (tmp_path / "metrics.jsonl").exists()
