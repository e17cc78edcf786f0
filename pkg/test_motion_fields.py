import numpy as np
import pytest
from pydantic import ValidationError

from src.core.checkpoint import CheckpointError
from src.core.gaussians import BranchTag, DeformationDelta
from src.motion_fields import (
    BoundingBox,
    ConditionVector,
    EncoderConfig,
    FieldConfig,
    HybridMode,
    MotionFieldBranch,
    TriPlaneHashEncoder,
    encode_position,
    face_deformation,
    field_backward,
    mouth_deformation,
)
from src.motion_fields.checkpoint import load_branch, save_branch
from src.verification.gradcheck import run_gradcheck

SMALL_ENCODER = EncoderConfig(levels=3, features=2, log2_table_size=8, base_resolution=8)


def small_config(kind=BranchTag.FACE, **kwargs):
    return FieldConfig(kind=kind, audio_dim=16, expr_dim=7, encoder=SMALL_ENCODER, attention_resolution=8, hidden=16, **kwargs)


def condition(rng, audio_dim=16, expr_dim=7):
    return ConditionVector(rng.normal(size=audio_dim), rng.uniform(size=expr_dim), {"lips_open": 0.4})


def test_dimensions_follow_branch_kind():
    face = FieldConfig(encoder=EncoderConfig(levels=8, features=2))
    assert face.input_dim == 48 + 16 + 7
    assert face.output_dim == 10
    assert FieldConfig(hybrid=HybridMode.OPACITY_RGB).output_dim == 14
    mouth = FieldConfig(kind=BranchTag.MOUTH)
    assert mouth.input_dim == 48 + 16
    assert mouth.output_dim == 3


def test_mouth_branch_rejects_hybrid_heads():
    with pytest.raises(ValidationError, match="face-type"):
        FieldConfig(kind=BranchTag.MOUTH, hybrid=HybridMode.OPACITY)


def test_encoder_resolutions_grow_geometrically():
    assert EncoderConfig(base_resolution=8, growth=1.5, levels=5).resolutions() == [8, 12, 18, 27, 40]


def test_fresh_branches_start_at_identity():
    rng = np.random.default_rng(0)
    means = rng.uniform(-0.9, 0.9, size=(25, 3)).astype(np.float32)
    face = MotionFieldBranch(small_config(hybrid=HybridMode.OPACITY_RGB), rng)
    out = face_deformation(face, means, rng.normal(size=16), rng.uniform(size=7))
    for part in (out.delta.d_means, out.delta.d_scales, out.delta.d_rotations, out.modification.d_opacities):
        assert np.all(part == 0.0)
    np.testing.assert_allclose(out.modification.colors, 0.5)

    mouth = MotionFieldBranch(small_config(BranchTag.MOUTH), rng)
    out = mouth_deformation(mouth, means, rng.normal(size=16))
    assert np.all(out.delta.d_means == 0.0)
    assert np.all(out.delta.d_rotations == 0.0)


def test_mouth_deformation_is_translation_only():
    rng = np.random.default_rng(1)
    mouth = MotionFieldBranch(small_config(BranchTag.MOUTH), rng)
    for value in mouth.parameters().values():
        value[...] = rng.normal(0.0, 0.3, size=value.shape)
    out = mouth.evaluate(rng.uniform(-0.5, 0.5, size=(9, 3)), condition(rng))
    assert np.any(out.delta.d_means != 0.0)
    assert np.all(out.delta.d_scales == 0.0)
    assert np.all(out.delta.d_rotations == 0.0)


def test_condition_shape_is_checked():
    rng = np.random.default_rng(2)
    face = MotionFieldBranch(small_config(), rng)
    means = np.zeros((4, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="audio feature"):
        face_deformation(face, means, np.zeros(15), np.zeros(7))
    with pytest.raises(ValueError, match="expression"):
        face_deformation(face, means, np.zeros(16), np.zeros(3))
    with pytest.raises(ValueError, match="mouth-type"):
        mouth_deformation(face, means, np.zeros(16))


def test_condition_vector_validation():
    with pytest.raises(ValueError, match="outside"):
        ConditionVector(np.zeros(2), np.zeros(2), {"lips_open": 1.5})
    with pytest.raises(ValueError, match="finite"):
        ConditionVector(np.array([np.nan]), np.zeros(2))


def test_points_outside_bbox_clamp_to_the_boundary():
    encoder = TriPlaneHashEncoder(SMALL_ENCODER, BoundingBox(), np.random.default_rng(3), np.float64)
    np.testing.assert_array_equal(encode_position(encoder, [3.0, 0.2, 0.0]), encode_position(encoder, [1.0, 0.2, 0.0]))
    points = np.array([[3.0, 0.2, 0.0], [0.1, 0.2, 0.3]])
    features, trace = encoder.encode(points)
    _, grad_points = encoder.backward(trace, np.ones_like(features))
    assert grad_points[0, 0] == 0.0
    assert grad_points[1, 0] != 0.0


def test_backward_rejects_foreign_trace():
    rng = np.random.default_rng(4)
    face = MotionFieldBranch(small_config(), rng)
    mouth = MotionFieldBranch(small_config(BranchTag.MOUTH), rng)
    means = np.zeros((3, 3), dtype=np.float32)
    traced = mouth_deformation(mouth, means, np.zeros(16))
    with pytest.raises(ValueError, match="different branch"):
        field_backward(face, traced.trace, DeformationDelta.zeros(3))
    with pytest.raises(ValueError, match="does not match"):
        field_backward(mouth, traced.trace, DeformationDelta.zeros(2))


def test_field_gradients_match_finite_differences():
    results = run_gradcheck(["fields"], "double", configs=2, samples=2, seed=3)
    assert {r.parameter.split("/")[0] for r in results} == {"face", "mouth"}
    for result in results:
        assert result.passed, result.to_dict()


def test_branch_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    branch = MotionFieldBranch(small_config(hybrid=HybridMode.OPACITY), rng)
    for value in branch.parameters().values():
        value[...] = rng.normal(size=value.shape)
    save_branch(branch, tmp_path / "face_motion")
    loaded = load_branch(tmp_path / "face_motion")
    assert loaded.config == branch.config
    for key, value in branch.parameters().items():
        assert loaded.parameters()[key].tobytes() == value.tobytes()
    means = rng.uniform(-0.5, 0.5, size=(6, 3)).astype(np.float32)
    cond = condition(rng)
    np.testing.assert_array_equal(loaded.evaluate(means, cond).delta.d_means, branch.evaluate(means, cond).delta.d_means)


def test_load_parameters_rejects_wrong_shapes(tmp_path):
    branch = MotionFieldBranch(small_config(), np.random.default_rng(6))
    tensors = branch.parameters()
    tensors["decoder.b0"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ValueError, match="decoder.b0"):
        branch.load_parameters(tensors)
    with pytest.raises(CheckpointError):
        load_branch(tmp_path / "absent")


def _level_block(encoder, plane, level):
    f = encoder.config.features
    start = (plane * encoder.config.levels + level) * f
    return slice(start, start + f)


def test_encoding_at_a_grid_vertex_returns_the_table_entry():
    encoder = TriPlaneHashEncoder(SMALL_ENCODER, BoundingBox(), np.random.default_rng(6), np.float64)
    encoder.params["tables"][...] = np.random.default_rng(7).normal(size=encoder.params["tables"].shape)
    features = encode_position(encoder, [0.0, 0.0, 0.0])
    size = SMALL_ENCODER.table_size
    for level, res in enumerate(SMALL_ENCODER.resolutions()):
        i = j = res // 2
        if (res + 1) ** 2 <= size:
            index = i + j * (res + 1)
        else:
            index = (i ^ (j * 2654435761)) % size
        for plane in range(3):
            np.testing.assert_array_equal(
                features[_level_block(encoder, plane, level)], encoder.params["tables"][plane, level, index]
            )


def test_encoding_at_a_cell_midpoint_averages_the_corners():
    encoder = TriPlaneHashEncoder(SMALL_ENCODER, BoundingBox(), np.random.default_rng(6), np.float64)
    encoder.params["tables"][...] = np.random.default_rng(8).normal(size=encoder.params["tables"].shape)
    res = SMALL_ENCODER.resolutions()[0]
    # normalised 4.5 / 8 on every axis
    features = encode_position(encoder, [0.125, 0.125, 0.125])
    corners = [i + j * (res + 1) for i, j in ((4, 4), (5, 4), (4, 5), (5, 5))]
    for plane in range(3):
        expected = encoder.params["tables"][plane, 0, corners].mean(axis=0)
        np.testing.assert_allclose(features[_level_block(encoder, plane, 0)], expected, rtol=1e-12)


def test_closed_audio_gate_makes_the_face_deaf_to_audio():
    rng = np.random.default_rng(9)
    face = MotionFieldBranch(small_config(), rng, np.float64)
    for key, value in face.parameters().items():
        if key.startswith("decoder."):
            value[...] = rng.normal(0.0, 0.3, size=value.shape)
    means = rng.uniform(-0.8, 0.8, size=(12, 3))
    expression = rng.uniform(size=7)
    first, second = rng.normal(size=16), rng.normal(size=16)

    open_a = face_deformation(face, means, first, expression).delta.d_means
    open_b = face_deformation(face, means, second, expression).delta.d_means
    assert not np.array_equal(open_a, open_b)

    face.attention.params["planes"][..., :16] = -60.0
    closed_a = face_deformation(face, means, first, expression)
    closed_b = face_deformation(face, means, second, expression)
    for part in ("d_means", "d_scales", "d_rotations"):
        np.testing.assert_array_equal(getattr(closed_a.delta, part), getattr(closed_b.delta, part))
    other = face_deformation(face, means, first, rng.uniform(size=7)).delta.d_means
    assert not np.array_equal(closed_a.delta.d_means, other)
