import numpy as np
import orjson
import pytest
from PIL import Image

from src.dataio.images import read_png
from src.dataio.jsonl import append_jsonl, read_jsonl, write_jsonl
from src.dataio.loader import load_dataset
from src.dataio.manifest import DatasetError, DatasetManifest, SynthSceneSpec
from src.dataio.synthetic import (
    METRIC_NAMES,
    animate,
    blink_trace,
    build_head,
    generate_synthetic,
    jaw_trace,
    normalized,
)
from src.dataio.track import load_track, track_from_dataset


def _copy_dataset(src, dst):
    for path in src.rglob("*"):
        if path.is_file():
            target = dst / path.relative_to(src)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
    return dst


def test_generation_is_reproducible(tmp_path, tiny_scene, tiny_data_dir):
    again = tmp_path / "again"
    generate_synthetic(tiny_scene, again, verbose=False)
    for path in sorted(tiny_data_dir.rglob("*")):
        if path.is_file():
            assert (again / path.relative_to(tiny_data_dir)).read_bytes() == path.read_bytes(), path.name


def test_dataset_layout(tiny_data_dir, tiny_scene):
    manifest = DatasetManifest.read(tiny_data_dir / "manifest.json")
    assert manifest.frame_count == tiny_scene.frame_count
    assert manifest.train == [0, 1, 2, 3] and manifest.test == [4, 5]
    assert manifest.metric_names == METRIC_NAMES
    assert (tiny_data_dir / "cond" / "a.bin").stat().st_size == 6 * tiny_scene.audio_dim * 4
    assert read_png(tiny_data_dir / "frames" / "00000.png").shape == (16, 16, 3)
    assert (tiny_data_dir / "track_test.json").exists()


def test_lips_open_metric_follows_the_jaw(tiny_dataset, tiny_scene):
    rng = np.random.default_rng(tiny_scene.seed)
    build_head(tiny_scene, rng)
    jaw = jaw_trace(tiny_scene, rng)
    np.testing.assert_allclose(tiny_dataset.metrics["lips_open"], normalized(jaw))
    blink = blink_trace(tiny_scene, rng)
    np.testing.assert_allclose(tiny_dataset.metrics["blink"], normalized(blink))


def test_metrics_lie_in_unit_interval(tiny_dataset):
    for values in tiny_dataset.metrics.values():
        assert np.all((values >= 0.0) & (values <= 1.0))


def test_masks_are_disjoint(tiny_dataset):
    assert not np.any(tiny_dataset.face_masks & tiny_dataset.mouth_masks)


def test_branch_targets_split_the_frame(tiny_dataset):
    mouth = tiny_dataset.mouth_masks[..., None]
    background = tiny_dataset.background
    np.testing.assert_array_equal(np.where(mouth, background, tiny_dataset.frames), tiny_dataset.face_targets)
    np.testing.assert_array_equal(np.where(mouth, tiny_dataset.frames, background), tiny_dataset.mouth_targets)
    np.testing.assert_array_equal(tiny_dataset.target(0, None), tiny_dataset.frames[0])


def test_animation_moves_jaw_lids_and_lower_teeth():
    spec = SynthSceneSpec(seed=1, frame_count=1, width=48, height=48, focal=60.0, orbit_yaw_deg=0.0)
    head = build_head(spec, np.random.default_rng(0))
    closed_face, closed_mouth = animate(head, 0.0, 0.0, spec)
    open_face, open_mouth = animate(head, 1.0, 1.0, spec)
    assert np.all(open_face.means[:, 1] >= closed_face.means[:, 1])
    moved = np.flatnonzero(open_mouth.means[:, 1] != closed_mouth.means[:, 1])
    np.testing.assert_array_equal(moved, head.lower_teeth)
    lids = open_face.means[head.lid_rows, 1] - closed_face.means[head.lid_rows, 1]
    np.testing.assert_allclose(lids, spec.blink_amplitude * 0.11)


def test_static_scene_gives_identical_frames(tmp_path):
    spec = SynthSceneSpec(
        seed=3, face_primitives=48, mouth_primitives=16, frame_count=3, width=16, height=16,
        jaw_amplitude=0.0, blink_amplitude=0.0, orbit_yaw_deg=0.0,
    )
    generate_synthetic(spec, tmp_path, verbose=False)
    first = (tmp_path / "frames" / "00000.png").read_bytes()
    assert (tmp_path / "frames" / "00001.png").read_bytes() == first
    assert (tmp_path / "frames" / "00002.png").read_bytes() == first


def test_budget_too_small_for_the_head():
    with pytest.raises(ValueError):
        SynthSceneSpec(face_primitives=10)


def test_missing_frame_is_reported(tmp_path, tiny_data_dir):
    data = _copy_dataset(tiny_data_dir, tmp_path / "data")
    (data / "frames" / "00002.png").unlink()
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(data, workers=1)


def test_non_binary_mask_is_reported(tmp_path, tiny_data_dir):
    data = _copy_dataset(tiny_data_dir, tmp_path / "data")
    Image.fromarray(np.full((16, 16), 128, dtype=np.uint8)).save(data / "masks_mouth" / "00001.png")
    with pytest.raises(DatasetError, match="not binary"):
        load_dataset(data, workers=1)


def test_malformed_manifest_is_reported(tmp_path, tiny_data_dir):
    data = _copy_dataset(tiny_data_dir, tmp_path / "data")
    manifest = orjson.loads((data / "manifest.json").read_bytes())
    manifest["frame_count"] = 99
    (data / "manifest.json").write_bytes(orjson.dumps(manifest))
    with pytest.raises(DatasetError, match="malformed manifest"):
        load_dataset(data, workers=1)
    with pytest.raises(DatasetError, match="manifest not found"):
        load_dataset(tmp_path / "nowhere", workers=1)


def test_truncated_condition_blob_is_reported(tmp_path, tiny_data_dir):
    data = _copy_dataset(tiny_data_dir, tmp_path / "data")
    blob = data / "cond" / "e.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="expected"):
        load_dataset(data, workers=1)


def test_track_matches_test_split(tiny_data_dir, tiny_dataset):
    track = load_track(tiny_data_dir / "track_test.json", 4, 3)
    expected = track_from_dataset(tiny_dataset, tiny_dataset.test_indices)
    assert len(track) == len(expected) == 2
    for ours, theirs in zip(track.conditions, expected.conditions):
        np.testing.assert_array_equal(ours.audio, theirs.audio)
        np.testing.assert_array_equal(ours.expression, theirs.expression)
    for ours, theirs in zip(track.cameras, expected.cameras):
        np.testing.assert_array_equal(ours.rotation, theirs.rotation)


def test_track_dimension_mismatch(tiny_data_dir, tmp_path):
    with pytest.raises(DatasetError, match="a/e sizes"):
        load_track(tiny_data_dir / "track_test.json", 5, 3)
    with pytest.raises(DatasetError, match="not found"):
        load_track(tmp_path / "missing.json", 4, 3)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DatasetError, match="not valid JSON"):
        load_track(tmp_path / "bad.json", 4, 3)


def test_jsonl_round_trip(tmp_path):
    path = write_jsonl(tmp_path / "log" / "records.jsonl", [{"iter": 0, "loss": 0.5}, {"iter": 1, "loss": np.float64(0.25)}])
    append_jsonl(path, {"iter": 2, "loss": None})
    assert read_jsonl(path) == [{"iter": 0, "loss": 0.5}, {"iter": 1, "loss": 0.25}, {"iter": 2, "loss": None}]
