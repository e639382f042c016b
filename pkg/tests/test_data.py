import math
import warnings

import numpy as np
import pytest

from mradnet.data import (
    Annotation,
    DataError,
    SceneObject,
    SequenceSpec,
    annotations_for,
    complex_to_channels,
    gt_confmap,
    load_cruw_sequence,
    make_scene_objects,
    num_windows,
    render_rf_frame,
    render_sequence,
    split_train_test,
    synthesize_dataset,
    window_dataset,
    write_cruw_sequence,
)
from mradnet.geometry import RadarGrid

GRID = RadarGrid(height=32, width=32)


def _spec(objects, noise_std=0.0, seed=0, num_frames=4):
    return SequenceSpec(
        num_frames=num_frames, grid=GRID, noise_std=noise_std, rng_seed=seed,
        objects=objects,
    )


def _static_object(class_id=0, r=10.0, az=0.1, v=0.0, num_frames=4, refl=1.0):
    traj = np.tile([r, az], (num_frames, 1))
    return SceneObject(class_id=class_id, trajectory=traj, radial_velocity=v,
                       reflectivity=refl)


class TestRenderRfFrame:
    def test_zero_velocity_gives_identical_chirps(self):
        frame = render_rf_frame(_spec([_static_object(v=0.0)]), 0)
        for k in range(1, 4):
            assert np.array_equal(frame[k], frame[0])

    def test_nonzero_velocity_rotates_chirp_phase(self):
        spec = _spec([_static_object(v=1.5)])
        spec.objects[0].radial_velocity = 1.5
        frame = render_rf_frame(spec, 0)
        assert not np.array_equal(frame[1], frame[0])
        # same magnitude, rotated phase
        np.testing.assert_allclose(np.abs(frame[1]), np.abs(frame[0]), rtol=1e-5)

    def test_single_object_magnitude_argmax_at_its_bins(self):
        obj = _static_object(r=12.0, az=-0.2)
        spec = _spec([obj])
        frame = render_rf_frame(spec, 0)
        mag = np.abs(frame[0])
        i, j = np.unravel_index(np.argmax(mag), mag.shape)
        ann = annotations_for(spec)[0]
        assert (i, j) == (ann.range_bin, ann.azimuth_bin)

    def test_no_objects_no_noise_is_all_zero(self):
        frame = render_rf_frame(_spec([]), 0)
        assert np.all(frame == 0)

    def test_render_is_deterministic_given_seed(self):
        spec = _spec([_static_object()], noise_std=0.3, seed=42)
        frames1, _ = render_sequence(spec)
        frames2, _ = render_sequence(spec)
        assert np.array_equal(frames1, frames2)

    def test_frame_index_out_of_range(self):
        with pytest.raises(DataError):
            render_rf_frame(_spec([]), 99)

    def test_object_outside_radar_field_rejected(self):
        with pytest.raises(DataError, match="range"):
            render_sequence(_spec([_static_object(r=30.0)]))
        with pytest.raises(DataError, match="azimuth"):
            render_sequence(_spec([_static_object(az=1.5)]))


class TestGtConfmap:
    def test_center_value_is_exactly_one(self):
        maps = gt_confmap([Annotation(0, 1, 10, 12)], 1, 3, 32, 32, [2.0, 3.0, 4.0])
        assert maps[0, 1, 10, 12] == 1.0
        assert maps.shape == (1, 3, 32, 32)

    def test_same_bin_objects_max_compose_to_one(self):
        anns = [Annotation(0, 0, 5, 5), Annotation(0, 0, 5, 5)]
        maps = gt_confmap(anns, 1, 1, 16, 16, [2.0])
        assert maps[0, 0, 5, 5] == 1.0

    def test_value_at_sigma_distance(self):
        maps = gt_confmap([Annotation(0, 0, 8, 8)], 1, 1, 32, 32, [3.0])
        np.testing.assert_allclose(maps[0, 0, 11, 8], math.exp(-0.5), rtol=1e-6)

    def test_values_decrease_away_from_center(self):
        maps = gt_confmap([Annotation(0, 0, 16, 16)], 1, 1, 32, 32, [2.0])
        row = maps[0, 0, 16, 16:]
        assert np.all(np.diff(row) < 0)
        assert maps.min() >= 0.0 and maps.max() <= 1.0

    def test_sigma_validation(self):
        with pytest.raises(DataError):
            gt_confmap([], 1, 2, 8, 8, [1.0])
        with pytest.raises(DataError):
            gt_confmap([], 1, 1, 8, 8, [0.0])


class TestWindowing:
    def test_40_frames_gives_7_windows(self):
        frames = np.zeros((40, 4, 8, 8, 2), dtype=np.float32)
        gt = np.zeros((40, 3, 8, 8), dtype=np.float32)
        wins = list(window_dataset(frames, gt))
        assert len(wins) == 7
        assert [w.start for w in wins] == [0, 4, 8, 12, 16, 20, 24]
        assert wins[0].rf.shape == (16, 4, 8, 8, 2)
        assert wins[0].gt.shape == (16, 3, 8, 8)

    def test_exact_window_length_gives_one(self):
        frames = np.zeros((16, 4, 8, 8, 2), dtype=np.float32)
        gt = np.zeros((16, 1, 8, 8), dtype=np.float32)
        assert len(list(window_dataset(frames, gt))) == 1

    def test_short_sequence_gives_zero_with_warning(self):
        frames = np.zeros((15, 4, 8, 8, 2), dtype=np.float32)
        gt = np.zeros((15, 1, 8, 8), dtype=np.float32)
        with pytest.warns(UserWarning, match="shorter"):
            assert list(window_dataset(frames, gt)) == []
        assert num_windows(15) == 0
        assert num_windows(40) == 7

    def test_every_frame_from_12_in_exactly_one_last4(self):
        frames = np.zeros((40, 4, 8, 8, 2), dtype=np.float32)
        gt = np.zeros((40, 1, 8, 8), dtype=np.float32)
        counts = {}
        for w in window_dataset(frames, gt):
            assert w.eval_offsets == (12, 13, 14, 15)
            for f in w.eval_frames:
                counts[f] = counts.get(f, 0) + 1
        assert sorted(counts) == list(range(12, 40))
        assert set(counts.values()) == {1}


class TestSplit:
    def test_40_sequences_split_36_4(self):
        seqs = [f"s{i}" for i in range(40)]
        train, test = split_train_test(seqs, seed=0)
        assert len(train) == 36 and len(test) == 4
        assert sorted(train + test) == sorted(seqs)

    def test_10_sequences_split_9_1(self):
        train, test = split_train_test([f"s{i}" for i in range(10)], seed=1)
        assert len(train) == 9 and len(test) == 1

    def test_same_seed_same_split(self):
        seqs = [f"s{i}" for i in range(20)]
        assert split_train_test(seqs, seed=7) == split_train_test(seqs, seed=7)

    def test_too_few_sequences(self):
        with pytest.raises(DataError):
            split_train_test(["only"], seed=0)


class TestCruwLayout:
    def test_write_load_round_trip_is_bitwise(self, tmp_path):
        spec = _spec([_static_object()], noise_std=0.2, seed=3, num_frames=6)
        frames, anns = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, anns)
        loaded, loaded_anns = load_cruw_sequence(tmp_path / "seq")
        assert loaded.shape == (6, 4, 32, 32, 2)
        assert np.array_equal(loaded, complex_to_channels(frames))
        assert [(a.frame_index, a.class_id, a.range_bin, a.azimuth_bin) for a in loaded_anns] \
            == [(a.frame_index, a.class_id, a.range_bin, a.azimuth_bin) for a in anns]

    def test_file_count_arithmetic(self, tmp_path):
        synthesize_dataset(tmp_path, 1, 40, 1, seed=0, grid=GRID)
        files = list((tmp_path / "seq_000" / "RADAR_RA_H").glob("*.npy"))
        assert len(files) == 40 * 4

    def test_npy_files_are_v1_containers(self, tmp_path):
        synthesize_dataset(tmp_path, 1, 2, 1, seed=0, grid=GRID)
        raw = (tmp_path / "seq_000" / "RADAR_RA_H" / "000000_0.npy").read_bytes()
        assert raw[:6] == b"\x93NUMPY"
        assert raw[6:8] == b"\x01\x00"  # version 1.0

    def test_empty_annotation_file_still_loads_frames(self, tmp_path):
        spec = _spec([], num_frames=3)
        frames, anns = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, anns)
        loaded, loaded_anns = load_cruw_sequence(tmp_path / "seq")
        assert loaded.shape[0] == 3
        assert loaded_anns == []

    def test_missing_chirp_names_frame_and_chirp(self, tmp_path):
        spec = _spec([], num_frames=2)
        frames, anns = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, anns)
        (tmp_path / "seq" / "RADAR_RA_H" / "000001_2.npy").unlink()
        with pytest.raises(DataError, match="chirp 2 for frame 1"):
            load_cruw_sequence(tmp_path / "seq")

    def test_out_of_range_annotation_rejected(self, tmp_path):
        spec = _spec([], num_frames=2)
        frames, _ = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, [])
        (tmp_path / "seq" / "annot.txt").write_text("0 pedestrian 99 5\n")
        with pytest.raises(DataError, match="outside grid"):
            load_cruw_sequence(tmp_path / "seq")

    def test_malformed_annotation_reports_line_number(self, tmp_path):
        spec = _spec([], num_frames=2)
        frames, _ = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, [])
        (tmp_path / "seq" / "annot.txt").write_text("0 pedestrian 5 5\n0 pedestrian five 5\n")
        with pytest.raises(DataError, match=":2:"):
            load_cruw_sequence(tmp_path / "seq")

    def test_two_channel_real_files_accepted(self, tmp_path):
        spec = _spec([_static_object()], num_frames=2)
        frames, anns = render_sequence(spec)
        write_cruw_sequence(tmp_path / "seq", frames, anns)
        # rewrite one chirp as a real (H, W, 2) array
        ra = tmp_path / "seq" / "RADAR_RA_H" / "000000_0.npy"
        np.save(ra, complex_to_channels(frames[0, 0]))
        loaded, _ = load_cruw_sequence(tmp_path / "seq")
        assert np.array_equal(loaded[0, 0], complex_to_channels(frames[0, 0]))


class TestSceneGeneration:
    def test_objects_respect_field_and_separation(self):
        rng = np.random.default_rng(0)
        objs = make_scene_objects(rng, 3, 40, GRID)
        for o in objs:
            o.validate(GRID, 40)
        assert sorted({o.class_id for o in objs}) == [0, 1, 2]
        # pairwise bin distance at every frame >= 5
        for a in range(3):
            for b in range(a + 1, 3):
                ta, tb = objs[a].trajectory, objs[b].trajectory
                rb = (ta[:, 0] - tb[:, 0]) / GRID.range_step
                ab = (ta[:, 1] - tb[:, 1]) / GRID.azimuth_step
                assert np.hypot(rb, ab).min() >= 5.0

    def test_synthesize_dataset_is_deterministic(self, tmp_path):
        names1 = synthesize_dataset(tmp_path / "a", 2, 18, 2, seed=5, grid=GRID)
        names2 = synthesize_dataset(tmp_path / "b", 2, 18, 2, seed=5, grid=GRID)
        assert names1 == names2
        for name in names1:
            for f in sorted((tmp_path / "a" / name / "RADAR_RA_H").glob("*.npy")):
                other = tmp_path / "b" / name / "RADAR_RA_H" / f.name
                assert f.read_bytes() == other.read_bytes()
            assert (tmp_path / "a" / name / "annot.txt").read_bytes() == \
                (tmp_path / "b" / name / "annot.txt").read_bytes()
