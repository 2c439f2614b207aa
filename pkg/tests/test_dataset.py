"""Tests for dataset readers and writers."""

import numpy as np
import pytest

from core.camera import FeatureFrame, FeatureObservation
from core.config import SensorMode
from core.dataset import (
    GROUND_TRUTH_FILE,
    IMU_FILE,
    METADATA_FILE,
    Dataset,
    format_tum_line,
    merge_track_frames,
    nanoseconds,
    read_imu_csv,
    read_tracks_csv,
    read_trajectory_tum,
    seconds,
    tracks_file,
    write_imu_csv,
    write_trajectory_tum,
)
from core.errors import DatasetError, MissingFileError, OrderingError, ParseError
from core.evaluation import Trajectory
from core.imu import ImuSample
from core.manifold import Pose, Rotation
from tests.conftest import random_pose


def write(path, text):
    path.write_text(text)
    return path


class TestTimestamps:
    def test_conversion(self):
        assert nanoseconds(1.5) == 1_500_000_000
        assert seconds(1_500_000_001) == pytest.approx(1.500000001)
        for k in range(1000):
            assert nanoseconds(k / 200) == k * 5_000_000


class TestImuCsv:
    """Test IMU CSV parsing."""

    def test_read(self, temp_dir):
        path = write(
            temp_dir / IMU_FILE,
            "#timestamp_ns,wx,wy,wz,ax,ay,az\n"
            "1000000000,0.1,0.2,0.3,0,0,9.81\n"
            "\n"
            "1005000000, 0, 0, 0, 1, 2, 3\n",
        )
        samples = read_imu_csv(path)
        assert len(samples) == 2
        assert samples[0].t == pytest.approx(1.0)
        np.testing.assert_array_equal(samples[0].gyro, [0.1, 0.2, 0.3])
        np.testing.assert_array_equal(samples[1].accel, [1.0, 2.0, 3.0])

    def test_headerless(self, temp_dir):
        path = write(temp_dir / IMU_FILE, "5,0,0,0,0,0,9.81\n")
        assert len(read_imu_csv(path)) == 1

    def test_wrong_field_count(self, temp_dir):
        path = write(temp_dir / IMU_FILE, "#h\n1,0,0,0,0,0\n")
        with pytest.raises(ParseError) as exc:
            read_imu_csv(path)
        assert exc.value.line == 2

    def test_non_numeric(self, temp_dir):
        path = write(temp_dir / IMU_FILE, "1,0,0,x,0,0,9.81\n")
        with pytest.raises(ParseError):
            read_imu_csv(path)

    def test_non_finite(self, temp_dir):
        path = write(temp_dir / IMU_FILE, "1,0,0,nan,0,0,9.81\n")
        with pytest.raises(ParseError):
            read_imu_csv(path)

    def test_out_of_order(self, temp_dir):
        path = write(temp_dir / IMU_FILE, "2,0,0,0,0,0,9.81\n1,0,0,0,0,0,9.81\n")
        with pytest.raises(OrderingError):
            read_imu_csv(path)

    def test_missing(self, temp_dir):
        with pytest.raises(MissingFileError):
            read_imu_csv(temp_dir / IMU_FILE)

    def test_write_is_lossless(self, temp_dir, rng):
        samples = [ImuSample(0.005 * k, rng.normal(size=3), rng.normal(size=3)) for k in range(1, 20)]
        path = temp_dir / IMU_FILE
        write_imu_csv(path, samples)
        for a, b in zip(read_imu_csv(path), samples):
            assert a.t == pytest.approx(b.t, abs=1e-12)
            np.testing.assert_array_equal(a.gyro, b.gyro)
            np.testing.assert_array_equal(a.accel, b.accel)


class TestTracksCsv:
    """Test feature-track parsing."""

    HEADER = "#frame_id,timestamp_ns,feature_id,camera_id,u,v\n"

    def test_groups_by_frame(self, temp_dir):
        path = write(
            temp_dir / "tracks_cam0.csv",
            self.HEADER
            + "0,500000000,7,0,100.5,200.25\n"
            + "0,500000000,9,0,110,210\n"
            + "1,550000000,7,0,101,201\n",
        )
        table = read_tracks_csv(path)
        assert table.rejected_rows == 0
        assert [f.frame_id for f in table.frames] == [0, 1]
        assert table.frames[1].t == pytest.approx(0.55)
        assert table.frames[0].observations[0] == FeatureObservation(0, 0, 7, (100.5, 200.25))

    def test_out_of_bounds_rejected(self, temp_dir, rig):
        path = write(
            temp_dir / "tracks_cam0.csv",
            self.HEADER + "0,1,1,0,100,100\n0,1,2,0,640,100\n0,1,3,0,-0.5,10\n0,1,4,5,10,10\n",
        )
        table = read_tracks_csv(path, rig)
        assert table.rejected_rows == 3
        assert [o.feature_id for o in table.frames[0].observations] == [1]

    def test_duplicate(self, temp_dir):
        path = write(temp_dir / "t.csv", self.HEADER + "0,1,1,0,1,1\n0,1,1,0,2,2\n")
        with pytest.raises(ParseError):
            read_tracks_csv(path)

    def test_conflicting_frame_time(self, temp_dir):
        path = write(temp_dir / "t.csv", self.HEADER + "0,1,1,0,1,1\n0,2,2,0,2,2\n")
        with pytest.raises(ParseError):
            read_tracks_csv(path)

    def test_frames_out_of_order(self, temp_dir):
        path = write(temp_dir / "t.csv", self.HEADER + "0,2,1,0,1,1\n1,1,1,0,2,2\n")
        with pytest.raises(OrderingError):
            read_tracks_csv(path)

    def test_merge(self):
        left = [FeatureFrame(0, 0.5, [FeatureObservation(0, 0, 3, (1.0, 1.0)), FeatureObservation(0, 0, 1, (2.0, 2.0))])]
        right = [FeatureFrame(0, 0.5, [FeatureObservation(0, 1, 1, (3.0, 3.0))]), FeatureFrame(1, 0.55, [])]
        merged = merge_track_frames([left, right])
        assert [f.frame_id for f in merged] == [0, 1]
        assert [(o.feature_id, o.camera_id) for o in merged[0].observations] == [(1, 0), (1, 1), (3, 0)]

    def test_merge_time_mismatch(self):
        with pytest.raises(DatasetError):
            merge_track_frames([[FeatureFrame(0, 0.5, [])], [FeatureFrame(0, 0.6, [])]])


class TestTum:
    """Test TUM trajectory files."""

    def test_line_format(self):
        line = format_tum_line(1.5, Pose(Rotation.identity(), [1.0, -0.0, 0.25]))
        assert line == "1.500000000 1 0 0.25 0 0 0 1"

    def test_write_read(self, temp_dir, rng):
        traj = Trajectory([0.1 * k for k in range(1, 6)], [random_pose(rng) for _ in range(5)])
        path = temp_dir / "out" / "traj.tum"
        write_trajectory_tum(path, traj)
        loaded = read_trajectory_tum(path)
        np.testing.assert_allclose(loaded.times, traj.times, atol=1e-9)
        for a, b in zip(loaded.poses, traj.poses):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)

    def test_read_comments_and_commas(self, temp_dir):
        path = write(temp_dir / GROUND_TRUTH_FILE, "# t x y z qx qy qz qw\n1.0,0,0,0,0,0,0,1\n\n2.0 1 0 0 0 0 0 2\n")
        traj = read_trajectory_tum(path)
        assert len(traj) == 2
        # quaternions are normalized on read
        np.testing.assert_allclose(traj.poses[1].R.matrix(), np.eye(3), atol=1e-15)

    def test_bad_quaternion(self, temp_dir):
        path = write(temp_dir / GROUND_TRUTH_FILE, "1.0 0 0 0 0 0 0 0\n")
        with pytest.raises(ParseError):
            read_trajectory_tum(path)

    def test_wrong_field_count(self, temp_dir):
        path = write(temp_dir / GROUND_TRUTH_FILE, "1.0 0 0 0 0 0 1\n")
        with pytest.raises(ParseError):
            read_trajectory_tum(path)

    def test_out_of_order(self, temp_dir):
        path = write(temp_dir / GROUND_TRUTH_FILE, "2.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n")
        with pytest.raises(OrderingError):
            read_trajectory_tum(path)


class TestDataset:
    """Test dataset directories."""

    def simulated(self, scenario):
        return Dataset(
            frames=scenario.features(),
            imu=scenario.imu().samples,
            ground_truth=scenario.ground_truth(),
            metadata={"scenario": scenario.name},
        )

    def test_save_load(self, temp_dir, circle_scenario, rig):
        dataset = self.simulated(circle_scenario)
        dataset.save(temp_dir)
        for name in (IMU_FILE, GROUND_TRUTH_FILE, METADATA_FILE, tracks_file(0), tracks_file(1)):
            assert (temp_dir / name).is_file()

        loaded = Dataset.load(temp_dir, SensorMode.STEREO_IMU, rig)
        assert loaded.metadata["scenario"] == "circle"
        assert loaded.metadata["cameras"] == "2"
        assert loaded.rejected_track_rows == 0
        assert len(loaded.imu) == len(dataset.imu)
        assert len(loaded.frames) == len(dataset.frames)
        for a, b in zip(loaded.frames, dataset.frames):
            assert a.frame_id == b.frame_id
            assert nanoseconds(a.t) == nanoseconds(b.t)
            assert a.observations == sorted(b.observations, key=lambda o: (o.feature_id, o.camera_id))
        assert len(loaded.ground_truth) == len(dataset.ground_truth)

    def test_stereo_mode_ignores_imu(self, temp_dir, circle_scenario):
        self.simulated(circle_scenario).save(temp_dir)
        (temp_dir / IMU_FILE).unlink()
        loaded = Dataset.load(temp_dir, SensorMode.STEREO)
        assert loaded.imu == []

    def test_imu_mode_requires_imu(self, temp_dir, circle_scenario):
        self.simulated(circle_scenario).save(temp_dir)
        (temp_dir / IMU_FILE).unlink()
        with pytest.raises(MissingFileError):
            Dataset.load(temp_dir, SensorMode.MONO_IMU)

    def test_stereo_requires_second_camera(self, temp_dir, circle_scenario):
        self.simulated(circle_scenario).save(temp_dir)
        (temp_dir / tracks_file(1)).unlink()
        with pytest.raises(MissingFileError) as exc:
            Dataset.load(temp_dir, SensorMode.STEREO_IMU)
        assert exc.value.path.name == tracks_file(1)
        # mono mode reads camera 0 only
        loaded = Dataset.load(temp_dir, SensorMode.MONO_IMU)
        assert all(o.camera_id == 0 for f in loaded.frames for o in f.observations)

    def test_ground_truth_optional(self, temp_dir, circle_scenario):
        self.simulated(circle_scenario).save(temp_dir)
        (temp_dir / GROUND_TRUTH_FILE).unlink()
        assert Dataset.load(temp_dir, SensorMode.STEREO).ground_truth is None

    def test_missing_directory(self, temp_dir):
        with pytest.raises(MissingFileError):
            Dataset.load(temp_dir / "nope", SensorMode.STEREO)
