"""Tests for dataset runs and the run report."""

import json

import numpy as np
import pytest

from core.config import SensorMode
from core.dataset import Dataset
from core.estimator import EstimateStatus
from core.evaluation import ate_rmse
from core.events import EventBus
from core.pipeline import ReportCollector, RunReport, run_odometry, write_report


@pytest.fixture(scope="module")
def circle_dataset(circle_scenario):
    return Dataset(
        frames=circle_scenario.features()[:30],
        imu=circle_scenario.imu().samples,
        ground_truth=circle_scenario.ground_truth(),
    )


class TestReportCollector:
    """Test event counting."""

    def test_counts(self):
        bus = EventBus()
        report = RunReport(mode="stereo")
        ReportCollector(bus, report)
        bus.publish(EventBus.FRAME_PROCESSED, {"keyframe": True, "iterations": 0})
        bus.publish(EventBus.FRAME_PROCESSED, {"keyframe": True, "iterations": 4})
        bus.publish(EventBus.FRAME_PROCESSED, {"keyframe": False, "iterations": 2})
        bus.publish(EventBus.FRAME_DISCARDED, {"frame_id": 2})
        bus.publish(EventBus.OUTLIERS_REJECTED, {"count": 3, "feature_ids": [1, 2, 3]})
        bus.publish(EventBus.OUTLIERS_REJECTED, {"count": 2, "feature_ids": [4, 5]})
        bus.publish(EventBus.WINDOW_MARGINALIZED, {"frame_id": 0, "prior_dim": 15})
        bus.publish(EventBus.ESTIMATE_DEGRADED, {"frame_id": 5, "reason": "x"})
        bus.publish(EventBus.IMU_SAMPLE_REJECTED, {"t": 1.0, "last_t": 1.0})
        assert report.frames == 3
        assert report.keyframes == 2
        assert report.discarded_frames == 1
        assert report.mean_iterations == pytest.approx(3.0)
        assert report.rejected_outliers == 5
        assert report.marginalizations == 1
        assert report.degraded_frames == 1
        assert report.rejected_imu_samples == 1

    def test_write_report(self, temp_dir):
        report = RunReport(mode="stereo-imu", frames=4, keyframes=3, runtime_s=0.5)
        path = temp_dir / "run" / "report.json"
        write_report(path, report)
        data = json.loads(path.read_text())
        assert data["mode"] == "stereo-imu"
        assert data["frames"] == 4
        assert set(data) == set(report.to_dict())


class TestRunOdometry:
    """Test running the estimator over a dataset."""

    def test_every_frame_has_a_pose(self, circle_scenario, circle_dataset):
        trajectory, report, estimates = run_odometry(circle_scenario.config(window_size=6), circle_dataset)
        assert len(trajectory) == len(circle_dataset.frames) == report.frames
        np.testing.assert_allclose(trajectory.times, [f.t for f in circle_dataset.frames])
        assert report.keyframes == sum(e.keyframe for e in estimates)
        assert report.keyframes + report.discarded_frames == report.frames
        assert report.degraded_frames == sum(e.status is EstimateStatus.DEGRADED for e in estimates)
        assert report.mode == "stereo-imu"
        assert report.runtime_s > 0
        assert ate_rmse(trajectory, circle_dataset.ground_truth) < 5e-3

    def test_events_forwarded(self, circle_scenario, circle_dataset):
        bus = EventBus()
        seen = []
        bus.subscribe(EventBus.FRAME_PROCESSED, lambda d: seen.append(d["frame_id"]))
        run_odometry(circle_scenario.config(), circle_dataset, bus)
        assert seen == [f.frame_id for f in circle_dataset.frames]

    def test_out_of_order_imu_counted(self, circle_scenario, circle_dataset):
        imu = list(circle_dataset.imu)
        imu.insert(120, imu[119])
        dataset = Dataset(circle_dataset.frames[:5], imu)
        _, report, _ = run_odometry(circle_scenario.config(), dataset)
        assert report.rejected_imu_samples == 1

    def test_stereo_ignores_imu(self, circle_scenario, circle_dataset):
        config = circle_scenario.config().with_mode(SensorMode.STEREO)
        trajectory, report, _ = run_odometry(config, circle_dataset)
        assert report.rejected_imu_samples == 0
        assert report.mode == "stereo"
        assert len(trajectory) == len(circle_dataset.frames)
