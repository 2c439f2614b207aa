"""Run the estimator over a dataset and collect the run report."""

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from core.config import EstimatorConfig
from core.dataset import Dataset
from core.estimator import EstimateStatus, PoseEstimate, SlidingWindowEstimator
from core.evaluation import Trajectory
from core.events import EventBus
from core.logging import get_logger

logger = get_logger(__name__)


@dataclass
class RunReport:
    mode: str
    frames: int = 0
    keyframes: int = 0
    discarded_frames: int = 0
    mean_iterations: float = 0.0
    rejected_outliers: int = 0
    degraded_frames: int = 0
    marginalizations: int = 0
    rejected_imu_samples: int = 0
    rejected_track_rows: int = 0
    runtime_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ReportCollector:
    """Counts estimator events into a RunReport."""

    def __init__(self, events: EventBus, report: RunReport) -> None:
        self.report = report
        self._iterations = 0
        self._optimized = 0
        events.subscribe(EventBus.FRAME_PROCESSED, self._on_frame)
        events.subscribe(EventBus.FRAME_DISCARDED, self._on_discarded)
        events.subscribe(EventBus.ESTIMATE_DEGRADED, self._on_degraded)
        events.subscribe(EventBus.WINDOW_MARGINALIZED, self._on_marginalized)
        events.subscribe(EventBus.OUTLIERS_REJECTED, self._on_outliers)
        events.subscribe(EventBus.IMU_SAMPLE_REJECTED, self._on_imu_rejected)

    def _on_frame(self, data: Dict[str, Any]) -> None:
        self.report.frames += 1
        if data["keyframe"]:
            self.report.keyframes += 1
        if data["iterations"] > 0:
            self._optimized += 1
            self._iterations += data["iterations"]
            self.report.mean_iterations = self._iterations / self._optimized

    def _on_discarded(self, data: Dict[str, Any]) -> None:
        self.report.discarded_frames += 1

    def _on_degraded(self, data: Dict[str, Any]) -> None:
        self.report.degraded_frames += 1

    def _on_marginalized(self, data: Dict[str, Any]) -> None:
        self.report.marginalizations += 1

    def _on_outliers(self, data: Dict[str, Any]) -> None:
        self.report.rejected_outliers += data["count"]

    def _on_imu_rejected(self, data: Dict[str, Any]) -> None:
        self.report.rejected_imu_samples += 1


def run_odometry(
    config: EstimatorConfig, dataset: Dataset, events: Optional[EventBus] = None
) -> Tuple[Trajectory, RunReport, List[PoseEstimate]]:
    """Feed IMU samples up to each frame time, then the frame itself.

    Every frame gets a pose in the output trajectory, including frames that
    were later discarded from the window.
    """
    events = events or EventBus()
    report = RunReport(mode=config.mode.value, rejected_track_rows=dataset.rejected_track_rows)
    ReportCollector(events, report)
    estimator = SlidingWindowEstimator(config, events)

    start = time.perf_counter()
    imu = dataset.imu if config.mode.uses_imu else []
    next_imu = 0
    estimates: List[PoseEstimate] = []
    for frame in dataset.frames:
        while next_imu < len(imu) and imu[next_imu].t <= frame.t:
            estimator.process_imu(imu[next_imu])
            next_imu += 1
        estimates.append(estimator.process_frame(frame.observations, frame.t))
    report.runtime_s = time.perf_counter() - start

    degraded = sum(1 for e in estimates if e.status is EstimateStatus.DEGRADED)
    logger.info(
        "Processed %d frames in %.2f s (%d keyframes, %d degraded)",
        report.frames,
        report.runtime_s,
        report.keyframes,
        degraded,
    )
    trajectory = Trajectory([e.t for e in estimates], [e.pose for e in estimates])
    return trajectory, report, estimates


def write_report(path: Union[str, Path], report: RunReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
