"""Dataset files: IMU and feature-track CSVs, TUM trajectories, dataset.ini.

Timestamps are integer nanoseconds on disk and seconds in memory; the
conversion happens only in nanoseconds() / seconds().

Directory layout:

    dataset.ini         rates, camera count, scenario, seed
    imu.csv             timestamp_ns,wx,wy,wz,ax,ay,az
    tracks_cam<i>.csv   frame_id,timestamp_ns,feature_id,camera_id,u,v
    groundtruth.tum     timestamp tx ty tz qx qy qz qw
"""

import configparser
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from core.camera import CameraRig, FeatureFrame, FeatureObservation
from core.config import SensorMode
from core.errors import DatasetError, MissingFileError, OrderingError, ParseError
from core.evaluation import Trajectory
from core.imu import ImuSample
from core.logging import get_logger
from core.manifold import Pose, Rotation

logger = get_logger(__name__)

PathLike = Union[str, Path]

IMU_FILE = "imu.csv"
GROUND_TRUTH_FILE = "groundtruth.tum"
METADATA_FILE = "dataset.ini"
IMU_HEADER = ["#timestamp_ns", "wx", "wy", "wz", "ax", "ay", "az"]
TRACKS_HEADER = ["#frame_id", "timestamp_ns", "feature_id", "camera_id", "u", "v"]


def nanoseconds(t: float) -> int:
    return int(round(t * 1e9))


def seconds(ns: int) -> float:
    return ns / 1e9


def tracks_file(camera_id: int) -> str:
    return f"tracks_cam{camera_id}.csv"


def _num(value: float) -> str:
    # shortest form that round-trips a double; -0.0 printed as 0
    return format(float(value) + 0.0, ".17g")


def _rows(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Non-empty CSV rows with their 1-based line numbers, header skipped."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            first = row[0].strip()
            if first.startswith("#"):
                continue
            if reader.line_num == 1 and not first.lstrip("-").isdigit():
                continue
            yield reader.line_num, [cell.strip() for cell in row]


def _parse_int(path: Path, line: int, raw: str, name: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ParseError(path, line, f"{name} is not an integer: {raw!r}") from None


def _parse_floats(path: Path, line: int, raw: Sequence[str], name: str) -> np.ndarray:
    try:
        values = np.array([float(x) for x in raw])
    except ValueError:
        raise ParseError(path, line, f"{name} is not numeric: {list(raw)}") from None
    if not np.all(np.isfinite(values)):
        raise ParseError(path, line, f"{name} is not finite: {list(raw)}")
    return values


# ----------------------------------------------------------------------
# IMU
# ----------------------------------------------------------------------


def read_imu_csv(path: PathLike) -> List[ImuSample]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    samples: List[ImuSample] = []
    last_ns: Optional[int] = None
    for line, row in _rows(path):
        if len(row) != 7:
            raise ParseError(path, line, f"expected 7 fields, got {len(row)}")
        t_ns = _parse_int(path, line, row[0], "timestamp")
        values = _parse_floats(path, line, row[1:], "measurement")
        if last_ns is not None and t_ns <= last_ns:
            raise OrderingError(f"{path}:{line}: timestamp {t_ns} not after {last_ns}")
        last_ns = t_ns
        samples.append(ImuSample(seconds(t_ns), values[0:3], values[3:6]))
    logger.debug("Read %d IMU samples from %s", len(samples), path)
    return samples


def write_imu_csv(path: PathLike, samples: Sequence[ImuSample]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(IMU_HEADER)
        for s in samples:
            writer.writerow([nanoseconds(s.t)] + [_num(v) for v in (*s.gyro, *s.accel)])


# ----------------------------------------------------------------------
# Feature tracks
# ----------------------------------------------------------------------


class TrackTable(NamedTuple):
    frames: List[FeatureFrame]
    rejected_rows: int


def read_tracks_csv(path: PathLike, rig: Optional[CameraRig] = None) -> TrackTable:
    """Observations grouped by frame id in order of first appearance.

    With a rig, rows whose camera is unknown or whose pixel lies outside the
    image are dropped and counted.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    frames: Dict[int, Tuple[int, List[FeatureObservation]]] = {}
    seen = set()
    rejected = 0
    for line, row in _rows(path):
        if len(row) != 6:
            raise ParseError(path, line, f"expected 6 fields, got {len(row)}")
        frame_id = _parse_int(path, line, row[0], "frame_id")
        t_ns = _parse_int(path, line, row[1], "timestamp")
        feature_id = _parse_int(path, line, row[2], "feature_id")
        camera_id = _parse_int(path, line, row[3], "camera_id")
        u, v = _parse_floats(path, line, row[4:6], "pixel")
        key = (frame_id, feature_id, camera_id)
        if key in seen:
            raise ParseError(
                path, line, f"duplicate observation of feature {feature_id} by camera {camera_id} in frame {frame_id}"
            )
        seen.add(key)
        if frame_id in frames:
            if frames[frame_id][0] != t_ns:
                raise ParseError(path, line, f"frame {frame_id} has conflicting timestamps")
        else:
            frames[frame_id] = (t_ns, [])
        if rig is not None:
            if not 0 <= camera_id < len(rig) or not rig[camera_id].intrinsics.in_bounds((u, v)):
                rejected += 1
                continue
        frames[frame_id][1].append(FeatureObservation(frame_id, camera_id, feature_id, (float(u), float(v))))

    result = []
    last_ns: Optional[int] = None
    for frame_id, (t_ns, obs) in frames.items():
        if last_ns is not None and t_ns <= last_ns:
            raise OrderingError(f"{path}: frame {frame_id} timestamp {t_ns} not after {last_ns}")
        last_ns = t_ns
        result.append(FeatureFrame(frame_id, seconds(t_ns), obs))
    if rejected:
        logger.warning("Rejected %d out-of-bounds track rows in %s", rejected, path)
    return TrackTable(result, rejected)


def write_tracks_csv(path: PathLike, frames: Sequence[FeatureFrame], camera_id: Optional[int] = None) -> None:
    """Write frames; with camera_id only that camera's observations."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACKS_HEADER)
        for frame in frames:
            t_ns = nanoseconds(frame.t)
            for o in frame.observations:
                if camera_id is not None and o.camera_id != camera_id:
                    continue
                writer.writerow(
                    [o.frame_id, t_ns, o.feature_id, o.camera_id, _num(o.uv[0]), _num(o.uv[1])]
                )


def merge_track_frames(tables: Sequence[Sequence[FeatureFrame]]) -> List[FeatureFrame]:
    """Join per-camera frame lists on frame id, observations ordered by (feature, camera)."""
    merged: Dict[int, Tuple[float, List[FeatureObservation]]] = {}
    for frames in tables:
        for frame in frames:
            if frame.frame_id in merged:
                t, obs = merged[frame.frame_id]
                if nanoseconds(t) != nanoseconds(frame.t):
                    raise DatasetError(f"frame {frame.frame_id} has different timestamps across cameras")
                obs.extend(frame.observations)
            else:
                merged[frame.frame_id] = (frame.t, list(frame.observations))
    out = [
        FeatureFrame(fid, t, sorted(obs, key=lambda o: (o.feature_id, o.camera_id)))
        for fid, (t, obs) in merged.items()
    ]
    out.sort(key=lambda f: f.t)
    return out


# ----------------------------------------------------------------------
# Trajectories
# ----------------------------------------------------------------------


def format_tum_line(t: float, pose: Pose) -> str:
    values = [*pose.p, *pose.R.as_xyzw()]
    return f"{t:.9f} " + " ".join(_num(v) for v in values)


def write_trajectory_tum(path: PathLike, traj: Trajectory) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for t, pose in zip(traj.times, traj.poses):
            f.write(format_tum_line(t, pose) + "\n")


def read_trajectory_tum(path: PathLike) -> Trajectory:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    times: List[float] = []
    poses: List[Pose] = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if len(fields) != 8:
                raise ParseError(path, line_no, f"expected 8 fields, got {len(fields)}")
            values = _parse_floats(path, line_no, fields, "pose")
            if times and values[0] <= times[-1]:
                raise OrderingError(f"{path}:{line_no}: timestamp {values[0]} not after {times[-1]}")
            try:
                rotation = Rotation.from_xyzw(values[4:8])
            except ValueError as e:
                raise ParseError(path, line_no, str(e)) from None
            times.append(float(values[0]))
            poses.append(Pose(rotation, values[1:4]))
    return Trajectory(times, poses)


# ----------------------------------------------------------------------
# Dataset directories
# ----------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    frames: List[FeatureFrame]
    imu: List[ImuSample] = field(default_factory=list)
    ground_truth: Optional[Trajectory] = None
    metadata: Dict[str, str] = field(default_factory=dict)
    rejected_track_rows: int = 0
    camera_count: int = 2

    @classmethod
    def load(cls, root: PathLike, mode: SensorMode, rig: Optional[CameraRig] = None) -> "Dataset":
        """Read every file the mode needs; a missing or corrupt one rejects the dataset."""
        root = Path(root)
        if not root.is_dir():
            raise MissingFileError(root, "dataset directory does not exist")

        metadata: Dict[str, str] = {}
        meta_path = root / METADATA_FILE
        if meta_path.is_file():
            parser = configparser.ConfigParser()
            try:
                parser.read(meta_path)
            except configparser.Error as e:
                raise DatasetError(f"{meta_path}: {e}") from None
            if parser.has_section("dataset"):
                metadata = dict(parser["dataset"])

        tables = []
        rejected = 0
        for camera_id in range(mode.camera_count):
            path = root / tracks_file(camera_id)
            if not path.is_file():
                raise MissingFileError(path, f"required in {mode.value} mode")
            table = read_tracks_csv(path, rig)
            tables.append(table.frames)
            rejected += table.rejected_rows

        imu: List[ImuSample] = []
        if mode.uses_imu:
            imu_path = root / IMU_FILE
            if not imu_path.is_file():
                raise MissingFileError(imu_path, f"required in {mode.value} mode")
            imu = read_imu_csv(imu_path)

        gt_path = root / GROUND_TRUTH_FILE
        ground_truth = read_trajectory_tum(gt_path) if gt_path.is_file() else None

        frames = merge_track_frames(tables)
        logger.info(
            "Loaded dataset %s: %d frames, %d IMU samples", root, len(frames), len(imu)
        )
        return cls(frames, imu, ground_truth, metadata, rejected, mode.camera_count)

    def save(self, root: PathLike) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for camera_id in range(self.camera_count):
            write_tracks_csv(root / tracks_file(camera_id), self.frames, camera_id)
        write_imu_csv(root / IMU_FILE, self.imu)
        if self.ground_truth is not None:
            write_trajectory_tum(root / GROUND_TRUTH_FILE, self.ground_truth)
        parser = configparser.ConfigParser()
        parser["dataset"] = {**self.metadata, "cameras": str(self.camera_count)}
        with open(root / METADATA_FILE, "w") as f:
            parser.write(f)
        logger.info("Saved dataset to %s", root)
