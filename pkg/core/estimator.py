"""Sliding-window visual(-inertial) odometry.

The estimator is a single-owner state machine: feed IMU samples with
process_imu() and feature tracks with process_frame(), both in timestamp
order. Each frame is predicted (IMU preintegration or constant velocity),
its tracks are attached to landmarks, the window is optimized and finally
either the new frame is discarded (not a keyframe) or, when the window is
over capacity, the oldest frame is marginalized into a prior.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import scipy.linalg

from core.camera import (
    EPS_DEPTH,
    CameraRig,
    FeatureObservation,
    Landmark,
    ReprojectionFactor,
    StereoFactor,
    backproject,
    bearing,
    reprojection_residual,
)
from core.config import EstimatorConfig
from core.errors import (
    GeometryError,
    InsufficientDataError,
    ModeError,
    NoTriangulationError,
    OdometryError,
    OrderingError,
)
from core.events import EventBus
from core.imu import (
    ImuFactor,
    ImuSample,
    Preintegration,
    gravity_vector,
    interpolate_sample,
    needs_repropagation,
    predict_state,
    preintegrate,
    repropagate,
)
from core.logging import get_logger
from core.manifold import Pose, Rotation, so3_exp, so3_log
from core.solver import (
    INV_DEPTH,
    POSE,
    SPEED_BIAS,
    BlockId,
    BlockLayout,
    FactorGraph,
    GaugeFactor,
    OptimizationReport,
    PriorFactor,
    Values,
    linearize_graph,
    marginalize,
    optimize,
)

logger = get_logger(__name__)

MIN_PARALLAX_RAD = 0.01
KEYFRAME_TRACK_RATIO = 0.6


def pose_id(frame_id: int) -> BlockId:
    return BlockId(POSE, frame_id)


def sb_id(frame_id: int) -> BlockId:
    return BlockId(SPEED_BIAS, frame_id)


def rho_id(feature_id: int) -> BlockId:
    return BlockId(INV_DEPTH, feature_id)


class EstimateStatus(Enum):
    OK = "ok"
    DEGRADED = "degraded"


@dataclass
class FrameState:
    frame_id: int
    t: float
    pose: Pose
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def speed_bias(self) -> np.ndarray:
        return np.concatenate([self.v, self.ba, self.bg])

    def set_speed_bias(self, sb: np.ndarray) -> None:
        sb = np.asarray(sb, dtype=float)
        self.v, self.ba, self.bg = sb[0:3].copy(), sb[3:6].copy(), sb[6:9].copy()


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    frame_id: int
    t: float
    pose: Pose
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    status: EstimateStatus
    keyframe: bool
    iterations: int = 0


@dataclass
class WindowState:
    frames: List[FrameState] = field(default_factory=list)
    preintegrations: List[Preintegration] = field(default_factory=list)
    landmarks: "OrderedDict[int, Landmark]" = field(default_factory=OrderedDict)
    prior: Optional[PriorFactor] = None

    def poses(self) -> Dict[int, Pose]:
        return {f.frame_id: f.pose for f in self.frames}

    def active_landmarks(self) -> List[Landmark]:
        return [lm for lm in self.landmarks.values() if lm.active]


@dataclass
class EstimatorStats:
    frames: int = 0
    keyframes: int = 0
    discarded_frames: int = 0
    optimizations: int = 0
    iterations: int = 0
    rejected_outliers: int = 0
    degraded_frames: int = 0
    marginalizations: int = 0
    rejected_imu_samples: int = 0

    @property
    def mean_iterations(self) -> float:
        return self.iterations / self.optimizations if self.optimizations else 0.0


def triangulate(
    observations: Sequence[FeatureObservation],
    poses: Dict[int, Pose],
    rig: CameraRig,
    min_parallax: float = MIN_PARALLAX_RAD,
) -> float:
    """Linear (DLT) triangulation in the first observation's camera frame.

    Returns the inverse depth along the anchor ray.
    """
    if len(observations) < 2:
        raise NoTriangulationError("need at least two observations")
    anchor = observations[0]
    T_wa = poses[anchor.frame_id] * rig[anchor.camera_id].T_bc
    ray_a = bearing(rig[anchor.camera_id].intrinsics, anchor.uv)
    ray_a = ray_a / np.linalg.norm(ray_a)

    rows = []
    parallax = 0.0
    for obs in observations:
        cam = rig[obs.camera_id]
        T_ca = (poses[obs.frame_id] * cam.T_bc).inverse() * T_wa
        P = T_ca.matrix()[:3]
        x = bearing(cam.intrinsics, obs.uv)
        rows.append(x[0] * P[2] - P[0])
        rows.append(x[1] * P[2] - P[1])
        ray = T_ca.R.inverse().rotate(x)
        cos_angle = np.clip(ray @ ray_a / np.linalg.norm(ray), -1.0, 1.0)
        parallax = max(parallax, float(np.arccos(cos_angle)))

    if parallax < min_parallax:
        raise NoTriangulationError(f"parallax {parallax:.4g} rad below {min_parallax:.4g}")
    _, _, Vt = scipy.linalg.svd(np.asarray(rows))
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise NoTriangulationError("point at infinity")
    depth = X[2] / X[3]
    if not depth > EPS_DEPTH:
        raise NoTriangulationError(f"triangulated depth {depth:.4g} m is not in front of the camera")
    return 1.0 / depth


def gravity_aligned_rotation(specific_force: np.ndarray) -> Rotation:
    """Zero-yaw attitude whose body-frame specific force points to world up."""
    u = np.asarray(specific_force, dtype=float)
    u = u / np.linalg.norm(u)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(u, ez)
    s = np.linalg.norm(axis)
    c = float(u @ ez)
    if s < 1e-12:
        R = Rotation.identity() if c > 0 else so3_exp(np.array([np.pi, 0.0, 0.0]))
    else:
        R = so3_exp(axis / s * np.arctan2(s, c))
    return Rotation.from_yaw(-R.yaw()) * R


class SlidingWindowEstimator:
    def __init__(self, config: EstimatorConfig, events: Optional[EventBus] = None) -> None:
        self.config = config
        self.mode = config.mode
        self.rig = config.rig
        self.events = events or EventBus()
        self.gravity = gravity_vector(config.gravity_norm)
        self.window = WindowState()
        self.stats = EstimatorStats()
        self._imu_buffer: List[ImuSample] = []
        self._last_imu_t: Optional[float] = None
        self._blacklist: Set[int] = set()
        self._last_keyframe_tracked = 0
        self._history: List[PoseEstimate] = []
        self._next_frame_id = 0

    @property
    def blacklist(self) -> FrozenSet[int]:
        """Feature ids rejected as outliers whose tracks are still running."""
        return frozenset(self._blacklist)

    # ------------------------------------------------------------------
    # Inputs
    # ------------------------------------------------------------------

    def process_imu(self, sample: ImuSample) -> None:
        if not self.mode.uses_imu:
            raise ModeError(f"IMU samples are not used in {self.mode.value} mode")
        if self._last_imu_t is not None and sample.t <= self._last_imu_t:
            self.stats.rejected_imu_samples += 1
            logger.warning(
                "Rejected out-of-order IMU sample at %.9f (last %.9f)", sample.t, self._last_imu_t
            )
            self.events.publish(
                EventBus.IMU_SAMPLE_REJECTED, {"t": sample.t, "last_t": self._last_imu_t}
            )
            return
        self._imu_buffer.append(sample)
        self._last_imu_t = sample.t

    def predict(self) -> Optional[Tuple[float, Pose, np.ndarray]]:
        """IMU-propagated (t, pose, velocity) at the newest buffered sample."""
        if not self.window.frames:
            return None
        last = self.window.frames[-1]
        if not self.mode.uses_imu or len(self._imu_buffer) < 2:
            return last.t, last.pose, last.v.copy()
        P = preintegrate(
            self._imu_buffer, last.ba, last.bg, self.config.imu_noise, with_covariance=False
        )
        pose, v = predict_state(last.pose, last.v, P, last.ba, last.bg, self.gravity)
        return P.t_end, pose, v

    def process_frame(self, observations: Sequence[FeatureObservation], t: float) -> PoseEstimate:
        frames = self.window.frames
        if frames and not t > frames[-1].t:
            raise OrderingError(f"frame time {t:.9f} is not after {frames[-1].t:.9f}")
        obs = [o for o in observations if o.camera_id < self.mode.camera_count]
        # a rejected id stays blocked only while its track continues
        self._blacklist.intersection_update(o.feature_id for o in obs)
        frame_id = obs[0].frame_id if obs else self._next_frame_id
        self._next_frame_id = frame_id + 1
        self.stats.frames += 1

        if not frames:
            return self._bootstrap(frame_id, t, obs)

        keyframe = self.select_keyframe(obs)
        state, preint = self._predict_frame(frame_id, t)
        frames.append(state)
        if preint is not None:
            self.window.preintegrations.append(preint)
        tracked = self._add_observations(frame_id, obs)
        self._triangulate_pending()

        status = EstimateStatus.OK
        iterations = 0
        reason = ""
        if tracked < self.config.tracker.min_tracked:
            status = EstimateStatus.DEGRADED
            reason = f"only {tracked} tracked features"
        else:
            try:
                iterations = self._optimize_window().iterations
                if self.reject_outliers():
                    iterations += self._optimize_window().iterations
            except OdometryError as e:
                status = EstimateStatus.DEGRADED
                reason = str(e)
        if status is EstimateStatus.DEGRADED:
            self.stats.degraded_frames += 1
            logger.warning("Frame %d degraded: %s", frame_id, reason)
            self.events.publish(
                EventBus.ESTIMATE_DEGRADED, {"frame_id": frame_id, "reason": reason}
            )

        estimate = self._snapshot(frames[-1], status, keyframe, iterations)
        if keyframe:
            self.stats.keyframes += 1
            self._last_keyframe_tracked = self._count_reference_tracks(obs)
        self.slide_window(keyframe)
        self._finish(estimate)
        return estimate

    # ------------------------------------------------------------------
    # Bootstrap and prediction
    # ------------------------------------------------------------------

    def _bootstrap(self, frame_id: int, t: float, obs: Sequence[FeatureObservation]) -> PoseEstimate:
        if self.mode.uses_imu:
            t0 = t - self.config.init.static_window_s
            static = [s for s in self._imu_buffer if t0 <= s.t <= t]
            if len(static) < 2:
                raise InsufficientDataError(
                    f"{self.mode.value} needs IMU samples in the {self.config.init.static_window_s} s before the first frame"
                )
            f_mean = np.mean([s.accel for s in static], axis=0)
            bg = np.mean([s.gyro for s in static], axis=0)
            state = FrameState(frame_id, t, Pose(gravity_aligned_rotation(f_mean), np.zeros(3)))
            state.bg = bg
            _, self._imu_buffer = self._split_buffer(t, t)
            self.window.prior = self._initial_prior(state)
            logger.info(
                "Initialized attitude from %d static samples, gyro bias %s", len(static), bg
            )
        else:
            state = FrameState(frame_id, t, Pose.identity())
        self.window.frames.append(state)
        self._add_observations(frame_id, obs)
        self._triangulate_pending()
        estimate = self._snapshot(state, EstimateStatus.OK, True, 0)
        self.stats.keyframes += 1
        self._last_keyframe_tracked = self._count_reference_tracks(obs)
        self._finish(estimate)
        return estimate

    def _initial_prior(self, state: FrameState) -> PriorFactor:
        init = self.config.init
        info = np.concatenate(
            [
                np.zeros(3),
                np.full(3, init.attitude_sigma**-2),
                np.full(3, init.velocity_sigma**-2),
                np.full(3, init.accel_bias_sigma**-2),
                np.full(3, init.gyro_bias_sigma**-2),
            ]
        )
        ids = [pose_id(state.frame_id), sb_id(state.frame_id)]
        lin = {ids[0]: state.pose, ids[1]: state.speed_bias()}
        return PriorFactor(ids, np.diag(info), np.zeros(15), lin)

    def _split_buffer(self, t_start: float, t_end: float) -> Tuple[List[ImuSample], List[ImuSample]]:
        """Samples on [t_start, t_end] with boundary samples, and the rest from t_end on."""
        inside = [s for s in self._imu_buffer if t_start <= s.t <= t_end]
        after = [s for s in self._imu_buffer if s.t > t_end]
        if not inside and not after:
            raise InsufficientDataError(f"no IMU samples up to t={t_end:.9f}")
        if not inside:
            inside = [ImuSample(t_end, after[0].gyro, after[0].accel)]
        if inside[0].t > t_start:
            inside.insert(0, ImuSample(t_start, inside[0].gyro, inside[0].accel))
        if inside[-1].t < t_end:
            if after:
                inside.append(interpolate_sample(inside[-1], after[0], t_end))
            else:
                inside.append(ImuSample(t_end, inside[-1].gyro, inside[-1].accel))
        return inside, [inside[-1]] + after

    def _predict_frame(self, frame_id: int, t: float) -> Tuple[FrameState, Optional[Preintegration]]:
        last = self.window.frames[-1]
        if self.mode.uses_imu:
            segment, self._imu_buffer = self._split_buffer(last.t, t)
            P = preintegrate(segment, last.ba, last.bg, self.config.imu_noise)
            pose, v = predict_state(last.pose, last.v, P, last.ba, last.bg, self.gravity)
            return FrameState(frame_id, t, pose, v, last.ba.copy(), last.bg.copy()), P
        return FrameState(frame_id, t, self._extrapolate(t)), None

    def _extrapolate(self, t: float) -> Pose:
        """Constant-velocity extrapolation from the last two reported estimates."""
        if len(self._history) < 2:
            return self.window.frames[-1].pose
        h0, h1 = self._history[-2], self._history[-1]
        ratio = (t - h1.t) / (h1.t - h0.t)
        phi = so3_log(h0.pose.R.inverse() * h1.pose.R)
        return Pose(h1.pose.R * so3_exp(ratio * phi), h1.pose.p + ratio * (h1.pose.p - h0.pose.p))

    # ------------------------------------------------------------------
    # Landmarks
    # ------------------------------------------------------------------

    def _add_observations(self, frame_id: int, obs: Sequence[FeatureObservation]) -> int:
        groups: "OrderedDict[int, List[FeatureObservation]]" = OrderedDict()
        for o in obs:
            groups.setdefault(o.feature_id, []).append(o)
        tracked = 0
        for feature_id, group in groups.items():
            if feature_id in self._blacklist:
                continue
            group = sorted(group, key=lambda o: o.camera_id)
            landmark = self.window.landmarks.get(feature_id)
            if landmark is not None:
                landmark.observations.extend(group)
                tracked += 1
                continue
            anchor = group[0]
            self.window.landmarks[feature_id] = Landmark(
                feature_id=feature_id,
                anchor_frame=frame_id,
                anchor_camera=anchor.camera_id,
                anchor_uv=np.asarray(anchor.uv, dtype=float),
                observations=list(group),
            )
        return tracked

    def _triangulate_pending(self) -> None:
        poses = self.window.poses()
        for landmark in self.window.landmarks.values():
            if landmark.triangulated or len(landmark.observations) < 2:
                continue
            try:
                landmark.inv_depth = triangulate(landmark.observations, poses, self.rig)
            except NoTriangulationError as e:
                logger.debug("Landmark %d pending: %s", landmark.feature_id, e)

    def _count_reference_tracks(self, obs: Sequence[FeatureObservation]) -> int:
        return len({o.feature_id for o in obs if o.camera_id == 0 and o.feature_id not in self._blacklist})

    def select_keyframe(self, observations: Sequence[FeatureObservation]) -> bool:
        """Parallax / track-loss keyframe test against the newest window frame."""
        if not self.window.frames:
            return True
        last = self.window.frames[-1]
        parallaxes = []
        tracked = 0
        seen: Set[int] = set()
        for o in observations:
            if o.camera_id != 0 or o.feature_id in self._blacklist or o.feature_id in seen:
                continue
            seen.add(o.feature_id)
            landmark = self.window.landmarks.get(o.feature_id)
            if landmark is None:
                continue
            tracked += 1
            prev = landmark.observation(last.frame_id, 0)
            if prev is not None:
                parallaxes.append(np.hypot(o.uv[0] - prev.uv[0], o.uv[1] - prev.uv[1]))
        if not parallaxes:
            return True
        if np.mean(parallaxes) >= self.config.tracker.keyframe_parallax_px:
            return True
        return tracked < KEYFRAME_TRACK_RATIO * self._last_keyframe_tracked

    # ------------------------------------------------------------------
    # Optimization
    # ------------------------------------------------------------------

    def _observation_factor(
        self, landmark: Landmark, obs: FeatureObservation
    ) -> Union[ReprojectionFactor, StereoFactor]:
        tracker = self.config.tracker
        huber_px = self.config.solver.huber_px
        rid = rho_id(landmark.feature_id)
        cam_a = self.rig[landmark.anchor_camera]
        cam_o = self.rig[obs.camera_id]
        if obs.frame_id == landmark.anchor_frame:
            return StereoFactor(
                rid, cam_a, cam_o, landmark.anchor_uv, obs.uv, tracker.sigma_px, huber_px
            )
        return ReprojectionFactor(
            pose_id(landmark.anchor_frame),
            pose_id(obs.frame_id),
            rid,
            cam_a,
            cam_o,
            landmark.anchor_uv,
            obs.uv,
            tracker.sigma_px,
            huber_px,
        )

    def build_graph(
        self, include_gauge: bool = True, include_landmarks: bool = True
    ) -> Tuple[FactorGraph, Values]:
        window = self.window
        uses_imu = self.mode.uses_imu
        layout = BlockLayout()
        values: Values = {}
        for f in window.frames:
            layout.add(pose_id(f.frame_id), 6)
            values[pose_id(f.frame_id)] = f.pose
            if uses_imu:
                layout.add(sb_id(f.frame_id), 9)
                values[sb_id(f.frame_id)] = f.speed_bias()

        graph = FactorGraph(layout=layout)
        for landmark in window.active_landmarks() if include_landmarks else []:
            rid = rho_id(landmark.feature_id)
            layout.add(rid, 1)
            values[rid] = float(landmark.inv_depth)
            for obs in landmark.observations:
                if not landmark.is_anchor(obs):
                    graph.add(self._observation_factor(landmark, obs))

        if uses_imu:
            for k, P in enumerate(window.preintegrations):
                fi, fj = window.frames[k], window.frames[k + 1]
                graph.add(
                    ImuFactor(
                        pose_id(fi.frame_id),
                        sb_id(fi.frame_id),
                        pose_id(fj.frame_id),
                        sb_id(fj.frame_id),
                        P,
                        self.gravity,
                    )
                )
        if window.prior is not None:
            graph.add(window.prior)
        if include_gauge:
            first = window.frames[0]
            graph.add(GaugeFactor(pose_id(first.frame_id), first.pose, full=not uses_imu))
        return graph, values

    def _refresh_preintegrations(self) -> None:
        window = self.window
        for k, P in enumerate(window.preintegrations):
            start = window.frames[k]
            if needs_repropagation(P, start.ba, start.bg):
                logger.debug("Repropagating interval %.3f-%.3f", P.t_start, P.t_end)
                window.preintegrations[k] = repropagate(P, start.ba, start.bg)

    def _optimize_window(self) -> OptimizationReport:
        if self.mode.uses_imu:
            self._refresh_preintegrations()
        graph, values = self.build_graph()
        values, report = optimize(graph, values, self.config.solver)
        self._write_back(values)
        self.stats.optimizations += 1
        self.stats.iterations += report.iterations
        return report

    def _write_back(self, values: Values) -> None:
        for f in self.window.frames:
            f.pose = values[pose_id(f.frame_id)]
            if self.mode.uses_imu:
                f.set_speed_bias(values[sb_id(f.frame_id)])
        for landmark in self.window.active_landmarks():
            landmark.inv_depth = float(values[rho_id(landmark.feature_id)])

    def landmark_errors(self, landmark: Landmark) -> List[float]:
        """Pixel reprojection error of every non-anchor observation."""
        poses = self.window.poses()
        cam_a = self.rig[landmark.anchor_camera]
        errors = []
        for obs in landmark.observations:
            if landmark.is_anchor(obs):
                continue
            try:
                r = reprojection_residual(
                    poses[landmark.anchor_frame],
                    poses[obs.frame_id],
                    cam_a,
                    self.rig[obs.camera_id],
                    landmark.inv_depth,
                    landmark.anchor_uv,
                    obs.uv,
                    same_frame=obs.frame_id == landmark.anchor_frame,
                )
                errors.append(float(np.linalg.norm(r)))
            except GeometryError:
                errors.append(np.inf)
        return errors

    def reject_outliers(self) -> int:
        threshold = self.config.tracker.outlier_px
        removed = []
        for feature_id, landmark in self.window.landmarks.items():
            if not landmark.active:
                continue
            errors = self.landmark_errors(landmark)
            if errors and np.mean(errors) > threshold:
                removed.append(feature_id)
        for feature_id in removed:
            del self.window.landmarks[feature_id]
            self._blacklist.add(feature_id)
        if removed:
            self.stats.rejected_outliers += len(removed)
            logger.info("Rejected %d outlier landmarks", len(removed))
            self.events.publish(
                EventBus.OUTLIERS_REJECTED, {"count": len(removed), "feature_ids": removed}
            )
        return len(removed)

    # ------------------------------------------------------------------
    # Window sliding
    # ------------------------------------------------------------------

    def slide_window(self, keyframe: bool) -> None:
        if len(self.window.frames) < 2:
            return
        if not keyframe:
            self._discard_newest()
        elif len(self.window.frames) > self.config.window_size:
            self._marginalize_oldest()

    def _discard_newest(self) -> None:
        window = self.window
        newest = window.frames.pop()
        if self.mode.uses_imu:
            P = window.preintegrations.pop()
            # the open buffer starts with the boundary sample P ends on
            self._imu_buffer = list(P.samples) + self._imu_buffer[1:]
        for feature_id in list(window.landmarks):
            landmark = window.landmarks[feature_id]
            if landmark.anchor_frame == newest.frame_id:
                del window.landmarks[feature_id]
                continue
            landmark.observations = [
                o for o in landmark.observations if o.frame_id != newest.frame_id
            ]
        self.stats.discarded_frames += 1
        logger.debug("Discarded non-keyframe %d", newest.frame_id)
        self.events.publish(EventBus.FRAME_DISCARDED, {"frame_id": newest.frame_id})

    def leaving_observations(self, landmark: Landmark, frame_id: int) -> List[FeatureObservation]:
        """Observations whose information leaves the window with frame_id.

        Those made in that frame and, for a landmark anchored there, the one
        that becomes its new anchor. The rest stay as factors after
        re-anchoring.
        """
        leaving = [
            o for o in landmark.observations if o.frame_id == frame_id and not landmark.is_anchor(o)
        ]
        if landmark.anchor_frame == frame_id:
            rest = [o for o in landmark.observations if o.frame_id != frame_id]
            if rest:
                leaving.append(rest[0])
        return leaving

    def marginalization_problem(self) -> Tuple[FactorGraph, Values, List[BlockId]]:
        """Sub-problem eliminated when the oldest frame leaves the window.

        It holds the prior, the factors on the oldest pose/speed-bias other
        than landmark observations, and the leaving observations. Their
        inverse depths are eliminated here only, so the prior spans frame
        blocks while the landmarks stay live in the window.
        """
        window = self.window
        oldest = window.frames[0].frame_id
        graph, values = self.build_graph(include_gauge=False, include_landmarks=False)
        marg = {pose_id(oldest)}
        if self.mode.uses_imu:
            marg.add(sb_id(oldest))
        factors = [f for f in graph.factors if f is window.prior or marg.intersection(f.blocks)]

        layout = graph.layout
        for landmark in window.active_landmarks():
            leaving = self.leaving_observations(landmark, oldest)
            if not leaving:
                continue
            rid = rho_id(landmark.feature_id)
            layout.add(rid, 1)
            values[rid] = float(landmark.inv_depth)
            marg.add(rid)
            factors.extend(self._observation_factor(landmark, o) for o in leaving)

        used = {bid for f in factors for bid in f.blocks}
        sub = FactorGraph(
            factors, BlockLayout((bid, layout.block_dim(bid)) for bid in layout if bid in used)
        )
        return sub, values, [bid for bid in sub.layout if bid in marg]

    def _marginalize_oldest(self) -> None:
        window = self.window
        oldest = window.frames[0]
        sub, values, marg = self.marginalization_problem()
        try:
            system = linearize_graph(sub, values)
            prior = marginalize(system.H, system.b, marg, sub.layout, values)
            window.prior = prior if prior.blocks else None
        except OdometryError as e:
            logger.warning("Marginalization of frame %d failed, prior dropped: %s", oldest.frame_id, e)
            window.prior = None

        dropped = self._reanchor(oldest)
        window.frames.pop(0)
        if self.mode.uses_imu:
            window.preintegrations.pop(0)
        self.stats.marginalizations += 1
        prior_dim = window.prior.layout.dim if window.prior is not None else 0
        logger.debug(
            "Marginalized frame %d: prior dim %d, %d landmarks dropped",
            oldest.frame_id,
            prior_dim,
            dropped,
        )
        self.events.publish(
            EventBus.WINDOW_MARGINALIZED,
            {"frame_id": oldest.frame_id, "prior_dim": prior_dim, "dropped_landmarks": dropped},
        )

    def _reanchor(self, oldest: FrameState) -> int:
        """Move landmarks anchored at the oldest frame to their next observation."""
        window = self.window
        poses = window.poses()
        dropped = 0
        for feature_id in list(window.landmarks):
            landmark = window.landmarks[feature_id]
            if landmark.anchor_frame != oldest.frame_id:
                landmark.observations = [
                    o for o in landmark.observations if o.frame_id != oldest.frame_id
                ]
                continue
            rest = [o for o in landmark.observations if o.frame_id != oldest.frame_id]
            if not rest:
                del window.landmarks[feature_id]
                dropped += 1
                continue
            new_anchor = rest[0]
            if landmark.triangulated:
                cam_a = self.rig[landmark.anchor_camera]
                X_w = (oldest.pose * cam_a.T_bc).transform(
                    backproject(cam_a.intrinsics, landmark.anchor_uv, 1.0 / landmark.inv_depth)
                )
                T_wn = poses[new_anchor.frame_id] * self.rig[new_anchor.camera_id].T_bc
                depth = T_wn.inverse().transform(X_w)[2]
                if not depth > EPS_DEPTH:
                    del window.landmarks[feature_id]
                    dropped += 1
                    continue
                landmark.inv_depth = 1.0 / depth
            landmark.anchor_frame = new_anchor.frame_id
            landmark.anchor_camera = new_anchor.camera_id
            landmark.anchor_uv = np.asarray(new_anchor.uv, dtype=float)
            landmark.observations = rest
        return dropped

    # ------------------------------------------------------------------
    # Reporting
    # ------------------------------------------------------------------

    def _snapshot(
        self, state: FrameState, status: EstimateStatus, keyframe: bool, iterations: int
    ) -> PoseEstimate:
        return PoseEstimate(
            frame_id=state.frame_id,
            t=state.t,
            pose=state.pose,
            v=state.v.copy(),
            ba=state.ba.copy(),
            bg=state.bg.copy(),
            status=status,
            keyframe=keyframe,
            iterations=iterations,
        )

    def _finish(self, estimate: PoseEstimate) -> None:
        self._history = (self._history + [estimate])[-2:]
        self.events.publish(
            EventBus.FRAME_PROCESSED,
            {
                "frame_id": estimate.frame_id,
                "t": estimate.t,
                "keyframe": estimate.keyframe,
                "iterations": estimate.iterations,
                "status": estimate.status.value,
            },
        )
