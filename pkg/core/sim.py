"""Synthetic ground truth and numerical oracles.

Trajectories are closed-form, so velocity, acceleration and body rates are
exact. Every stochastic draw comes from child streams of one seed:
stream 0 places landmarks, stream 1 drives IMU noise and bias walks,
stream 2 drives pixel noise.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from core.camera import Camera, CameraRig, FeatureFrame, FeatureObservation, PinholeIntrinsics
from core.config import EstimatorConfig, SensorMode, TrackerOptions
from core.dataset import nanoseconds, seconds
from core.errors import OracleError, TrajectoryRangeError
from core.estimator import FrameState
from core.evaluation import Trajectory
from core.imu import ImuNoise, ImuSample, gravity_vector
from core.logging import get_logger
from core.manifold import Pose, Rotation, StateBlock, boxminus_rotation, boxplus_state, so3_exp, tangent_dim

logger = get_logger(__name__)

# EuRoC-grade MEMS densities
EUROC_NOISE = ImuNoise(sigma_g=1.7e-4, sigma_a=2.0e-3, sigma_bg=1.9e-5, sigma_ba=3.0e-3)

LANDMARK_COUNT = 150
MIN_VISIBLE_DEPTH = 0.1
STEREO_BASELINE = 0.2

_LANDMARK_STREAM, _IMU_STREAM, _FEATURE_STREAM = range(3)


class TrajectoryKind(Enum):
    CIRCLE = "circle"
    SINUSOID = "sinusoid-3d"
    STATIC = "static"


@dataclass(frozen=True)
class TrajectorySpec:
    kind: TrajectoryKind
    duration: float
    radius: float = 3.0
    angular_rate: float = 0.5
    amplitude: float = 0.5
    frequency: float = 0.2
    height: float = 0.0
    hold: float = 0.5
    ramp: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TrajectoryKind(self.kind))
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.hold < 0 or self.ramp < 0:
            raise ValueError("hold and ramp must be non-negative")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")


class TrajectorySample(NamedTuple):
    pose: Pose
    velocity: np.ndarray
    acceleration: np.ndarray
    angular_rate: np.ndarray


def _ramped_angle(spec: TrajectorySpec, tau: float) -> Tuple[float, float, float]:
    """Circle phase s and its derivatives; the rate blends in over spec.ramp seconds."""
    w = spec.angular_rate
    if tau <= 0.0:
        return 0.0, 0.0, 0.0
    T = spec.ramp
    if T > 0.0 and tau < T:
        x = tau / T
        s = w * T * (2.5 * x**4 - 3.0 * x**5 + x**6)
        ds = w * (10.0 * x**3 - 15.0 * x**4 + 6.0 * x**5)
        dds = w / T * (30.0 * x**2 - 60.0 * x**3 + 30.0 * x**4)
        return s, ds, dds
    return w * (0.5 * T + tau - T), w, 0.0


def _cubed_sine(amplitude: float, harmonic: int, omega: float, tau: float) -> Tuple[float, float, float]:
    """a*sin^3(k*omega*tau) with derivatives; starts at rest to second order."""
    if tau <= 0.0:
        return 0.0, 0.0, 0.0
    k = harmonic * omega
    sn, cs = math.sin(k * tau), math.cos(k * tau)
    return (
        amplitude * sn**3,
        amplitude * k * 3.0 * sn * sn * cs,
        amplitude * k * k * (6.0 * sn * cs * cs - 3.0 * sn**3),
    )


def _circle(spec: TrajectorySpec, tau: float) -> TrajectorySample:
    r = spec.radius
    s, ds, dds = _ramped_angle(spec, tau)
    c, sn = math.cos(s), math.sin(s)
    radial = np.array([c, sn, 0.0])
    tangent = np.array([-sn, c, 0.0])
    return TrajectorySample(
        pose=Pose(Rotation.from_yaw(s + 0.5 * math.pi), r * radial + [0.0, 0.0, spec.height]),
        velocity=r * ds * tangent,
        acceleration=r * dds * tangent - r * ds * ds * radial,
        angular_rate=np.array([0.0, 0.0, ds]),
    )


def _sinusoid(spec: TrajectorySpec, tau: float) -> TrajectorySample:
    omega = 2.0 * math.pi * spec.frequency
    A = spec.amplitude
    axes = [_cubed_sine(a, k, omega, tau) for a, k in ((A, 1), (0.5 * A, 2), (0.3 * A, 3))]
    yaw, dyaw, _ = _cubed_sine(0.15, 1, omega, tau)
    pitch, dpitch, _ = _cubed_sine(0.1, 2, omega, tau)
    roll, droll, _ = _cubed_sine(0.1, 3, omega, tau)
    R = ScipyRotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    body_rate = np.array(
        [
            droll - dyaw * sp,
            dpitch * cr + dyaw * sr * cp,
            -dpitch * sr + dyaw * cr * cp,
        ]
    )
    return TrajectorySample(
        pose=Pose(Rotation.from_matrix(R), np.array([a[0] for a in axes]) + [0.0, 0.0, spec.height]),
        velocity=np.array([a[1] for a in axes]),
        acceleration=np.array([a[2] for a in axes]),
        angular_rate=body_rate,
    )


def sample_trajectory(spec: TrajectorySpec, t: float) -> TrajectorySample:
    if not 0.0 <= t <= spec.duration:
        raise TrajectoryRangeError(f"t={t:.9f} outside [0, {spec.duration}]")
    tau = t - spec.hold
    if spec.kind is TrajectoryKind.CIRCLE:
        return _circle(spec, tau)
    if spec.kind is TrajectoryKind.SINUSOID:
        return _sinusoid(spec, tau)
    zero = np.zeros(3)
    return TrajectorySample(Pose.identity(), zero, zero.copy(), zero.copy())


def simulation_rig(baseline: float = STEREO_BASELINE) -> CameraRig:
    """Two 640x480 cameras looking along body +y, the right one offset along body +x."""
    intr = PinholeIntrinsics(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)
    R_bc = Rotation.from_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]))
    return CameraRig(
        (
            Camera(intr, Pose(R_bc, np.zeros(3))),
            Camera(intr, Pose(R_bc, np.array([baseline, 0.0, 0.0]))),
        )
    )


def make_landmarks(spec: TrajectorySpec, rng: np.random.Generator, count: int = LANDMARK_COUNT) -> np.ndarray:
    """Circle: a column around the orbit center. Others: a wall in front of +y."""
    if spec.kind is TrajectoryKind.CIRCLE:
        angle = rng.uniform(0.0, 2.0 * math.pi, count)
        z = rng.uniform(-0.6, 0.6, count) + spec.height
        r = 0.5 * spec.radius
        return np.column_stack([r * np.cos(angle), r * np.sin(angle), z])
    x = rng.uniform(-2.5, 2.5, count)
    y = rng.uniform(3.0, 6.0, count)
    z = rng.uniform(-1.2, 1.2, count) + spec.height
    return np.column_stack([x, y, z])


@dataclass(frozen=True, eq=False)
class WorldSpec:
    landmarks: np.ndarray
    rig: CameraRig
    noise: ImuNoise = field(default_factory=lambda: ImuNoise(0.0, 0.0, 0.0, 0.0))
    ba0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_px: float = 0.0
    imu_rate: float = 200.0
    camera_rate: float = 20.0
    seed: int = 0
    gravity_norm: float = 9.81

    def __post_init__(self) -> None:
        if not (self.imu_rate > 0 and self.camera_rate > 0):
            raise ValueError("rates must be positive")
        if self.imu_rate < self.camera_rate:
            raise ValueError(
                f"IMU rate {self.imu_rate} Hz below camera rate {self.camera_rate} Hz"
            )
        if self.sigma_px < 0:
            raise ValueError(f"sigma_px must be non-negative, got {self.sigma_px}")
        object.__setattr__(self, "landmarks", np.asarray(self.landmarks, dtype=float).reshape(-1, 3))

    def stream(self, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed).spawn(3)[index])


class ImuStream(NamedTuple):
    samples: List[ImuSample]
    ba: np.ndarray
    bg: np.ndarray


def imu_times_ns(spec: TrajectorySpec, world: WorldSpec) -> np.ndarray:
    step = round(1e9 / world.imu_rate)
    return np.arange(0, nanoseconds(spec.duration) + 1, step, dtype=np.int64)


def frame_times_ns(spec: TrajectorySpec, world: WorldSpec) -> np.ndarray:
    step = round(1e9 / world.camera_rate)
    return np.arange(nanoseconds(spec.hold), nanoseconds(spec.duration) + 1, step, dtype=np.int64)


def synthesize_imu_stream(spec: TrajectorySpec, world: WorldSpec) -> ImuStream:
    """IMU samples plus the true bias at every sample.

    Per sample the generator draws gyro noise, accel noise, gyro bias step,
    accel bias step (three values each).
    """
    times = imu_times_ns(spec, world)
    n = len(times)
    draws = world.stream(_IMU_STREAM).standard_normal((n, 12))
    dt = 1.0 / world.imu_rate
    noise = world.noise
    g = gravity_vector(world.gravity_norm)

    bg = np.empty((n, 3))
    ba = np.empty((n, 3))
    bg[0] = world.bg0
    ba[0] = world.ba0
    for i in range(1, n):
        bg[i] = bg[i - 1] + noise.sigma_bg * math.sqrt(dt) * draws[i - 1, 6:9]
        ba[i] = ba[i - 1] + noise.sigma_ba * math.sqrt(dt) * draws[i - 1, 9:12]

    samples = []
    for i, t_ns in enumerate(times):
        t = seconds(int(t_ns))
        truth = sample_trajectory(spec, t)
        gyro = truth.angular_rate + bg[i] + noise.sigma_g / math.sqrt(dt) * draws[i, 0:3]
        accel = (
            truth.pose.R.inverse().rotate(truth.acceleration + g)
            + ba[i]
            + noise.sigma_a / math.sqrt(dt) * draws[i, 3:6]
        )
        samples.append(ImuSample(t, gyro, accel))
    return ImuStream(samples, ba, bg)


def synthesize_imu(spec: TrajectorySpec, world: WorldSpec) -> List[ImuSample]:
    return synthesize_imu_stream(spec, world).samples


def synthesize_features(spec: TrajectorySpec, world: WorldSpec) -> List[FeatureFrame]:
    """Perfectly associated tracks: feature id = landmark index, frame id = frame index.

    A landmark is emitted for a camera when it lies more than 0.1 m in front
    of it and its noise-free projection is inside the image. Two pixel-noise
    values are drawn for every (frame, landmark, camera) whether visible or not.
    """
    times = frame_times_ns(spec, world)
    cams = world.rig.cameras
    X = world.landmarks
    draws = world.stream(_FEATURE_STREAM).standard_normal((len(times), len(X), len(cams), 2))
    frames = []
    for k, t_ns in enumerate(times):
        t = seconds(int(t_ns))
        body = sample_trajectory(spec, t).pose
        per_cam = []
        for cam in cams:
            T_wc = body * cam.T_bc
            p_c = (X - T_wc.p) @ T_wc.R.matrix()
            intr = cam.intrinsics
            with np.errstate(divide="ignore", invalid="ignore"):
                u = intr.fx * p_c[:, 0] / p_c[:, 2] + intr.cx
                v = intr.fy * p_c[:, 1] / p_c[:, 2] + intr.cy
            visible = (
                (p_c[:, 2] > MIN_VISIBLE_DEPTH)
                & (u >= 0.0) & (u < intr.width)
                & (v >= 0.0) & (v < intr.height)
            )
            per_cam.append((u, v, visible))

        observations = []
        for j in range(len(X)):
            for c, (u, v, visible) in enumerate(per_cam):
                if not visible[j]:
                    continue
                uv = (
                    float(u[j] + world.sigma_px * draws[k, j, c, 0]),
                    float(v[j] + world.sigma_px * draws[k, j, c, 1]),
                )
                if not cams[c].intrinsics.in_bounds(uv):
                    continue
                observations.append(FeatureObservation(k, c, j, uv))
        frames.append(FeatureFrame(k, t, observations))
    return frames


def ground_truth_states(
    spec: TrajectorySpec, world: WorldSpec, times_ns: Sequence[int], stream: Optional[ImuStream] = None
) -> List[FrameState]:
    """Full states at the given times; biases taken from the latest IMU sample."""
    stream = stream or synthesize_imu_stream(spec, world)
    sample_ns = imu_times_ns(spec, world)
    states = []
    for k, t_ns in enumerate(times_ns):
        t = seconds(int(t_ns))
        truth = sample_trajectory(spec, t)
        i = max(int(np.searchsorted(sample_ns, t_ns, side="right")) - 1, 0)
        states.append(
            FrameState(k, t, truth.pose, truth.velocity.copy(), stream.ba[i].copy(), stream.bg[i].copy())
        )
    return states


def ground_truth_trajectory(spec: TrajectorySpec, world: WorldSpec) -> Trajectory:
    times = [seconds(int(t)) for t in frame_times_ns(spec, world)]
    return Trajectory(times, [sample_trajectory(spec, t).pose for t in times])


def forward_integrate(
    pose: Pose,
    v: np.ndarray,
    samples: Sequence[ImuSample],
    ba: np.ndarray,
    bg: np.ndarray,
    g: np.ndarray,
) -> Tuple[Pose, np.ndarray]:
    """World-frame midpoint integration of raw samples at fixed biases."""
    R = pose.R
    p = np.asarray(pose.p, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    for s0, s1 in zip(samples, samples[1:]):
        dt = s1.t - s0.t
        a0 = R.rotate(s0.accel - ba) - g
        R = R * so3_exp((0.5 * (s0.gyro + s1.gyro) - bg) * dt)
        a1 = R.rotate(s1.accel - ba) - g
        a = 0.5 * (a0 + a1)
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
    return Pose(R, p), v


def numerical_jacobian(
    f: Callable[[StateBlock], np.ndarray], x: StateBlock, h: float = 1e-6
) -> np.ndarray:
    """Central differences of f over the tangent space of x (perturbed with boxplus)."""
    n = tangent_dim(x)
    columns = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        plus = np.asarray(f(boxplus_state(x, e)), dtype=float).reshape(-1)
        minus = np.asarray(f(boxplus_state(x, -e)), dtype=float).reshape(-1)
        if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
            raise OracleError(f"non-finite evaluation perturbing tangent coordinate {i}")
        columns.append((plus - minus) / (2.0 * h))
    return np.column_stack(columns)


def monte_carlo_covariance(
    trial: Callable[[np.random.Generator], np.ndarray], n_trials: int, seed: int = 0
) -> np.ndarray:
    """Second moment of trial deviations, each trial on its own child stream."""
    children = np.random.SeedSequence(seed).spawn(n_trials)
    devs = np.array([trial(np.random.default_rng(child)) for child in children])
    cov = devs.T @ devs / n_trials
    return 0.5 * (cov + cov.T)


def _noisy_deltas(
    samples: Sequence[ImuSample],
    ba: np.ndarray,
    bg: np.ndarray,
    noise: ImuNoise,
    rng: Optional[np.random.Generator],
) -> Tuple[np.ndarray, np.ndarray, Rotation, np.ndarray, np.ndarray]:
    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = Rotation.identity()
    dba = np.zeros(3)
    dbg = np.zeros(3)
    for s0, s1 in zip(samples, samples[1:]):
        dt = s1.t - s0.t
        if rng is not None:
            # one accel/gyro noise value per interval, variance sigma^2 / dt
            n = rng.standard_normal(12)
            na = noise.sigma_a / math.sqrt(dt) * n[0:3]
            ng = noise.sigma_g / math.sqrt(dt) * n[3:6]
            wba = noise.sigma_ba * math.sqrt(dt) * n[6:9]
            wbg = noise.sigma_bg * math.sqrt(dt) * n[9:12]
        else:
            na = ng = wba = wbg = np.zeros(3)
        R0 = gamma.matrix()
        gamma = gamma * so3_exp((0.5 * (s0.gyro + s1.gyro) + ng - bg - dbg) * dt)
        R1 = gamma.matrix()
        acc = 0.5 * (R0 @ (s0.accel + na - ba - dba) + R1 @ (s1.accel + na - ba - dba))
        alpha = alpha + beta * dt + 0.5 * acc * dt * dt
        beta = beta + acc * dt
        dba = dba + wba
        dbg = dbg + wbg
    return alpha, beta, gamma, dba, dbg


def preintegration_trial(
    samples: Sequence[ImuSample], ba: np.ndarray, bg: np.ndarray, noise: ImuNoise
) -> Callable[[np.random.Generator], np.ndarray]:
    """Trial generator for monte_carlo_covariance.

    Each trial returns (d_alpha, d_beta, d_theta, d_ba, d_bg) of a noisy
    preintegration against the noise-free one, d_theta = gamma_ref boxminus.
    """
    ref_alpha, ref_beta, ref_gamma, _, _ = _noisy_deltas(samples, ba, bg, noise, None)

    def trial(rng: np.random.Generator) -> np.ndarray:
        alpha, beta, gamma, dba, dbg = _noisy_deltas(samples, ba, bg, noise, rng)
        return np.concatenate(
            [alpha - ref_alpha, beta - ref_beta, boxminus_rotation(gamma, ref_gamma), dba, dbg]
        )

    return trial


# ----------------------------------------------------------------------
# Named scenarios
# ----------------------------------------------------------------------

SCENARIOS = ("circle", "circle-noisy", "sinusoid", "static")


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    trajectory: TrajectorySpec
    world: WorldSpec

    def imu(self) -> ImuStream:
        return synthesize_imu_stream(self.trajectory, self.world)

    def features(self) -> List[FeatureFrame]:
        return synthesize_features(self.trajectory, self.world)

    def ground_truth(self) -> Trajectory:
        return ground_truth_trajectory(self.trajectory, self.world)

    def config(self, mode: SensorMode = SensorMode.STEREO_IMU, window_size: int = 10) -> EstimatorConfig:
        """Estimator settings matched to the scenario's sensors."""
        return EstimatorConfig(
            mode=mode,
            rig=self.world.rig,
            window_size=window_size,
            imu_noise=EUROC_NOISE,
            gravity_norm=self.world.gravity_norm,
            tracker=TrackerOptions(sigma_px=max(self.world.sigma_px, 1.0)),
        )


def make_scenario(name: str, seed: int = 0, frames: int = 200) -> Scenario:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r} (expected one of {', '.join(SCENARIOS)})")
    if frames < 2:
        raise ValueError(f"need at least 2 frames, got {frames}")
    camera_rate = 20.0
    hold = 0.5
    duration = hold + (frames - 1) / camera_rate
    kind = {
        "circle": TrajectoryKind.CIRCLE,
        "circle-noisy": TrajectoryKind.CIRCLE,
        "sinusoid": TrajectoryKind.SINUSOID,
        "static": TrajectoryKind.STATIC,
    }[name]
    spec = TrajectorySpec(kind=kind, duration=duration, hold=hold)
    landmark_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[_LANDMARK_STREAM])
    noisy = name == "circle-noisy"
    world = WorldSpec(
        landmarks=make_landmarks(spec, landmark_rng),
        rig=simulation_rig(),
        noise=EUROC_NOISE if noisy else ImuNoise(0.0, 0.0, 0.0, 0.0),
        sigma_px=1.0 if noisy else 0.0,
        camera_rate=camera_rate,
        seed=seed,
    )
    logger.debug("Scenario %s: %d landmarks, %.2f s", name, len(world.landmarks), duration)
    return Scenario(name, spec, world)
