"""IMU preintegration between frames and the inertial residual.

Measurement model: gyro = w_body + bg + n_g, accel = R^T (a_world + g) + ba + n_a
with g = (0, 0, |g|), i.e. a resting IMU reads +|g| along world up.

Error-state order of the 15x15 covariance and bias Jacobian:
(d_alpha, d_beta, d_theta, d_ba, d_bg), rotations perturbed on the right.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.linalg

from core.errors import InsufficientDataError, OrderingError
from core.logging import get_logger
from core.manifold import (
    Pose,
    Rotation,
    right_jacobian,
    right_jacobian_inverse,
    skew,
    so3_exp,
    so3_log,
)
from core.solver import BlockId, Factor

logger = get_logger(__name__)

COV_SEED = 1e-12
REPROPAGATE_ACCEL = 1e-2
REPROPAGATE_GYRO = 1e-3

ALPHA = slice(0, 3)
BETA = slice(3, 6)
THETA = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)


def gravity_vector(norm: float = 9.81) -> np.ndarray:
    return np.array([0.0, 0.0, norm])


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time densities; zero entries give a noise-free model."""

    sigma_g: float
    sigma_a: float
    sigma_bg: float
    sigma_ba: float

    def __post_init__(self) -> None:
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be a non-negative number, got {value}")


class MotionState(Protocol):
    pose: Pose
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray


@dataclass
class Preintegration:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Rotation
    cov: np.ndarray
    jacobian: np.ndarray
    ba_lin: np.ndarray
    bg_lin: np.ndarray
    dt_total: float
    samples: Tuple[ImuSample, ...]
    noise: ImuNoise
    _sqrt_info: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def t_start(self) -> float:
        return self.samples[0].t

    @property
    def t_end(self) -> float:
        return self.samples[-1].t

    @property
    def J_alpha_ba(self) -> np.ndarray:
        return self.jacobian[ALPHA, BA]

    @property
    def J_alpha_bg(self) -> np.ndarray:
        return self.jacobian[ALPHA, BG]

    @property
    def J_beta_ba(self) -> np.ndarray:
        return self.jacobian[BETA, BA]

    @property
    def J_beta_bg(self) -> np.ndarray:
        return self.jacobian[BETA, BG]

    @property
    def J_gamma_bg(self) -> np.ndarray:
        return self.jacobian[THETA, BG]

    def sqrt_info(self) -> np.ndarray:
        """W = L^-1 for cov = L L^T, so W^T W = cov^-1."""
        if self._sqrt_info is None:
            L = scipy.linalg.cholesky(self.cov, lower=True)
            self._sqrt_info = scipy.linalg.solve_triangular(L, np.eye(15), lower=True)
        return self._sqrt_info


def _check_samples(samples: Sequence[ImuSample]) -> None:
    if len(samples) < 2:
        raise InsufficientDataError(f"preintegration needs at least 2 samples, got {len(samples)}")
    for prev, cur in zip(samples, samples[1:]):
        if not cur.t > prev.t:
            raise OrderingError(f"IMU timestamps not increasing: {prev.t:.9f} -> {cur.t:.9f}")


def preintegrate(
    samples: Sequence[ImuSample],
    ba_lin: np.ndarray,
    bg_lin: np.ndarray,
    noise: ImuNoise,
    with_covariance: bool = True,
) -> Preintegration:
    """Midpoint preintegration of body-frame deltas, gravity excluded.

    with_covariance=False skips the covariance and bias Jacobian (both left
    at their seeds); used by Monte-Carlo trials.
    """
    _check_samples(samples)
    ba = np.asarray(ba_lin, dtype=float).reshape(3)
    bg = np.asarray(bg_lin, dtype=float).reshape(3)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = Rotation.identity()
    jac = np.eye(15)
    cov = COV_SEED * np.eye(15)
    dt_total = 0.0
    I3 = np.eye(3)

    for s0, s1 in zip(samples, samples[1:]):
        dt = s1.t - s0.t
        a0 = s0.accel - ba
        a1 = s1.accel - ba
        w = 0.5 * (s0.gyro + s1.gyro) - bg
        R0 = gamma.matrix()
        step = so3_exp(w * dt)
        gamma = gamma * step
        R1 = gamma.matrix()
        acc = 0.5 * (R0 @ a0 + R1 @ a1)
        alpha = alpha + beta * dt + 0.5 * acc * dt * dt
        beta = beta + acc * dt
        dt_total += dt

        if not with_covariance:
            continue

        Jr = right_jacobian(w * dt)
        F_tt = step.matrix().T
        F_tbg = -Jr * dt
        R0a0 = R0 @ skew(a0)
        R1a1 = R1 @ skew(a1)

        F = np.eye(15)
        F[THETA, THETA] = F_tt
        F[THETA, BG] = F_tbg
        F[BETA, THETA] = -0.5 * (R0a0 + R1a1 @ F_tt) * dt
        F[BETA, BA] = -0.5 * (R0 + R1) * dt
        F[BETA, BG] = -0.5 * R1a1 @ F_tbg * dt
        F[ALPHA, BETA] = I3 * dt
        F[ALPHA, THETA] = 0.5 * dt * F[BETA, THETA]
        F[ALPHA, BA] = 0.5 * dt * F[BETA, BA]
        F[ALPHA, BG] = 0.5 * dt * F[BETA, BG]

        # noise columns: n_a, n_g, n_ba, n_bg
        G = np.zeros((15, 12))
        G[THETA, 3:6] = Jr * dt
        G[BETA, 0:3] = 0.5 * (R0 + R1) * dt
        G[BETA, 3:6] = -0.5 * R1a1 @ G[THETA, 3:6] * dt
        G[ALPHA, 0:3] = 0.5 * dt * G[BETA, 0:3]
        G[ALPHA, 3:6] = 0.5 * dt * G[BETA, 3:6]
        G[BA, 6:9] = I3 * dt
        G[BG, 9:12] = I3 * dt
        q = np.repeat(
            [noise.sigma_a**2, noise.sigma_g**2, noise.sigma_ba**2, noise.sigma_bg**2], 3
        ) / dt

        jac = F @ jac
        cov = F @ cov @ F.T + (G * q[None, :]) @ G.T
        cov = 0.5 * (cov + cov.T)

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        cov=cov,
        jacobian=jac,
        ba_lin=ba.copy(),
        bg_lin=bg.copy(),
        dt_total=dt_total,
        samples=tuple(samples),
        noise=noise,
    )


def bias_corrected_delta(
    P: Preintegration, ba: np.ndarray, bg: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, Rotation]:
    dba = np.asarray(ba, dtype=float) - P.ba_lin
    dbg = np.asarray(bg, dtype=float) - P.bg_lin
    alpha = P.alpha + P.J_alpha_ba @ dba + P.J_alpha_bg @ dbg
    beta = P.beta + P.J_beta_ba @ dba + P.J_beta_bg @ dbg
    gamma = P.gamma * so3_exp(P.J_gamma_bg @ dbg)
    return alpha, beta, gamma


def repropagate(P: Preintegration, ba: np.ndarray, bg: np.ndarray) -> Preintegration:
    if not P.samples:
        raise InsufficientDataError("preintegration retains no samples to repropagate")
    return preintegrate(P.samples, ba, bg, P.noise)


def needs_repropagation(P: Preintegration, ba: np.ndarray, bg: np.ndarray) -> bool:
    dba = np.max(np.abs(np.asarray(ba) - P.ba_lin))
    dbg = np.max(np.abs(np.asarray(bg) - P.bg_lin))
    return bool(dba > REPROPAGATE_ACCEL or dbg > REPROPAGATE_GYRO)


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    """Linear interpolation between two samples; t outside holds the nearest."""
    if s1.t <= s0.t:
        return ImuSample(t, s1.gyro, s1.accel)
    w = min(max((t - s0.t) / (s1.t - s0.t), 0.0), 1.0)
    return ImuSample(t, (1 - w) * s0.gyro + w * s1.gyro, (1 - w) * s0.accel + w * s1.accel)


class DeltaMotion(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Rotation
    dt: float


def compose(first: Preintegration, second: Preintegration) -> DeltaMotion:
    """Deltas over the concatenated interval (both taken at their own biases)."""
    R1 = first.gamma.matrix()
    alpha = first.alpha + first.beta * second.dt_total + R1 @ second.alpha
    beta = first.beta + R1 @ second.beta
    return DeltaMotion(alpha, beta, first.gamma * second.gamma, first.dt_total + second.dt_total)


def predict_state(
    pose: Pose, v: np.ndarray, P: Preintegration, ba: np.ndarray, bg: np.ndarray, g: np.ndarray
) -> Tuple[Pose, np.ndarray]:
    """Pose and velocity at the end of P starting from (pose, v)."""
    alpha, beta, gamma = bias_corrected_delta(P, ba, bg)
    dt = P.dt_total
    R = pose.R.matrix()
    p = pose.p + v * dt - 0.5 * g * dt * dt + R @ alpha
    v_new = v + R @ beta - g * dt
    return Pose(pose.R * gamma, p), v_new


def imu_residual(
    P: Preintegration, s_prev: MotionState, s_cur: MotionState, g: np.ndarray
) -> np.ndarray:
    """Unwhitened 15-vector (alpha, beta, theta, ba, bg), model minus measurement."""
    r, _ = _residual_and_jacobian(P, s_prev, s_cur, np.asarray(g, dtype=float), False)
    return r


def imu_jacobian(
    P: Preintegration, s_prev: MotionState, s_cur: MotionState, g: np.ndarray
) -> List[np.ndarray]:
    """Unwhitened blocks w.r.t. (pose_prev 6, v/ba/bg_prev 9, pose_cur 6, v/ba/bg_cur 9)."""
    _, jacs = _residual_and_jacobian(P, s_prev, s_cur, np.asarray(g, dtype=float), True)
    return jacs


def _residual_and_jacobian(
    P: Preintegration,
    s_i: MotionState,
    s_j: MotionState,
    g: np.ndarray,
    jacobians: bool,
) -> Tuple[np.ndarray, Optional[List[np.ndarray]]]:
    dt = P.dt_total
    Ri = s_i.pose.R.matrix()
    Rj = s_j.pose.R.matrix()
    RiT = Ri.T
    alpha, beta, gamma = bias_corrected_delta(P, s_i.ba, s_i.bg)

    dp = s_j.pose.p - s_i.pose.p + 0.5 * g * dt * dt - s_i.v * dt
    dv = s_j.v - s_i.v + g * dt
    rot_err = gamma.inverse() * s_i.pose.R.inverse() * s_j.pose.R
    r_theta = so3_log(rot_err)

    r = np.zeros(15)
    r[ALPHA] = RiT @ dp - alpha
    r[BETA] = RiT @ dv - beta
    r[THETA] = r_theta
    r[BA] = s_j.ba - s_i.ba
    r[BG] = s_j.bg - s_i.bg
    if not jacobians:
        return r, None

    I3 = np.eye(3)
    Jr_inv = right_jacobian_inverse(r_theta)
    dbg = np.asarray(s_i.bg, dtype=float) - P.bg_lin
    phi_b = P.J_gamma_bg @ dbg

    J_pose_i = np.zeros((15, 6))
    J_pose_i[ALPHA, 0:3] = -RiT
    J_pose_i[ALPHA, 3:6] = skew(RiT @ dp)
    J_pose_i[BETA, 3:6] = skew(RiT @ dv)
    J_pose_i[THETA, 3:6] = -Jr_inv @ Rj.T @ Ri

    J_sb_i = np.zeros((15, 9))
    J_sb_i[ALPHA, 0:3] = -RiT * dt
    J_sb_i[ALPHA, 3:6] = -P.J_alpha_ba
    J_sb_i[ALPHA, 6:9] = -P.J_alpha_bg
    J_sb_i[BETA, 0:3] = -RiT
    J_sb_i[BETA, 3:6] = -P.J_beta_ba
    J_sb_i[BETA, 6:9] = -P.J_beta_bg
    J_sb_i[THETA, 6:9] = -Jr_inv @ rot_err.matrix().T @ right_jacobian(phi_b) @ P.J_gamma_bg
    J_sb_i[BA, 3:6] = -I3
    J_sb_i[BG, 6:9] = -I3

    J_pose_j = np.zeros((15, 6))
    J_pose_j[ALPHA, 0:3] = RiT
    J_pose_j[THETA, 3:6] = Jr_inv

    J_sb_j = np.zeros((15, 9))
    J_sb_j[BETA, 0:3] = RiT
    J_sb_j[BA, 3:6] = I3
    J_sb_j[BG, 6:9] = I3

    return r, [J_pose_i, J_sb_i, J_pose_j, J_sb_j]


class _BlockState(NamedTuple):
    pose: Pose
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray


def _state_from_blocks(pose: Pose, sb: np.ndarray) -> _BlockState:
    sb = np.asarray(sb, dtype=float)
    return _BlockState(pose, sb[0:3], sb[3:6], sb[6:9])


class ImuFactor(Factor):
    """Blocks (pose_i, sb_i, pose_j, sb_j); sb = (v, ba, bg), whitened by cov^-1/2."""

    def __init__(
        self,
        pose_i: BlockId,
        sb_i: BlockId,
        pose_j: BlockId,
        sb_j: BlockId,
        preintegration: Preintegration,
        gravity: np.ndarray,
    ) -> None:
        super().__init__([pose_i, sb_i, pose_j, sb_j])
        self.preintegration = preintegration
        self.gravity = np.asarray(gravity, dtype=float)

    @property
    def dim(self) -> int:
        return 15

    def evaluate(self, values, jacobians=True):
        s_i = _state_from_blocks(values[self.blocks[0]], values[self.blocks[1]])
        s_j = _state_from_blocks(values[self.blocks[2]], values[self.blocks[3]])
        r, jacs = _residual_and_jacobian(self.preintegration, s_i, s_j, self.gravity, jacobians)
        W = self.preintegration.sqrt_info()
        if not jacobians:
            return W @ r, None
        return W @ r, [W @ J for J in jacs]
