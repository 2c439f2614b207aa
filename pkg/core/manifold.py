"""SO(3) and pose arithmetic on unit quaternions.

Conventions used by every Jacobian in the package:
  - quaternions are stored (w, x, y, z) with w >= 0 after construction;
  - rotation perturbations act on the right (body frame): R + d = R * Exp(d);
  - a pose tangent vector is ordered [dp, dtheta] and dp is added in the
    world frame, so position and attitude are perturbed independently.
"""

from typing import Any, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

# Taylor branches of exp/log below this angle (radians).
SMALL_ANGLE = 1e-6

POSE_DIM = 6
ROTATION_DIM = 3


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; accepts (..., 3) and returns (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


class Rotation:
    """Immutable unit quaternion."""

    __slots__ = ("_q", "_m")

    def __init__(self, q: Sequence[float]) -> None:
        q = np.array(q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"not a valid quaternion: {q}")
        q = q / n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        self._q = q
        self._m = None

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        x, y, z, w = ScipyRotation.from_matrix(np.asarray(m, dtype=float)).as_quat()
        return cls((w, x, y, z))

    @classmethod
    def from_xyzw(cls, q: Sequence[float]) -> "Rotation":
        x, y, z, w = q
        return cls((w, x, y, z))

    @classmethod
    def from_yaw(cls, yaw: float) -> "Rotation":
        return so3_exp(np.array([0.0, 0.0, yaw]))

    @property
    def q(self) -> np.ndarray:
        return self._q

    def as_xyzw(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array([x, y, z, w])

    def matrix(self) -> np.ndarray:
        if self._m is None:
            w, x, y, z = self._q
            m = np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ]
            )
            m.setflags(write=False)
            self._m = m
        return self._m

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def yaw(self) -> float:
        m = self.matrix()
        return float(np.arctan2(m[1, 0], m[0, 0]))

    def angle(self) -> float:
        return float(np.linalg.norm(so3_log(self)))

    def __mul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(_quat_multiply(self._q, other._q))

    def __repr__(self) -> str:
        return "Rotation(w={:.9f}, x={:.9f}, y={:.9f}, z={:.9f})".format(*self._q)


class Pose:
    """Rigid transform x -> R x + p (pose of a frame expressed in its parent)."""

    __slots__ = ("R", "p")

    def __init__(self, R: Rotation, p: Sequence[float]) -> None:
        p = np.array(p, dtype=float).reshape(3)
        p.setflags(write=False)
        self.R = R
        self.p = p

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.R.matrix()
        out[:3, 3] = self.p
        return out

    def inverse(self) -> "Pose":
        r_inv = self.R.inverse()
        return Pose(r_inv, -r_inv.rotate(self.p))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.R.rotate(x) + self.p

    def __mul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.R * other.R, self.R.rotate(other.p) + self.p)

    def __repr__(self) -> str:
        return f"Pose(R={self.R!r}, p={np.array2string(self.p, precision=6)})"


def so3_exp(phi: np.ndarray) -> Rotation:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        w = 1.0 - t2 / 8.0
        s = 0.5 - t2 / 48.0
    else:
        w = np.cos(0.5 * theta)
        s = np.sin(0.5 * theta) / theta
    return Rotation((w, s * phi[0], s * phi[1], s * phi[2]))


def so3_log(R: Rotation) -> np.ndarray:
    w = R.q[0]
    v = R.q[1:]
    if w < 0.0:
        w, v = -w, -v
    n = float(np.linalg.norm(v))
    if n < 0.5 * SMALL_ANGLE:
        factor = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        factor = 2.0 * np.arctan2(n, w) / n
    return factor * v


def boxplus_rotation(R: Rotation, delta: np.ndarray) -> Rotation:
    return R * so3_exp(delta)


def boxminus_rotation(Ra: Rotation, Rb: Rotation) -> np.ndarray:
    """Tangent d with Ra = Rb * Exp(d)."""
    return so3_log(Rb.inverse() * Ra)


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)
    )


def right_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    coeff = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


StateBlock = Union[Pose, Rotation, np.ndarray, float]


def tangent_dim(x: Any) -> int:
    if isinstance(x, Pose):
        return POSE_DIM
    if isinstance(x, Rotation):
        return ROTATION_DIM
    if np.isscalar(x):
        return 1
    return int(np.asarray(x).size)


def boxplus_state(x: StateBlock, delta: np.ndarray) -> StateBlock:
    """x + delta for every state block kind (pose 6, rotation 3, vectors, scalars)."""
    delta = np.asarray(delta, dtype=float).reshape(-1)
    dim = tangent_dim(x)
    if delta.size != dim:
        raise ValueError(f"tangent dimension mismatch: block {dim}, delta {delta.size}")
    if isinstance(x, Pose):
        return Pose(x.R * so3_exp(delta[3:]), x.p + delta[:3])
    if isinstance(x, Rotation):
        return x * so3_exp(delta)
    if np.isscalar(x):
        return float(x) + float(delta[0])
    return np.asarray(x, dtype=float) + delta


def boxminus_state(a: StateBlock, b: StateBlock) -> np.ndarray:
    """Tangent d with a = b + d, blockwise inverse of boxplus_state."""
    if isinstance(a, Pose):
        return np.concatenate([a.p - b.p, boxminus_rotation(a.R, b.R)])
    if isinstance(a, Rotation):
        return boxminus_rotation(a, b)
    if np.isscalar(a):
        return np.array([float(a) - float(b)])
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"block shape mismatch: {a.shape} vs {b.shape}")
    return a - b
