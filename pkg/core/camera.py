"""Pinhole cameras, landmarks and the reprojection factors.

A landmark is stored as inverse depth rho along the ray of its anchor
observation. For a temporal observation (anchor frame i, observing frame t):

    f_c_anchor = m / rho,  m = ((u - cx) / fx, (v - cy) / fy, 1)
    f_c_obs    = T_bc_obs^-1 * T_t^-1 * T_i * T_bc_anchor * f_c_anchor
    r          = obs_uv - project(f_c_obs)

T_bc is the pose of the camera expressed in the body frame. A spatial
(stereo) observation uses the same body pose on both sides, so only the
inverse depth enters.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.errors import BehindCameraError, InvalidDepthError
from core.logging import get_logger
from core.manifold import Pose, skew
from core.solver import BlockId, Factor, LinearizedChunk, Values

logger = get_logger(__name__)

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def in_bounds(self, uv: Sequence[float]) -> bool:
        u, v = uv
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: PinholeIntrinsics
    T_bc: Pose


@dataclass(frozen=True, eq=False)
class CameraRig:
    """Cameras indexed densely from 0 (0 is the left/reference camera)."""

    cameras: Tuple[Camera, ...]

    def __post_init__(self) -> None:
        if not self.cameras:
            raise ValueError("a camera rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, camera_id: int) -> Camera:
        return self.cameras[camera_id]

    @property
    def stereo_baseline(self) -> float:
        if len(self.cameras) < 2:
            return 0.0
        return float(np.linalg.norm(self.cameras[1].T_bc.p - self.cameras[0].T_bc.p))


@dataclass(frozen=True)
class FeatureObservation:
    frame_id: int
    camera_id: int
    feature_id: int
    uv: Tuple[float, float]


class FeatureFrame(NamedTuple):
    """All observations of one synchronized frame (every camera)."""

    frame_id: int
    t: float
    observations: List[FeatureObservation]


@dataclass
class Landmark:
    feature_id: int
    anchor_frame: int
    anchor_camera: int
    anchor_uv: np.ndarray
    inv_depth: Optional[float] = None
    observations: List[FeatureObservation] = field(default_factory=list)

    @property
    def triangulated(self) -> bool:
        return self.inv_depth is not None

    @property
    def active(self) -> bool:
        """In the graph: triangulated with the anchor plus at least one more view."""
        return self.triangulated and len(self.observations) >= 2

    def frames(self) -> List[int]:
        return sorted({obs.frame_id for obs in self.observations})

    def observation(self, frame_id: int, camera_id: int) -> Optional[FeatureObservation]:
        for obs in self.observations:
            if obs.frame_id == frame_id and obs.camera_id == camera_id:
                return obs
        return None

    def is_anchor(self, obs: FeatureObservation) -> bool:
        return obs.frame_id == self.anchor_frame and obs.camera_id == self.anchor_camera


def project(intr: PinholeIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(p_cam, dtype=float)
    if not z > EPS_DEPTH:
        raise BehindCameraError(f"point depth {z:.3g} m is behind the camera")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def backproject(intr: PinholeIntrinsics, uv: Sequence[float], depth: float) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = uv
    return depth * np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])


def bearing(intr: PinholeIntrinsics, uv: Sequence[float]) -> np.ndarray:
    """Normalized image coordinates (z = 1) of a pixel."""
    return backproject(intr, uv, 1.0)


class ReprojectionBatch(NamedTuple):
    residuals: np.ndarray  # (N, 2) pixels, unwhitened
    valid: np.ndarray  # (N,)
    d_pose_i: Optional[np.ndarray]  # (N, 2, 6)
    d_pose_t: Optional[np.ndarray]  # (N, 2, 6)
    d_rho: Optional[np.ndarray]  # (N, 2, 1)


def reprojection_kernel(
    R_i: np.ndarray,
    p_i: np.ndarray,
    R_t: np.ndarray,
    p_t: np.ndarray,
    R_ba: np.ndarray,
    p_ba: np.ndarray,
    R_bo: np.ndarray,
    p_bo: np.ndarray,
    K_a: np.ndarray,
    K_o: np.ndarray,
    rho: np.ndarray,
    anchor_uv: np.ndarray,
    obs_uv: np.ndarray,
    same_frame: bool,
    jacobians: bool = True,
) -> ReprojectionBatch:
    """Vectorized reprojection residuals and Jacobians over N observations.

    Rotations are (N, 3, 3), translations (N, 3), intrinsics (N, 4) as
    (fx, fy, cx, cy). With same_frame the body poses are ignored.
    """
    rho = np.asarray(rho, dtype=float)
    valid = np.isfinite(rho) & (rho > 0.0)
    safe_rho = np.where(valid, rho, 1.0)

    m = np.stack(
        [
            (anchor_uv[:, 0] - K_a[:, 2]) / K_a[:, 0],
            (anchor_uv[:, 1] - K_a[:, 3]) / K_a[:, 1],
            np.ones(len(rho)),
        ],
        axis=1,
    )
    f_ci = m / safe_rho[:, None]
    f_bi = np.einsum("nij,nj->ni", R_ba, f_ci) + p_ba
    if same_frame:
        f_bt = f_bi
    else:
        f_w = np.einsum("nij,nj->ni", R_i, f_bi) + p_i
        f_bt = np.einsum("nji,nj->ni", R_t, f_w - p_t)
    f_ct = np.einsum("nji,nj->ni", R_bo, f_bt - p_bo)

    z = f_ct[:, 2]
    valid &= np.isfinite(z) & (z > EPS_DEPTH)
    safe_z = np.where(valid, z, 1.0)
    fx, fy, cx, cy = K_o[:, 0], K_o[:, 1], K_o[:, 2], K_o[:, 3]
    proj = np.stack([fx * f_ct[:, 0] / safe_z + cx, fy * f_ct[:, 1] / safe_z + cy], axis=1)
    residuals = np.where(valid[:, None], obs_uv - proj, 0.0)

    if not jacobians:
        return ReprojectionBatch(residuals, valid, None, None, None)

    n = len(rho)
    J_pi = np.zeros((n, 2, 3))
    J_pi[:, 0, 0] = fx / safe_z
    J_pi[:, 0, 2] = -fx * f_ct[:, 0] / safe_z**2
    J_pi[:, 1, 1] = fy / safe_z
    J_pi[:, 1, 2] = -fy * f_ct[:, 1] / safe_z**2
    # residual = obs - pi(.), so every chain carries a minus sign
    neg_J_pi = -J_pi

    R_bo_T = np.transpose(R_bo, (0, 2, 1))
    dm_drho = -m / (safe_rho**2)[:, None]
    if same_frame:
        d_rho_ct = np.einsum("nij,nj->ni", R_bo_T @ R_ba, dm_drho)
        d_rho = (neg_J_pi @ d_rho_ct[:, :, None])
        return ReprojectionBatch(residuals, valid, None, None, d_rho)

    A = R_bo_T @ np.transpose(R_t, (0, 2, 1))
    d_pose_i = np.zeros((n, 3, 6))
    d_pose_i[:, :, :3] = A
    d_pose_i[:, :, 3:] = -(A @ R_i) @ skew(f_bi)
    d_pose_t = np.zeros((n, 3, 6))
    d_pose_t[:, :, :3] = -A
    d_pose_t[:, :, 3:] = R_bo_T @ skew(f_bt)
    d_rho_ct = np.einsum("nij,nj->ni", A @ R_i @ R_ba, dm_drho)

    return ReprojectionBatch(
        residuals,
        valid,
        neg_J_pi @ d_pose_i,
        neg_J_pi @ d_pose_t,
        neg_J_pi @ d_rho_ct[:, :, None],
    )


def _single(
    pose_i: Pose,
    pose_t: Pose,
    cam_anchor: Camera,
    cam_obs: Camera,
    inv_depth: float,
    anchor_uv: Sequence[float],
    obs_uv: Sequence[float],
    same_frame: bool,
    jacobians: bool,
) -> ReprojectionBatch:
    if not inv_depth > 0:
        raise InvalidDepthError(f"inverse depth must be positive, got {inv_depth}")
    out = reprojection_kernel(
        pose_i.R.matrix()[None],
        pose_i.p[None],
        pose_t.R.matrix()[None],
        pose_t.p[None],
        cam_anchor.T_bc.R.matrix()[None],
        cam_anchor.T_bc.p[None],
        cam_obs.T_bc.R.matrix()[None],
        cam_obs.T_bc.p[None],
        cam_anchor.intrinsics.as_array()[None],
        cam_obs.intrinsics.as_array()[None],
        np.array([inv_depth], dtype=float),
        np.asarray(anchor_uv, dtype=float)[None],
        np.asarray(obs_uv, dtype=float)[None],
        same_frame,
        jacobians,
    )
    if not out.valid[0]:
        raise BehindCameraError("observed point is behind the observing camera")
    return out


def reprojection_residual(
    pose_i: Pose,
    pose_t: Pose,
    cam_anchor: Camera,
    cam_obs: Camera,
    inv_depth: float,
    anchor_uv: Sequence[float],
    obs_uv: Sequence[float],
    same_frame: bool = False,
) -> np.ndarray:
    """Pixel residual obs_uv - h(x); raises BehindCameraError or InvalidDepthError."""
    out = _single(
        pose_i, pose_t, cam_anchor, cam_obs, inv_depth, anchor_uv, obs_uv, same_frame, False
    )
    return out.residuals[0]


class ReprojectionJacobian(NamedTuple):
    pose_i: Optional[np.ndarray]
    pose_t: Optional[np.ndarray]
    inv_depth: np.ndarray


def reprojection_jacobian(
    pose_i: Pose,
    pose_t: Pose,
    cam_anchor: Camera,
    cam_obs: Camera,
    inv_depth: float,
    anchor_uv: Sequence[float],
    obs_uv: Sequence[float],
    same_frame: bool = False,
) -> ReprojectionJacobian:
    """Residual Jacobians (2x6, 2x6, 2x1); stereo (same_frame) has no pose blocks."""
    out = _single(
        pose_i, pose_t, cam_anchor, cam_obs, inv_depth, anchor_uv, obs_uv, same_frame, True
    )
    if same_frame:
        return ReprojectionJacobian(None, None, out.d_rho[0])
    return ReprojectionJacobian(out.d_pose_i[0], out.d_pose_t[0], out.d_rho[0])


class _BatchStatic(NamedTuple):
    """Per-batch arrays that do not change between iterations."""

    rho_blocks: List[BlockId]
    pose_blocks: List[BlockId]
    anchor_index: np.ndarray
    obs_index: np.ndarray
    R_ba: np.ndarray
    p_ba: np.ndarray
    R_bo: np.ndarray
    p_bo: np.ndarray
    K_a: np.ndarray
    K_o: np.ndarray
    anchor_uv: np.ndarray
    obs_uv: np.ndarray
    inv_sigma: np.ndarray


def _camera_arrays(cameras: Sequence[Camera]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # a rig has a handful of cameras, convert each once
    unique: Dict[int, int] = {}
    rows: List[Camera] = []
    for cam in cameras:
        if id(cam) not in unique:
            unique[id(cam)] = len(rows)
            rows.append(cam)
    index = np.array([unique[id(cam)] for cam in cameras], dtype=int)
    R = np.stack([c.T_bc.R.matrix() for c in rows])[index]
    p = np.stack([c.T_bc.p for c in rows])[index]
    K = np.stack([c.intrinsics.as_array() for c in rows])[index]
    return R, p, K


def _batch_static(factors: Sequence["_CameraFactor"]) -> _BatchStatic:
    cache = getattr(factors, "cache", None)
    if cache is not None and "camera" in cache:
        return cache["camera"]
    pose_blocks: List[BlockId] = []
    anchor_index = obs_index = np.zeros(0, dtype=int)
    if not factors[0].same_frame:
        slots: Dict[BlockId, int] = {}
        for f in factors:
            for bid in f.blocks[:2]:
                if bid not in slots:
                    slots[bid] = len(pose_blocks)
                    pose_blocks.append(bid)
        anchor_index = np.array([slots[f.blocks[0]] for f in factors], dtype=int)
        obs_index = np.array([slots[f.blocks[1]] for f in factors], dtype=int)
    R_ba, p_ba, K_a = _camera_arrays([f.cam_anchor for f in factors])
    R_bo, p_bo, K_o = _camera_arrays([f.cam_obs for f in factors])
    static = _BatchStatic(
        rho_blocks=[f.blocks[-1] for f in factors],
        pose_blocks=pose_blocks,
        anchor_index=anchor_index,
        obs_index=obs_index,
        R_ba=R_ba,
        p_ba=p_ba,
        R_bo=R_bo,
        p_bo=p_bo,
        K_a=K_a,
        K_o=K_o,
        anchor_uv=np.stack([f.anchor_uv for f in factors]),
        obs_uv=np.stack([f.obs_uv for f in factors]),
        inv_sigma=np.array([1.0 / f.sigma_px for f in factors]),
    )
    if cache is not None:
        cache["camera"] = static
    return static


class _CameraFactor(Factor):
    same_frame = False

    def __init__(
        self,
        blocks: Sequence[BlockId],
        cam_anchor: Camera,
        cam_obs: Camera,
        anchor_uv: Sequence[float],
        obs_uv: Sequence[float],
        sigma_px: float = 1.0,
        huber_px: Optional[float] = 1.0,
    ) -> None:
        super().__init__(blocks)
        self.cam_anchor = cam_anchor
        self.cam_obs = cam_obs
        self.anchor_uv = np.asarray(anchor_uv, dtype=float)
        self.obs_uv = np.asarray(obs_uv, dtype=float)
        self.sigma_px = sigma_px
        self.loss_delta = None if huber_px is None else huber_px / sigma_px

    @property
    def dim(self) -> int:
        return 2

    def signature(self) -> Tuple:
        return (type(self), self.loss_delta)

    def evaluate(self, values, jacobians=True):
        chunk = type(self).linearize_batch([self], values, jacobians)
        if not chunk.valid[0]:
            raise BehindCameraError("observed point is behind the observing camera")
        r = chunk.residuals[0]
        if not jacobians:
            return r, None
        return r, [j[0] for j in chunk.jacobians]

    @classmethod
    def linearize_batch(cls, factors, values, jacobians=True) -> LinearizedChunk:
        static = _batch_static(factors)
        rho = np.array([values[b] for b in static.rho_blocks], dtype=float)
        if cls.same_frame:
            n = len(factors)
            R_i = R_t = np.broadcast_to(np.eye(3), (n, 3, 3))
            p_i = p_t = np.zeros((n, 3))
        else:
            poses = [values[b] for b in static.pose_blocks]
            R_u = np.stack([p.R.matrix() for p in poses])
            p_u = np.stack([p.p for p in poses])
            R_i, p_i = R_u[static.anchor_index], p_u[static.anchor_index]
            R_t, p_t = R_u[static.obs_index], p_u[static.obs_index]
        out = reprojection_kernel(
            R_i,
            p_i,
            R_t,
            p_t,
            static.R_ba,
            static.p_ba,
            static.R_bo,
            static.p_bo,
            static.K_a,
            static.K_o,
            rho,
            static.anchor_uv,
            static.obs_uv,
            cls.same_frame,
            jacobians,
        )
        inv_sigma = static.inv_sigma
        residuals = out.residuals * inv_sigma[:, None]
        jacs: List[np.ndarray] = []
        if jacobians:
            parts = [out.d_rho] if cls.same_frame else [out.d_pose_i, out.d_pose_t, out.d_rho]
            jacs = [j * inv_sigma[:, None, None] for j in parts]
        return LinearizedChunk(list(factors), residuals, jacs, out.valid)


class ReprojectionFactor(_CameraFactor):
    """Temporal observation: blocks (pose of anchor frame, pose of observing frame, rho)."""

    def __init__(self, pose_i: BlockId, pose_t: BlockId, rho: BlockId, *args, **kwargs) -> None:
        super().__init__([pose_i, pose_t, rho], *args, **kwargs)


class StereoFactor(_CameraFactor):
    """Spatial observation of the anchor frame by another camera: block (rho,)."""

    same_frame = True

    def __init__(self, rho: BlockId, *args, **kwargs) -> None:
        super().__init__([rho], *args, **kwargs)
