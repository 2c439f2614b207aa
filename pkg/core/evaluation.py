"""Trajectory accuracy metrics: Horn alignment, ATE RMSE and distance-binned RPE."""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from core.errors import AlignmentError, EvaluationError
from core.logging import get_logger
from core.manifold import Pose, Rotation

logger = get_logger(__name__)

DEFAULT_MAX_DT = 0.01
BASE_SEGMENT_LENGTHS = (5.0, 10.0, 20.0, 40.0)
REFERENCE_PATH_LENGTH = 50.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: Sequence[float]
    poses: Sequence[Pose]

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if len(times) != len(self.poses):
            raise ValueError(f"{len(times)} timestamps for {len(self.poses)} poses")
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "poses", list(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.p for p in self.poses]).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        """Every pose left-multiplied by T (a change of world frame)."""
        return Trajectory(self.times, [T * p for p in self.poses])


class Alignment(NamedTuple):
    R: Rotation
    t: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.R.matrix().T + self.t


def associate(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> List[Tuple[int, int]]:
    """Greedy nearest-timestamp matching; every pose is used at most once.

    Candidate pairs closer than max_dt are taken in order of increasing time
    difference. Returns (est index, gt index) pairs sorted by est index.
    """
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("cannot associate an empty trajectory")
    candidates = []
    for i, t in enumerate(est.times):
        lo = np.searchsorted(gt.times, t - max_dt, side="left")
        hi = np.searchsorted(gt.times, t + max_dt, side="right")
        for j in range(lo, hi):
            diff = abs(gt.times[j] - t)
            if diff < max_dt:
                candidates.append((diff, i, j))
    candidates.sort()
    used_est, used_gt = set(), set()
    matches = []
    for _, i, j in candidates:
        if i in used_est or j in used_gt:
            continue
        used_est.add(i)
        used_gt.add(j)
        matches.append((i, j))
    if not matches:
        raise EvaluationError(f"no timestamps match within {max_dt} s")
    matches.sort()
    return matches


def _rank(centered: np.ndarray) -> int:
    sv = scipy.linalg.svdvals(centered)
    if sv.size == 0 or sv[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sv > 1e-9 * sv[0]))


def horn_align(est_pos: np.ndarray, gt_pos: np.ndarray, with_scale: bool = False) -> Alignment:
    """Closed-form (unit quaternion) transform minimizing sum |gt - (s R est + t)|^2.

    Without scale the returned scale is exactly 1.0.
    """
    est_pos = np.asarray(est_pos, dtype=float).reshape(-1, 3)
    gt_pos = np.asarray(gt_pos, dtype=float).reshape(-1, 3)
    if est_pos.shape != gt_pos.shape:
        raise AlignmentError(f"{len(est_pos)} estimated vs {len(gt_pos)} reference positions")
    if len(est_pos) < 3:
        raise AlignmentError(f"need at least 3 position pairs, got {len(est_pos)}")
    mu_e = est_pos.mean(axis=0)
    mu_g = gt_pos.mean(axis=0)
    a = est_pos - mu_e
    b = gt_pos - mu_g
    if _rank(a) < 2 or _rank(b) < 2:
        raise AlignmentError("positions are collinear or coincident")

    S = a.T @ b
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    _, V = scipy.linalg.eigh(N)
    R = Rotation(V[:, -1])

    scale = 1.0
    if with_scale:
        scale = float(np.sum(b * (a @ R.matrix().T)) / np.sum(a * a))
    t = mu_g - scale * R.rotate(mu_e)
    return Alignment(R, t, scale)


def _associated_positions(
    est: Trajectory, gt: Trajectory, max_dt: float
) -> Tuple[np.ndarray, np.ndarray]:
    pairs = associate(est, gt, max_dt)
    idx_e, idx_g = (list(x) for x in zip(*pairs))
    return est.positions()[idx_e], gt.positions()[idx_g]


def ate_errors(
    est: Trajectory,
    gt: Trajectory,
    align: bool = True,
    with_scale: bool = False,
    max_dt: float = DEFAULT_MAX_DT,
) -> np.ndarray:
    """Per-pair translation error after (optional) alignment."""
    e, g = _associated_positions(est, gt, max_dt)
    if align:
        e = horn_align(e, g, with_scale).apply(e)
    return np.linalg.norm(g - e, axis=1)


def ate_rmse(
    est: Trajectory,
    gt: Trajectory,
    align: bool = True,
    with_scale: bool = False,
    max_dt: float = DEFAULT_MAX_DT,
) -> float:
    errors = ate_errors(est, gt, align, with_scale, max_dt)
    return float(np.sqrt(np.mean(errors**2)))


def path_length(traj: Trajectory) -> float:
    p = traj.positions()
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def default_segment_lengths(gt: Trajectory) -> List[float]:
    """The 5/10/20/40 m ladder, shrunk for paths shorter than 50 m."""
    factor = min(1.0, path_length(gt) / REFERENCE_PATH_LENGTH)
    return [L * factor for L in BASE_SEGMENT_LENGTHS]


class RpeBin(NamedTuple):
    length: float
    translation_pct: float
    rotation_deg_per_m: float
    count: int
    valid: bool


def rpe(
    est: Trajectory,
    gt: Trajectory,
    segment_lengths: Optional[Sequence[float]] = None,
    max_dt: float = DEFAULT_MAX_DT,
) -> List[RpeBin]:
    """Relative pose error over segments of fixed ground-truth path length.

    For every start pose and length L the segment ends at the first pose
    whose arc length exceeds start + L. The error pose is
    inv(inv(E_i) E_j) * inv(G_i) G_j; translation is reported in percent of
    L, rotation in degrees per meter. Lengths with no complete segment come
    back as NaN with valid=False.
    """
    pairs = associate(est, gt, max_dt)
    est_poses = [est.poses[i] for i, _ in pairs]
    gt_poses = [gt.poses[j] for _, j in pairs]
    gt_p = np.array([p.p for p in gt_poses])
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt_p, axis=0), axis=1))])
    if segment_lengths is None:
        segment_lengths = default_segment_lengths(Trajectory([gt.times[j] for _, j in pairs], gt_poses))

    bins = []
    for L in segment_lengths:
        t_err, r_err = [], []
        for first in range(len(gt_poses)):
            last = int(np.searchsorted(dist, dist[first] + L, side="right"))
            if last >= len(gt_poses):
                break
            d_est = est_poses[first].inverse() * est_poses[last]
            d_gt = gt_poses[first].inverse() * gt_poses[last]
            E = d_est.inverse() * d_gt
            t_err.append(np.linalg.norm(E.p) / L)
            r_err.append(E.R.angle() / L)
        if not t_err:
            logger.warning("No segment of %.3f m fits the reference path", L)
            bins.append(RpeBin(float(L), float("nan"), float("nan"), 0, False))
            continue
        bins.append(
            RpeBin(
                float(L),
                100.0 * float(np.mean(t_err)),
                float(np.degrees(np.mean(r_err))),
                len(t_err),
                True,
            )
        )
    return bins
