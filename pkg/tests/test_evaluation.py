"""Tests for trajectory alignment and accuracy metrics."""

import math

import numpy as np
import pytest

from core.errors import AlignmentError, EvaluationError
from core.evaluation import (
    Trajectory,
    associate,
    ate_errors,
    ate_rmse,
    default_segment_lengths,
    horn_align,
    path_length,
    rpe,
)
from core.manifold import Pose, Rotation, so3_exp
from tests.conftest import random_pose, random_rotation


def line(n=11, step=1.0, dt=0.1, t0=0.0):
    """Straight path along world x, one pose per dt."""
    return Trajectory(
        [t0 + k * dt for k in range(n)],
        [Pose(Rotation.identity(), [k * step, 0.0, 0.0]) for k in range(n)],
    )


def wavy(rng, n=50):
    times = np.arange(n) * 0.05
    poses = [
        Pose(so3_exp([0.0, 0.0, 0.1 * k]), [math.cos(0.2 * k), math.sin(0.2 * k), 0.05 * k])
        for k in range(n)
    ]
    return Trajectory(times, poses)


class TestTrajectory:
    def test_rejects_unsorted_times(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], [Pose.identity(), Pose.identity()])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 1.0], [Pose.identity()])

    def test_path_length(self):
        assert path_length(line(n=11, step=0.5)) == pytest.approx(5.0)


class TestAssociate:
    """Test timestamp matching."""

    def test_exact(self):
        traj = line()
        assert associate(traj, traj) == [(k, k) for k in range(11)]

    def test_offset_within_tolerance(self):
        est = line(t0=0.004)
        assert associate(est, line(), max_dt=0.005) == [(k, k) for k in range(11)]

    def test_boundary_is_exclusive(self):
        est = Trajectory([0.25], [Pose.identity()])
        gt = Trajectory([0.0, 0.5], [Pose.identity()] * 2)
        with pytest.raises(EvaluationError):
            associate(est, gt, max_dt=0.25)

    def test_each_pose_used_once(self):
        est = Trajectory([0.0, 0.004], [Pose.identity()] * 2)
        gt = Trajectory([0.003], [Pose.identity()])
        assert associate(est, gt) == [(1, 0)]

    def test_empty(self):
        empty = Trajectory([], [])
        with pytest.raises(EvaluationError):
            associate(empty, line())


class TestHornAlign:
    """Test closed-form alignment."""

    def test_recovers_rigid_transform(self, rng):
        pts = rng.normal(size=(20, 3))
        R = random_rotation(rng)
        t = rng.normal(size=3)
        gt = pts @ R.matrix().T + t
        a = horn_align(pts, gt)
        assert a.scale == 1.0
        np.testing.assert_allclose(a.R.matrix(), R.matrix(), atol=1e-10)
        np.testing.assert_allclose(a.t, t, atol=1e-10)
        np.testing.assert_allclose(a.apply(pts), gt, atol=1e-10)

    def test_recovers_scale(self, rng):
        pts = rng.normal(size=(20, 3))
        R = random_rotation(rng)
        gt = 2.5 * pts @ R.matrix().T + [1.0, -2.0, 0.5]
        a = horn_align(pts, gt, with_scale=True)
        assert a.scale == pytest.approx(2.5, rel=1e-10)
        np.testing.assert_allclose(a.apply(pts), gt, atol=1e-9)

    def test_planar_points(self, rng):
        pts = np.column_stack([rng.normal(size=(10, 2)), np.zeros(10)])
        R = random_rotation(rng)
        a = horn_align(pts, pts @ R.matrix().T)
        np.testing.assert_allclose(a.R.matrix(), R.matrix(), atol=1e-9)

    def test_too_few_points(self):
        with pytest.raises(AlignmentError):
            horn_align(np.eye(3)[:2], np.eye(3)[:2])

    def test_collinear(self):
        pts = np.outer(np.arange(5.0), [1.0, 2.0, 0.0])
        with pytest.raises(AlignmentError):
            horn_align(pts, pts)

    def test_shape_mismatch(self):
        with pytest.raises(AlignmentError):
            horn_align(np.zeros((4, 3)), np.zeros((5, 3)))


class TestAte:
    """Test absolute trajectory error."""

    def test_identical(self, rng):
        traj = wavy(rng)
        assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)

    def test_invariant_to_world_frame(self, rng):
        gt = wavy(rng)
        est = gt.transformed(random_pose(rng, max_offset=10.0))
        assert ate_rmse(est, gt) < 1e-9
        assert ate_rmse(est, gt, align=False) > 1e-3

    def test_constant_offset_without_alignment(self, rng):
        gt = wavy(rng)
        est = gt.transformed(Pose(Rotation.identity(), [0.0, 0.0, 0.3]))
        assert ate_rmse(est, gt, align=False) == pytest.approx(0.3)

    def test_scale_drift(self, rng):
        gt = wavy(rng)
        est = Trajectory(gt.times, [Pose(p.R, 0.5 * p.p) for p in gt.poses])
        assert ate_rmse(est, gt) > 0.01
        assert ate_rmse(est, gt, with_scale=True) < 1e-9

    def test_known_noise(self, rng):
        gt = wavy(rng, n=2000)
        noise = rng.normal(scale=0.01, size=(len(gt), 3))
        est = Trajectory(gt.times, [Pose(p.R, p.p + d) for p, d in zip(gt.poses, noise)])
        errors = ate_errors(est, gt, align=False)
        assert len(errors) == len(gt)
        assert ate_rmse(est, gt, align=False) == pytest.approx(0.01 * math.sqrt(3), rel=0.05)


class TestRpe:
    """Test relative pose error."""

    def test_identical(self):
        traj = line(n=101, step=0.1)
        bins = rpe(traj, traj, [1.0, 2.0])
        assert all(b.valid for b in bins)
        assert all(b.translation_pct == pytest.approx(0.0, abs=1e-9) for b in bins)
        assert bins[0].count > bins[1].count > 0

    def test_scale_error_percent(self):
        gt = line(n=101, step=0.1)
        est = line(n=101, step=0.11)
        (b,) = rpe(est, gt, [1.05])
        # every segment spans 11 steps: 1.1 m of ground truth against 1.21 m estimated
        assert b.translation_pct == pytest.approx(100.0 * 0.11 / 1.05, rel=1e-6)
        assert b.rotation_deg_per_m == pytest.approx(0.0, abs=1e-9)

    def test_rotation_drift(self):
        gt = line(n=101, step=0.1)
        est = Trajectory(
            gt.times, [Pose(so3_exp([0.0, 0.0, 0.001 * k]), p.p) for k, p in enumerate(gt.poses)]
        )
        (b,) = rpe(est, gt, [1.05])
        assert b.rotation_deg_per_m == pytest.approx(math.degrees(0.011 / 1.05), rel=1e-6)

    def test_invariant_to_world_frame(self, rng):
        gt = wavy(rng)
        est = gt.transformed(random_pose(rng))
        for b in rpe(est, gt, [0.5, 1.0]):
            assert b.translation_pct == pytest.approx(0.0, abs=1e-7)

    def test_segment_longer_than_path(self):
        traj = line(n=11, step=0.1)
        (b,) = rpe(traj, traj, [5.0])
        assert not b.valid
        assert b.count == 0
        assert math.isnan(b.translation_pct)

    def test_default_lengths_scaled(self):
        assert default_segment_lengths(line(n=26, step=1.0)) == pytest.approx([2.5, 5.0, 10.0, 20.0])
        assert default_segment_lengths(line(n=201, step=1.0)) == pytest.approx([5.0, 10.0, 20.0, 40.0])
