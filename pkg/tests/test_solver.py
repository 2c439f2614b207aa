"""Tests for the block least-squares solver and marginalization."""

import numpy as np
import pytest

from core.camera import ReprojectionFactor, StereoFactor, project
from core.errors import BehindCameraError, IndefiniteSystemError, LinearizationError
from core.manifold import Pose, Rotation, boxminus_state, boxplus_state, so3_exp
from core.sim import numerical_jacobian, simulation_rig
from core.solver import (
    INV_DEPTH,
    POSE,
    SPEED_BIAS,
    BlockId,
    BlockLayout,
    Factor,
    FactorGraph,
    GaugeFactor,
    LinearFactor,
    PriorFactor,
    SolverOptions,
    apply_update,
    graph_cost,
    huber_cost,
    linearize_graph,
    marginalize,
    optimize,
    robust_weight,
    solve_normal,
)
from tests.conftest import random_pose


def vec(key):
    return BlockId(SPEED_BIAS, key)


def rho(key):
    return BlockId(INV_DEPTH, key)


def linear_problem(rng, n_blocks=3, dim=3, n_factors=12):
    """Random linear factors over vector blocks, every block constrained."""
    ids = [vec(k) for k in range(n_blocks)]
    layout = BlockLayout((bid, dim) for bid in ids)
    graph = FactorGraph(layout=layout)
    for k in range(n_factors):
        pair = [ids[k % n_blocks], ids[(k + 1) % n_blocks]] if k % 3 else [ids[k % n_blocks]]
        mats = [rng.normal(size=(4, dim)) for _ in pair]
        graph.add(LinearFactor(pair, mats, rng.normal(size=4), np.diag(rng.uniform(0.5, 2.0, 4))))
    values = {bid: rng.normal(size=dim) for bid in ids}
    return graph, values


def dense_jacobian(graph, values):
    layout = graph.layout
    rows, res = [], []
    for f in graph.factors:
        r, jacs = f.evaluate(values)
        J = np.zeros((f.dim, layout.dim))
        for bid, Jb in zip(f.blocks, jacs):
            J[:, layout.slice(bid)] = Jb
        rows.append(J)
        res.append(r)
    return np.vstack(rows), np.concatenate(res)


def least_squares_solution(graph, values):
    J, r = dense_jacobian(graph, values)
    dx = np.linalg.lstsq(J, -r, rcond=None)[0]
    return apply_update(values, graph.layout, dx)


class FailingFactor(Factor):
    """Residual that cannot be evaluated, as for a point behind the camera."""

    @property
    def dim(self):
        return 1

    def evaluate(self, values, jacobians=True):
        raise BehindCameraError("depth <= 0")


class TestBlockLayout:
    def test_offsets(self):
        layout = BlockLayout([(vec(0), 9), (rho(3), 1), (vec(1), 9)])
        assert layout.dim == 19
        assert layout.offset(rho(3)) == 9
        assert layout.slice(vec(1)) == slice(10, 19)
        np.testing.assert_array_equal(layout.indices([rho(3)]), [9])
        assert layout.eliminable_mask().sum() == 1

    def test_duplicate_block(self):
        with pytest.raises(ValueError):
            BlockLayout([(vec(0), 9), (vec(0), 9)])

    def test_validate_unknown_block(self, rng):
        graph = FactorGraph(layout=BlockLayout([(vec(0), 3)]))
        graph.add(LinearFactor([vec(1)], [np.eye(3)], np.zeros(3)))
        with pytest.raises(ValueError):
            graph.validate()


class TestLinearize:
    """Test assembly of the normal equations."""

    def test_matches_brute_force(self, rng):
        graph, values = linear_problem(rng)
        system = linearize_graph(graph, values)
        J, r = dense_jacobian(graph, values)
        np.testing.assert_allclose(system.H, J.T @ J, atol=1e-10)
        np.testing.assert_allclose(system.b, -J.T @ r, atol=1e-10)
        assert system.cost == pytest.approx(0.5 * r @ r, rel=1e-12)
        assert system.skipped == 0

    def test_hessian_symmetric(self, rng):
        graph, values = linear_problem(rng)
        H = linearize_graph(graph, values).H
        np.testing.assert_array_equal(H, H.T)

    def test_skips_failing_factor(self, rng):
        graph, values = linear_problem(rng, n_factors=12)
        graph.add(FailingFactor([vec(0)]))
        system = linearize_graph(graph, values)
        assert system.skipped == 1
        assert system.total == 13

    def test_too_many_failures(self, rng):
        graph, values = linear_problem(rng, n_factors=6)
        graph.add(FailingFactor([vec(0)]))
        with pytest.raises(LinearizationError):
            linearize_graph(graph, values)

    def test_groups_reused_until_factor_added(self, rng):
        graph, values = linear_problem(rng)
        groups = graph.groups()
        assert graph.groups() is groups
        assert sum(len(fs) for _, fs in groups) == len(graph.factors)
        before = linearize_graph(graph, values)
        graph.add(LinearFactor([vec(0)], [np.eye(3)], np.ones(3)))
        assert graph.groups() is not groups
        after = linearize_graph(graph, values)
        np.testing.assert_allclose(after.H - before.H, np.pad(np.eye(3), (0, 6)), atol=1e-10)

    def test_empty_graph(self):
        graph = FactorGraph(layout=BlockLayout([(vec(0), 3)]))
        system = linearize_graph(graph, {vec(0): np.zeros(3)})
        np.testing.assert_array_equal(system.H, np.zeros((3, 3)))
        assert system.cost == 0.0


class TestHuber:
    """Test robust reweighting."""

    def test_weight(self):
        assert robust_weight(0.25, 1.0) == 1.0
        assert robust_weight(100.0, 1.0) == pytest.approx(0.1)

    def test_cost_continuous_at_threshold(self):
        d = 1.5
        inside = huber_cost(np.array([d * d * (1 - 1e-12)]), d)[0]
        outside = huber_cost(np.array([d * d * (1 + 1e-12)]), d)[0]
        assert inside == pytest.approx(outside, rel=1e-9)

    def test_robust_factor_downweighted(self):
        f = LinearFactor([vec(0)], [np.eye(1)], np.array([10.0]))
        f.loss_delta = 1.0
        graph = FactorGraph([f], BlockLayout([(vec(0), 1)]))
        system = linearize_graph(graph, {vec(0): np.zeros(1)})
        assert system.cost == pytest.approx(0.5 * (2.0 * 10.0 - 1.0))
        assert system.H[0, 0] == pytest.approx(0.1)
        assert system.b[0] == pytest.approx(1.0)


class TestSolveNormal:
    """Test the Schur-complement solve."""

    def structured_system(self, rng, n_pose=18, n_land=8):
        layout = BlockLayout([(vec(0), 9), (vec(1), 9)] + [(rho(k), 1) for k in range(n_land)])
        n = n_pose + n_land
        M = rng.uniform(-1.0, 1.0, (n, n))
        H = M + M.T
        land = layout.eliminable_mask()
        block = np.ix_(land, land)
        H[block] = H[block] * np.eye(n_land)
        H += (2.0 * n + 1.0) * np.eye(n)
        return H, rng.normal(size=n), layout

    def test_schur_matches_dense(self, rng):
        H, b, layout = self.structured_system(rng)
        np.testing.assert_allclose(solve_normal(H, b, layout=layout), np.linalg.solve(H, b), atol=1e-10)

    def test_damping(self, rng):
        H, b, layout = self.structured_system(rng)
        lam = 0.3
        expected = np.linalg.solve(H + lam * np.diag(np.diag(H)), b)
        np.testing.assert_allclose(solve_normal(H, b, lam, layout), expected, atol=1e-10)

    def test_coupled_landmarks_fall_back(self, rng):
        H, b, layout = self.structured_system(rng)
        H[18, 19] = H[19, 18] = 0.5
        np.testing.assert_allclose(solve_normal(H, b, layout=layout), np.linalg.solve(H, b), atol=1e-10)

    def test_indefinite(self):
        with pytest.raises(IndefiniteSystemError):
            solve_normal(-np.eye(3), np.ones(3))


class TestOptimize:
    """Test Levenberg-Marquardt and Gauss-Newton iterations."""

    def test_linear_problem_one_step(self, rng):
        graph, values = linear_problem(rng)
        expected = least_squares_solution(graph, values)
        result, report = optimize(graph, values, SolverOptions(lambda0=0.0))
        assert report.accepted == 1
        for bid in graph.layout:
            np.testing.assert_allclose(result[bid], expected[bid], atol=1e-9)

    def test_costs_never_increase(self, rng):
        graph, values = linear_problem(rng)
        _, report = optimize(graph, values, SolverOptions(lambda0=10.0, max_iters=20))
        assert all(b <= a for a, b in zip(report.costs, report.costs[1:]))
        assert report.final_cost < report.initial_cost

    def test_nonlinear_pose(self, rng):
        """Test convergence of a pose pulled towards a reference from far away."""
        target = random_pose(rng)
        bid = BlockId("pose", 0)
        graph = FactorGraph([GaugeFactor(bid, target, full=True, weight=1.0)], BlockLayout([(bid, 6)]))
        start = Pose(target.R * so3_exp(np.array([0.8, -0.5, 0.3])), target.p + 1.0)
        result, report = optimize(graph, {bid: start}, SolverOptions(max_iters=20))
        np.testing.assert_allclose(boxminus_state(result[bid], target), np.zeros(6), atol=1e-6)
        assert report.final_cost < 1e-10

    def test_rejects_step_into_failure(self, rng):
        """Test that a step making more factors fail is not accepted."""

        class Wall(Factor):
            @property
            def dim(self):
                return 1

            def evaluate(self, values, jacobians=True):
                x = values[self.blocks[0]]
                if x[0] > 0.5:
                    raise BehindCameraError("crossed")
                return np.zeros(1), [np.zeros((1, 1))]

        graph = FactorGraph(layout=BlockLayout([(vec(0), 1)]))
        graph.add(LinearFactor([vec(0)], [np.eye(1)], np.array([2.0])))
        for _ in range(10):
            graph.add(Wall([vec(0)]))
        result, report = optimize(graph, {vec(0): np.zeros(1)}, SolverOptions(lambda0=0.0, max_iters=5))
        assert result[vec(0)][0] <= 0.5
        assert report.rejected >= 1


class TestGauge:
    """Test gauge fixing of the first pose."""

    def test_zero_at_reference(self, rng):
        ref = random_pose(rng)
        for full in (True, False):
            r, _ = GaugeFactor(BlockId("pose", 0), ref, full).evaluate({BlockId("pose", 0): ref})
            np.testing.assert_allclose(r, np.zeros(6 if full else 4), atol=1e-9)

    def test_jacobian(self, rng):
        ref = random_pose(rng)
        bid = BlockId("pose", 0)
        x = Pose(ref.R * so3_exp(np.array([0.1, 0.2, -0.1])), ref.p + 0.3)
        for full in (True, False):
            f = GaugeFactor(bid, ref, full, weight=1.0)
            _, jacs = f.evaluate({bid: x})
            numeric = numerical_jacobian(lambda p: f.evaluate({bid: p}, False)[0], x)
            np.testing.assert_allclose(jacs[0], numeric, atol=1e-6)

    def test_rank(self, rng):
        bid = BlockId("pose", 0)
        for full, rank in ((True, 6), (False, 4)):
            graph = FactorGraph([GaugeFactor(bid, Pose.identity(), full)], BlockLayout([(bid, 6)]))
            H = linearize_graph(graph, {bid: Pose.identity()}).H
            assert np.linalg.matrix_rank(H) == rank


class TestPrior:
    """Test the square-root marginalization prior."""

    def random_prior(self, rng, first_estimates):
        ids = [BlockId("pose", 0), vec(1)]
        A = rng.normal(size=(15, 15))
        H = A @ A.T + np.eye(15)
        lin = {ids[0]: random_pose(rng), ids[1]: rng.normal(size=9)}
        return PriorFactor(ids, H, rng.normal(size=15), lin, first_estimates), ids, lin

    def test_cost_reproduces_quadratic(self, rng):
        prior, ids, lin = self.random_prior(rng, True)
        dx = 0.1 * rng.normal(size=15)
        moved = apply_update(lin, prior.layout, dx)
        r0, _ = prior.evaluate(lin, False)
        r1, _ = prior.evaluate(moved, False)
        expected = 0.5 * dx @ prior.H_p @ dx - prior.b_p @ dx
        assert 0.5 * (r1 @ r1 - r0 @ r0) == pytest.approx(expected, rel=1e-9)

    def test_first_estimate_jacobian_is_constant(self, rng):
        prior, ids, lin = self.random_prior(rng, True)
        moved = apply_update(lin, prior.layout, 0.2 * rng.normal(size=15))
        _, at_lin = prior.evaluate(lin)
        _, at_moved = prior.evaluate(moved)
        for a, b in zip(at_lin, at_moved):
            np.testing.assert_array_equal(a, b)

    def test_exact_jacobian(self, rng):
        prior, ids, lin = self.random_prior(rng, False)
        moved = apply_update(lin, prior.layout, 0.3 * rng.normal(size=15))
        _, jacs = prior.evaluate(moved)
        for k, bid in enumerate(ids):

            def res(x, bid=bid):
                return prior.evaluate({**moved, bid: x}, False)[0]

            np.testing.assert_allclose(jacs[k], numerical_jacobian(res, moved[bid]), atol=1e-6)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            PriorFactor([vec(0)], np.eye(3), np.zeros(3), {vec(0): np.zeros(9)})


class TestMarginalize:
    """Test Schur-complement marginalization."""

    def split(self, graph, block):
        touching = FactorGraph(layout=graph.layout)
        rest = []
        for f in graph.factors:
            (touching.factors if block in f.blocks else rest).append(f)
        return touching, rest

    def test_linear_window_exact(self, rng):
        """Test that marginalizing a block leaves the remaining optimum unchanged."""
        graph, values = linear_problem(rng, n_blocks=4, n_factors=16)
        full = least_squares_solution(graph, values)

        touching, rest = self.split(graph, vec(0))
        system = linearize_graph(touching, values)
        prior = marginalize(system.H, system.b, [vec(0)], graph.layout, values)
        reduced = FactorGraph(rest + [prior], BlockLayout((vec(k), 3) for k in range(1, 4)))
        result, _ = optimize(reduced, {k: v for k, v in values.items() if k != vec(0)}, SolverOptions(lambda0=0.0))
        for k in range(1, 4):
            np.testing.assert_allclose(result[vec(k)], full[vec(k)], atol=1e-8)

    def test_schur_formula(self, rng):
        graph, values = linear_problem(rng)
        system = linearize_graph(graph, values)
        prior = marginalize(system.H, system.b, [vec(0)], graph.layout, values)
        H = system.H
        expected = H[3:, 3:] - H[3:, :3] @ np.linalg.solve(H[:3, :3], H[:3, 3:])
        np.testing.assert_allclose(prior.H_p, expected, atol=1e-9)
        assert np.linalg.eigvalsh(prior.H_p).min() >= -1e-9
        assert list(prior.blocks) == [vec(1), vec(2)]

    def test_uninformed_blocks_dropped(self, rng):
        layout = BlockLayout([(vec(0), 3), (vec(1), 3), (vec(2), 3)])
        graph = FactorGraph(layout=layout)
        graph.add(LinearFactor([vec(0), vec(1)], [np.eye(3), -np.eye(3)], np.ones(3)))
        graph.add(LinearFactor([vec(0)], [np.eye(3)], np.zeros(3)))
        values = {bid: np.zeros(3) for bid in layout}
        system = linearize_graph(graph, values)
        prior = marginalize(system.H, system.b, [vec(0)], layout, values)
        assert list(prior.blocks) == [vec(1)]

    def test_unknown_block(self, rng):
        graph, values = linear_problem(rng)
        system = linearize_graph(graph, values)
        with pytest.raises(ValueError):
            marginalize(system.H, system.b, [vec(9)], graph.layout, values)

    def test_graph_cost_matches_linearization(self, rng):
        graph, values = linear_problem(rng)
        cost, skipped = graph_cost(graph, values)
        assert cost == pytest.approx(linearize_graph(graph, values).cost)
        assert skipped == 0


class TestSyntheticProblems:
    """Test the solver on small problems with a known answer."""

    def test_bundle_adjustment(self, rng):
        """Test a 3-pose, 10-landmark window with 0.5 px noise started off the truth."""
        rig = simulation_rig()
        poses = [Pose(Rotation.from_yaw(0.05 * k), [0.3 * k, 0.0, 0.0]) for k in range(3)]
        points = np.column_stack([rng.uniform(-1.0, 1.5, 10), rng.uniform(3.0, 5.0, 10), rng.uniform(-0.5, 0.5, 10)])
        pose_ids = [BlockId(POSE, k) for k in range(3)]
        layout = BlockLayout([(bid, 6) for bid in pose_ids] + [(rho(j), 1) for j in range(10)])
        graph = FactorGraph(layout=layout)
        graph.add(GaugeFactor(pose_ids[0], poses[0], full=True))

        def pixel(k, c, X):
            T_wc = poses[k] * rig[c].T_bc
            return project(rig[c].intrinsics, T_wc.inverse().transform(X)) + rng.normal(scale=0.5, size=2)

        truth = dict(zip(pose_ids, poses))
        for j, X in enumerate(points):
            anchor_uv = pixel(0, 0, X)
            truth[rho(j)] = 1.0 / (poses[0] * rig[0].T_bc).inverse().transform(X)[2]
            graph.add(StereoFactor(rho(j), rig[0], rig[1], anchor_uv, pixel(0, 1, X)))
            for k in (1, 2):
                for c in (0, 1):
                    graph.add(ReprojectionFactor(pose_ids[0], pose_ids[k], rho(j), rig[0], rig[c], anchor_uv, pixel(k, c, X)))

        start = dict(truth)
        for bid in pose_ids[1:]:
            start[bid] = boxplus_state(truth[bid], np.concatenate([rng.choice([-0.1, 0.1], 3), rng.choice([-0.05, 0.05], 3)]))
        for j in range(10):
            start[rho(j)] = truth[rho(j)] * rng.uniform(0.9, 1.1)

        gt_cost, _ = graph_cost(graph, truth)
        _, report = optimize(graph, start, SolverOptions(max_iters=30))
        assert report.final_cost <= 1.01 * gt_cost

    def test_prior_gradient_at_linearization_point(self, rng):
        ids = [vec(0), vec(1)]
        A = rng.normal(size=(6, 6))
        b = rng.normal(size=6)
        lin = {ids[0]: rng.normal(size=3), ids[1]: rng.normal(size=3)}
        prior = PriorFactor(ids, A @ A.T + np.eye(6), b, lin)
        r, jacs = prior.evaluate(lin)
        gradient = np.concatenate([J.T @ r for J in jacs])
        np.testing.assert_allclose(gradient, -b, atol=1e-10)

    def test_huber_rejects_gross_outlier(self, rng):
        inliers = 1.0 + 0.001 * rng.normal(size=20)
        layout = BlockLayout([(vec(0), 1)])

        def solve(loss_delta):
            graph = FactorGraph(layout=layout)
            for z in list(inliers) + [100.0]:
                f = LinearFactor([vec(0)], [np.eye(1)], np.array([z]), np.array([[100.0]]))
                f.loss_delta = loss_delta
                graph.add(f)
            values, _ = optimize(graph, {vec(0): np.zeros(1)}, SolverOptions(lambda0=0.0, max_iters=20))
            return values[vec(0)][0]

        assert abs(solve(1.0) - inliers.mean()) < 1e-3
        assert abs(solve(None) - inliers.mean()) > 1.0

    def test_deterministic(self, rng):
        graph, values = linear_problem(rng)
        a, _ = optimize(graph, values)
        b, _ = optimize(graph, values)
        for bid in graph.layout:
            np.testing.assert_array_equal(a[bid], b[bid])
