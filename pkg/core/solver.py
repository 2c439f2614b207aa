"""Nonlinear least squares over a block-structured factor graph.

Every factor returns whitened residuals r and Jacobians J w.r.t. the tangent
spaces of its blocks (see core.manifold for the perturbation conventions).
The total cost is 0.5 * sum(rho(|r|^2)), the normal equations are H = J^T W J
and b = -J^T W r, so b is the negative cost gradient.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Type

import numpy as np
import scipy.linalg
import scipy.sparse

from core.errors import (
    GeometryError,
    IndefiniteSystemError,
    LinearizationError,
)
from core.logging import get_logger
from core.manifold import (
    Pose,
    StateBlock,
    boxminus_state,
    boxplus_state,
    right_jacobian_inverse,
    so3_log,
    tangent_dim,
)

logger = get_logger(__name__)

POSE = "pose"
SPEED_BIAS = "sb"
INV_DEPTH = "rho"

# Fraction of factors allowed to fail evaluation before a linearization is refused.
MAX_SKIPPED_FRACTION = 0.1

GAUGE_WEIGHT = 1e8
MARGINAL_EIGEN_CLAMP = 1e-8
DAMPING_FLOOR = 1e-6
_LAMBDA_RESTART = 1e-4
_LAMBDA_MAX = 1e12


class BlockId(NamedTuple):
    kind: str
    key: int


Values = Dict[BlockId, StateBlock]


class BlockLayout:
    """Ordered map from block id to (offset, tangent dimension)."""

    def __init__(self, blocks: Iterable[Tuple[BlockId, int]] = ()) -> None:
        self._entries: Dict[BlockId, Tuple[int, int]] = {}
        self.dim = 0
        for block_id, dim in blocks:
            self.add(block_id, dim)

    @classmethod
    def from_values(cls, values: Values, order: Iterable[BlockId]) -> "BlockLayout":
        return cls((bid, tangent_dim(values[bid])) for bid in order)

    def add(self, block_id: BlockId, dim: int) -> None:
        if block_id in self._entries:
            raise ValueError(f"duplicate block {block_id}")
        self._entries[block_id] = (self.dim, dim)
        self.dim += dim

    def offset(self, block_id: BlockId) -> int:
        return self._entries[block_id][0]

    def block_dim(self, block_id: BlockId) -> int:
        return self._entries[block_id][1]

    def slice(self, block_id: BlockId) -> slice:
        off, dim = self._entries[block_id]
        return slice(off, off + dim)

    def indices(self, block_ids: Iterable[BlockId]) -> np.ndarray:
        parts = [np.arange(*self.slice(b).indices(self.dim)) for b in block_ids]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def eliminable_mask(self) -> np.ndarray:
        """Tangent coordinates belonging to landmark blocks (Schur-eliminated)."""
        mask = np.zeros(self.dim, dtype=bool)
        for block_id, (off, dim) in self._entries.items():
            if block_id.kind == INV_DEPTH:
                mask[off : off + dim] = True
        return mask

    def ids(self) -> List[BlockId]:
        return list(self._entries)

    def __contains__(self, block_id: object) -> bool:
        return block_id in self._entries

    def __iter__(self) -> Iterator[BlockId]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class LinearizedChunk:
    """Residuals and Jacobians of a homogeneous batch of factors.

    residuals: (N, m) whitened; jacobians[k]: (N, m, d_k) for the k-th block
    slot; valid: (N,) False where the factor could not be evaluated.
    """

    factors: List["Factor"]
    residuals: np.ndarray
    jacobians: List[np.ndarray]
    valid: np.ndarray


def robust_weight(squared_norm: float, delta: float) -> float:
    """Huber IRLS weight: 1 inside the threshold, delta / |e| outside."""
    if squared_norm <= delta * delta:
        return 1.0
    return delta / np.sqrt(squared_norm)


def huber_cost(squared_norm: np.ndarray, delta: float) -> np.ndarray:
    s = np.asarray(squared_norm, dtype=float)
    return np.where(s <= delta * delta, s, 2.0 * delta * np.sqrt(s) - delta * delta)


def _sym_eigh(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if A.size == 0:
        return np.zeros(0), np.zeros((A.shape[0], 0))
    return scipy.linalg.eigh(0.5 * (A + A.T))


def _robust_weights(squared_norm: np.ndarray, delta: float) -> np.ndarray:
    s = np.asarray(squared_norm, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(s <= delta * delta, 1.0, delta / np.sqrt(np.maximum(s, 1e-300)))


class Factor(ABC):
    """A residual term connecting one or more state blocks.

    Subclasses implement evaluate(); factor types with many instances may
    override linearize_batch() with a vectorized kernel.
    """

    # Huber threshold in whitened units; None disables robust reweighting.
    loss_delta: Optional[float] = None

    def __init__(self, blocks: Sequence[BlockId]) -> None:
        self.blocks: Tuple[BlockId, ...] = tuple(blocks)

    @property
    @abstractmethod
    def dim(self) -> int:
        """Residual dimension."""

    @abstractmethod
    def evaluate(
        self, values: Values, jacobians: bool = True
    ) -> Tuple[np.ndarray, Optional[List[np.ndarray]]]:
        """Whitened residual and (optionally) one Jacobian per block."""

    def signature(self) -> Tuple:
        return (type(self), self.dim, len(self.blocks))

    @classmethod
    def linearize_batch(
        cls, factors: Sequence["Factor"], values: Values, jacobians: bool = True
    ) -> LinearizedChunk:
        n = len(factors)
        m = factors[0].dim
        residuals = np.zeros((n, m))
        valid = np.ones(n, dtype=bool)
        jacs: List[np.ndarray] = []
        if jacobians:
            jacs = [
                np.zeros((n, m, tangent_dim(values[b]))) for b in factors[0].blocks
            ]
        for i, factor in enumerate(factors):
            try:
                r, js = factor.evaluate(values, jacobians)
            except (GeometryError, FloatingPointError, np.linalg.LinAlgError) as e:
                logger.debug("Factor %s skipped: %s", type(factor).__name__, e)
                valid[i] = False
                continue
            if not np.all(np.isfinite(r)) or (
                jacobians and not all(np.all(np.isfinite(j)) for j in js)
            ):
                valid[i] = False
                continue
            residuals[i] = r
            if jacobians:
                for k, j in enumerate(js):
                    jacs[k][i] = j
        return LinearizedChunk(list(factors), residuals, jacs, valid)


class LinearFactor(Factor):
    """Linear-Gaussian factor r = W (sum_k A_k x_k - z) over vector blocks."""

    def __init__(
        self,
        blocks: Sequence[BlockId],
        matrices: Sequence[np.ndarray],
        z: np.ndarray,
        sqrt_info: Optional[np.ndarray] = None,
    ) -> None:
        super().__init__(blocks)
        self.matrices = [np.atleast_2d(np.asarray(a, dtype=float)) for a in matrices]
        self.z = np.atleast_1d(np.asarray(z, dtype=float))
        if sqrt_info is None:
            sqrt_info = np.eye(self.z.size)
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)

    @property
    def dim(self) -> int:
        return self.z.size

    def signature(self) -> Tuple:
        return (id(self),)

    def evaluate(self, values, jacobians=True):
        pred = sum(
            a @ np.atleast_1d(np.asarray(values[b], dtype=float))
            for a, b in zip(self.matrices, self.blocks)
        )
        r = self.sqrt_info @ (pred - self.z)
        if not jacobians:
            return r, None
        return r, [self.sqrt_info @ a for a in self.matrices]


class GaugeFactor(Factor):
    """Pins the unobservable gauge of the first window pose.

    full=True fixes all six degrees of freedom (vision only); otherwise
    position and yaw are fixed, leaving roll and pitch to gravity.
    """

    def __init__(self, block: BlockId, reference: Pose, full: bool, weight: float = GAUGE_WEIGHT):
        super().__init__([block])
        self.reference = reference
        self.full = full
        self.sqrt_weight = np.sqrt(weight)
        self._ez_r0 = reference.R.matrix()[2]

    @property
    def dim(self) -> int:
        return 6 if self.full else 4

    def signature(self) -> Tuple:
        return (id(self),)

    def evaluate(self, values, jacobians=True):
        pose: Pose = values[self.blocks[0]]
        phi = so3_log(self.reference.R.inverse() * pose.R)
        dp = pose.p - self.reference.p
        jr_inv = right_jacobian_inverse(phi)
        if self.full:
            r = np.concatenate([dp, phi])
            J = np.zeros((6, 6))
            J[:3, :3] = np.eye(3)
            J[3:, 3:] = jr_inv
        else:
            r = np.concatenate([dp, [self._ez_r0 @ phi]])
            J = np.zeros((4, 6))
            J[:3, :3] = np.eye(3)
            J[3, 3:] = self._ez_r0 @ jr_inv
        r = self.sqrt_weight * r
        if not jacobians:
            return r, None
        return r, [self.sqrt_weight * J]


class PriorFactor(Factor):
    """Marginalization prior in square-root form.

    H_p = V diag(lam) V^T is truncated to its positive spectrum; the residual
    r = sqrt(lam) V^T dx - lam^-1/2 V^T b_p, dx = x boxminus lin_point,
    reproduces 0.5 dx^T H_p dx - b_p^T dx up to a constant.
    """

    def __init__(
        self,
        block_ids: Sequence[BlockId],
        H_p: np.ndarray,
        b_p: np.ndarray,
        lin_point: Values,
        first_estimates: bool = True,
    ) -> None:
        super().__init__(block_ids)
        self.H_p = 0.5 * (H_p + H_p.T)
        self.b_p = np.asarray(b_p, dtype=float)
        self.lin_point = {bid: lin_point[bid] for bid in block_ids}
        self.first_estimates = first_estimates
        self.layout = BlockLayout((bid, tangent_dim(lin_point[bid])) for bid in block_ids)
        if self.layout.dim != self.H_p.shape[0]:
            raise ValueError(
                f"prior dimension {self.H_p.shape[0]} does not match blocks {self.layout.dim}"
            )
        w, V = _sym_eigh(self.H_p)
        w_max = max(float(w.max()), 0.0) if w.size else 0.0
        keep = w > MARGINAL_EIGEN_CLAMP * w_max if w_max > 0 else np.zeros_like(w, dtype=bool)
        sqrt_w = np.sqrt(w[keep])
        Vk = V[:, keep]
        self.sqrt_H = sqrt_w[:, None] * Vk.T
        self.r0 = -(Vk.T @ self.b_p) / sqrt_w

    @property
    def dim(self) -> int:
        return self.sqrt_H.shape[0]

    def signature(self) -> Tuple:
        return (id(self),)

    def delta(self, values: Values) -> np.ndarray:
        return np.concatenate(
            [boxminus_state(values[bid], self.lin_point[bid]) for bid in self.blocks]
        )

    def evaluate(self, values, jacobians=True):
        dx = self.delta(values)
        r = self.sqrt_H @ dx + self.r0
        if not jacobians:
            return r, None
        jacs = []
        for bid in self.blocks:
            cols = self.sqrt_H[:, self.layout.slice(bid)]
            if not self.first_estimates:
                cols = cols @ self._chart_jacobian(bid, dx[self.layout.slice(bid)])
            jacs.append(cols)
        return r, jacs

    def _chart_jacobian(self, bid: BlockId, d: np.ndarray) -> np.ndarray:
        J = np.eye(d.size)
        if isinstance(self.lin_point[bid], Pose):
            J[3:, 3:] = right_jacobian_inverse(d[3:])
        return J


class FactorBatch(list):
    """Factors sharing one batch signature.

    cache holds data that stays fixed while the graph lives (camera
    parameters, block offsets); kernels fill it on first use.
    """

    def __init__(self, factors: Iterable["Factor"] = ()) -> None:
        super().__init__(factors)
        self.cache: Dict[str, object] = {}


@dataclass
class FactorGraph:
    factors: List[Factor] = field(default_factory=list)
    layout: BlockLayout = field(default_factory=BlockLayout)
    _groups: Optional[List[Tuple[Type[Factor], FactorBatch]]] = field(
        default=None, init=False, repr=False, compare=False
    )
    _grouped_count: int = field(default=-1, init=False, repr=False, compare=False)

    def add(self, factor: Factor) -> None:
        self.factors.append(factor)
        self._groups = None

    def validate(self) -> None:
        for factor in self.factors:
            for bid in factor.blocks:
                if bid not in self.layout:
                    raise ValueError(
                        f"{type(factor).__name__} references unknown block {bid}"
                    )

    def groups(self) -> List[Tuple[Type[Factor], FactorBatch]]:
        """Factors grouped by batch signature, in first-appearance order.

        The grouping is reused until factors are added.
        """
        if self._groups is None or self._grouped_count != len(self.factors):
            grouped: Dict[Tuple, FactorBatch] = {}
            for factor in self.factors:
                grouped.setdefault(factor.signature(), FactorBatch()).append(factor)
            self._groups = [(type(fs[0]), fs) for fs in grouped.values()]
            self._grouped_count = len(self.factors)
        return self._groups


@dataclass
class LinearSystem:
    H: np.ndarray
    b: np.ndarray
    cost: float
    skipped: int
    total: int


def _check_skipped(skipped: int, total: int) -> None:
    if total and skipped > MAX_SKIPPED_FRACTION * total:
        raise LinearizationError(
            f"{skipped} of {total} factors could not be evaluated"
        )


def _chunk_cost(chunk: LinearizedChunk, loss_delta: Optional[float]) -> float:
    s = np.sum(chunk.residuals[chunk.valid] ** 2, axis=1)
    if loss_delta is not None:
        s = huber_cost(s, loss_delta)
    return 0.5 * float(np.sum(s))


def graph_cost(graph: FactorGraph, values: Values) -> Tuple[float, int]:
    """Total robust cost and the number of factors that failed to evaluate."""
    cost = 0.0
    skipped = 0
    for cls, factors in graph.groups():
        chunk = cls.linearize_batch(factors, values, jacobians=False)
        skipped += int(np.count_nonzero(~chunk.valid))
        cost += _chunk_cost(chunk, factors[0].loss_delta)
    _check_skipped(skipped, len(graph.factors))
    return cost, skipped


def _block_offsets(factors: Sequence[Factor], layout: BlockLayout, slot: int) -> np.ndarray:
    cache = getattr(factors, "cache", None)
    key = f"offsets{slot}"
    if cache is not None and key in cache:
        return cache[key]
    offsets = np.array([layout.offset(f.blocks[slot]) for f in factors])
    if cache is not None:
        cache[key] = offsets
    return offsets


def linearize_graph(graph: FactorGraph, values: Values) -> LinearSystem:
    """Assemble H, b and the cost with Huber reweighting on robust factors.

    The stacked Jacobian is built as a sparse matrix; H itself is returned
    dense since the window is small.
    """
    layout = graph.layout
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    data: List[np.ndarray] = []
    res_parts: List[np.ndarray] = []
    n_rows = 0
    cost = 0.0
    skipped = 0

    for cls, factors in graph.groups():
        chunk = cls.linearize_batch(factors, values, jacobians=True)
        skipped += int(np.count_nonzero(~chunk.valid))
        cost += _chunk_cost(chunk, factors[0].loss_delta)
        valid_idx = np.flatnonzero(chunk.valid)
        if valid_idx.size == 0:
            continue
        r = chunk.residuals[valid_idx]
        n, m = r.shape
        delta = factors[0].loss_delta
        if delta is not None:
            sqrt_w = np.sqrt(_robust_weights(np.sum(r**2, axis=1), delta))
        else:
            sqrt_w = np.ones(n)
        r = r * sqrt_w[:, None]
        row_base = n_rows + np.arange(n)[:, None] * m + np.arange(m)[None, :]
        for slot, J in enumerate(chunk.jacobians):
            J = J[valid_idx] * sqrt_w[:, None, None]
            d = J.shape[2]
            offsets = _block_offsets(factors, layout, slot)[valid_idx]
            rr = np.broadcast_to(row_base[:, :, None], (n, m, d))
            cc = np.broadcast_to(
                offsets[:, None, None] + np.arange(d)[None, None, :], (n, m, d)
            )
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            data.append(J.ravel())
        res_parts.append(r.ravel())
        n_rows += n * m

    _check_skipped(skipped, len(graph.factors))
    if n_rows == 0:
        return LinearSystem(np.zeros((layout.dim, layout.dim)), np.zeros(layout.dim), cost, skipped, len(graph.factors))

    J = scipy.sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, layout.dim),
    ).tocsr()
    e = np.concatenate(res_parts)
    H = (J.T @ J).toarray()
    H = 0.5 * (H + H.T)
    b = -(J.T @ e)
    return LinearSystem(H, np.asarray(b).ravel(), cost, skipped, len(graph.factors))


def _damped(H: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0.0:
        return H
    A = H.copy()
    diag = np.maximum(np.diag(H), DAMPING_FLOOR)
    A[np.diag_indices_from(A)] += lam * diag
    return A


def _cholesky_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise IndefiniteSystemError(str(e)) from e
    return scipy.linalg.cho_solve(factor, b)


def solve_normal(
    H: np.ndarray, b: np.ndarray, lam: float = 0.0, layout: Optional[BlockLayout] = None
) -> np.ndarray:
    """Solve (H + lam * diag(H)) dx = b.

    With a layout, landmark (inverse depth) coordinates are eliminated first
    through the Schur complement; they are scalar and mutually independent,
    so their block is diagonal.
    """
    A = _damped(np.asarray(H, dtype=float), lam)
    b = np.asarray(b, dtype=float)
    if layout is None:
        return _cholesky_solve(A, b)

    land = layout.eliminable_mask()
    if not land.any():
        return _cholesky_solve(A, b)
    A_ll = A[np.ix_(land, land)]
    d = np.diag(A_ll)
    if np.any(A_ll[~np.eye(d.size, dtype=bool)] != 0.0):
        logger.debug("Landmark block not diagonal, falling back to a dense solve")
        return _cholesky_solve(A, b)
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise IndefiniteSystemError("landmark block is not positive definite")

    pose = ~land
    A_pp = A[np.ix_(pose, pose)]
    A_pl = A[np.ix_(pose, land)]
    d_inv = 1.0 / d
    S = A_pp - (A_pl * d_inv[None, :]) @ A_pl.T
    rhs = b[pose] - A_pl @ (d_inv * b[land])
    dx = np.zeros_like(b)
    if S.size:
        dx[pose] = _cholesky_solve(0.5 * (S + S.T), rhs)
    dx[land] = d_inv * (b[land] - A_pl.T @ dx[pose])
    return dx


def apply_update(values: Values, layout: BlockLayout, delta: np.ndarray) -> Values:
    out = dict(values)
    for bid in layout:
        out[bid] = boxplus_state(values[bid], delta[layout.slice(bid)])
    return out


@dataclass
class SolverOptions:
    max_iters: int = 10
    lambda0: float = 1e-4
    cost_tol: float = 1e-6
    delta_tol: float = 1e-8
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    huber_px: float = 1.0


@dataclass
class OptimizationReport:
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    costs: List[float] = field(default_factory=list)
    converged: bool = False
    final_lambda: float = 0.0
    skipped_factors: int = 0

    @property
    def initial_cost(self) -> float:
        return self.costs[0] if self.costs else float("nan")

    @property
    def final_cost(self) -> float:
        return self.costs[-1] if self.costs else float("nan")


def optimize(
    graph: FactorGraph, values: Values, opts: Optional[SolverOptions] = None
) -> Tuple[Values, OptimizationReport]:
    """Levenberg-Marquardt on the graph; lambda0 = 0 gives plain Gauss-Newton.

    A step is accepted only if the true cost decreases and no additional
    factors fail to evaluate. report.costs holds the cost after every accepted
    step (first entry is the initial cost).
    """
    opts = opts or SolverOptions()
    graph.validate()
    layout = graph.layout
    report = OptimizationReport()
    lam = opts.lambda0

    system = linearize_graph(graph, values)
    cost = system.cost
    report.costs.append(cost)
    report.skipped_factors = system.skipped

    while report.iterations < opts.max_iters:
        report.iterations += 1
        try:
            delta = solve_normal(system.H, system.b, lam, layout)
        except IndefiniteSystemError as e:
            logger.debug("Damped system indefinite at lambda=%g: %s", lam, e)
            report.rejected += 1
            lam = lam * opts.lambda_up if lam > 0 else _LAMBDA_RESTART
            if lam > _LAMBDA_MAX:
                raise
            continue

        if np.max(np.abs(delta), initial=0.0) < opts.delta_tol:
            report.converged = True
            break

        candidate = apply_update(values, layout, delta)
        try:
            cand_cost, cand_skipped = graph_cost(graph, candidate)
        except LinearizationError:
            cand_cost, cand_skipped = np.inf, system.total

        if cand_cost < cost and cand_skipped <= system.skipped:
            rel = (cost - cand_cost) / max(cost, np.finfo(float).tiny)
            values = candidate
            cost = cand_cost
            report.accepted += 1
            report.costs.append(cost)
            lam *= opts.lambda_down
            if rel < opts.cost_tol:
                report.converged = True
                break
            system = linearize_graph(graph, values)
            report.skipped_factors = system.skipped
        else:
            report.rejected += 1
            lam = lam * opts.lambda_up if lam > 0 else _LAMBDA_RESTART
            if lam > _LAMBDA_MAX:
                logger.debug("Lambda exceeded %g, stopping", _LAMBDA_MAX)
                break

    report.final_lambda = lam
    logger.debug(
        "optimize: %d iterations, %d accepted, cost %.6g -> %.6g",
        report.iterations,
        report.accepted,
        report.initial_cost,
        report.final_cost,
    )
    return values, report


def marginalize(
    H: np.ndarray,
    b: np.ndarray,
    marg_block_ids: Sequence[BlockId],
    layout: BlockLayout,
    values: Values,
    first_estimates: bool = True,
) -> PriorFactor:
    """Schur-complement the marginalized blocks out of (H, b) into a prior.

    Retained blocks whose rows carry no information are left out of the
    prior.
    """
    marg = set(marg_block_ids)
    missing = marg.difference(layout)
    if missing:
        raise ValueError(f"marginalized blocks not in layout: {sorted(missing)}")
    retained = [bid for bid in layout if bid not in marg]
    m_idx = layout.indices([bid for bid in layout if bid in marg])
    r_idx = layout.indices(retained)

    H_mm = H[np.ix_(m_idx, m_idx)]
    H_rm = H[np.ix_(r_idx, m_idx)]
    H_rr = H[np.ix_(r_idx, r_idx)]
    b_m = b[m_idx]
    b_r = b[r_idx]

    w, V = _sym_eigh(H_mm)
    w_max = float(w.max()) if w.size else 0.0
    keep = w > MARGINAL_EIGEN_CLAMP * w_max if w_max > 0 else np.zeros_like(w, dtype=bool)
    dropped = int(w.size - np.count_nonzero(keep))
    if dropped:
        logger.warning(
            "Marginalization dropped %d of %d near-singular directions", dropped, w.size
        )
    H_mm_pinv = (V[:, keep] / w[keep][None, :]) @ V[:, keep].T

    H_p = H_rr - H_rm @ H_mm_pinv @ H_rm.T
    b_p = b_r - H_rm @ H_mm_pinv @ b_m
    H_p = 0.5 * (H_p + H_p.T)

    sub = BlockLayout((bid, layout.block_dim(bid)) for bid in retained)
    informed = [
        bid
        for bid in retained
        if np.any(H_p[sub.slice(bid)] != 0.0) or np.any(b_p[sub.slice(bid)] != 0.0)
    ]
    idx = sub.indices(informed)
    H_p = H_p[np.ix_(idx, idx)]
    b_p = b_p[idx]

    wp, Vp = _sym_eigh(H_p)
    if wp.size and wp.min() < 0.0:
        H_p = (Vp * np.maximum(wp, 0.0)[None, :]) @ Vp.T
        H_p = 0.5 * (H_p + H_p.T)
    return PriorFactor(
        informed,
        H_p,
        b_p,
        {bid: values[bid] for bid in informed},
        first_estimates=first_estimates,
    )
