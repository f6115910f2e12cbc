"""Ground-truth solvers.

Value iteration on the full joint problem, exact per-subproblem solves of
the penalized recursions, the discounted right-hand-side accumulator
B(w), and assembly of the Lagrangian upper bound

    Q_lam(s, a) = lam^T B(w) + sum_i Q_i_lam(s_i, a_i)

These are oracles for desk-scale instances, not production solvers:
joint-space routines refuse instances above 10^6 (state, action) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from wcmdp.core import (
    ConvergenceError,
    InfeasibleStateError,
    SpecCache,
    WcmdpSpec,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 100_000
_JOINT_SIZE_CAP = 1_000_000


@dataclass
class QTable:
    """Dense action-value table indexed by (state index, action index).

    State indices follow :func:`wcmdp.core.state_index` (w most
    significant); action indices are lexicographic in the action parts.
    """

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("QTable values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("QTable values must be finite")

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]


@dataclass
class LambdaGrid:
    """Finite ordered set of nonnegative multiplier vectors (length L each)."""

    multipliers: np.ndarray  # (n_lambda, L)

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.multipliers, dtype=float))
        if m.size == 0:
            raise ValueError("lambda grid must be nonempty")
        if np.any(m < 0):
            raise ValueError("multipliers must be nonnegative")
        if len({tuple(row) for row in m}) != m.shape[0]:
            raise ValueError("lambda grid contains duplicates")
        self.multipliers = m

    def __len__(self) -> int:
        return self.multipliers.shape[0]

    def __iter__(self):
        return iter(self.multipliers)


def default_lambda_grid(n_constraints: int, max_value: float = 10.0,
                        points: int = 41) -> LambdaGrid:
    """Scalar grid {0, max/(points-1), ..., max} broadcast across all L
    components (lambda = lambda' * 1)."""
    scalars = np.linspace(0.0, max_value, points)
    return LambdaGrid(np.repeat(scalars[:, None], n_constraints, axis=1))


class ViResult(NamedTuple):
    q: QTable
    v: np.ndarray
    residuals: list[float]
    iterations: int


def _check_joint_size(spec: WcmdpSpec) -> None:
    if spec.n_states * spec.n_actions > _JOINT_SIZE_CAP:
        raise ValueError(
            f"joint instance too large for the exact module: "
            f"{spec.n_states * spec.n_actions} pairs (cap {_JOINT_SIZE_CAP})")


def _expected_next(spec: WcmdpSpec, v_tensor: np.ndarray,
                   parts: Sequence[int]) -> np.ndarray:
    """E[V(s') | s, a] for one joint action, as a (W, X_1..X_N) tensor.

    v_tensor has axes (w', x'_1, ..., x'_N); each tensordot contracts the
    current leading endo axis against p_i(x_i, a_i, x'_i) and appends the
    x_i axis at the end, so after N steps the axes are (w', x_1..x_N).
    """
    t = v_tensor
    for i, a in enumerate(parts):
        t = np.tensordot(t, spec.endo_kernels[i][:, a, :], axes=([1], [1]))
    return np.tensordot(spec.exo_kernel, t, axes=([1], [0]))


def _reward_matrix(spec: WcmdpSpec, cache: SpecCache) -> np.ndarray:
    """Total reward sum_i r_i as an (n_states, n_actions) matrix."""
    shape = (spec.exo_space_size, *spec.endo_space_sizes)
    n = spec.n_subproblems
    out = np.empty((spec.n_states, spec.n_actions))
    for j, parts in enumerate(cache.action_tuples):
        total = np.zeros(shape)
        for i in range(n):
            r = spec.rewards[i][:, :, parts[i]].T  # (W, X_i)
            view = [1] * (n + 1)
            view[0] = spec.exo_space_size
            view[i + 1] = spec.endo_space_sizes[i]
            total += r.reshape(view)
        out[:, j] = total.reshape(-1)
    return out


def _penalty_matrix(spec: WcmdpSpec, cache: SpecCache,
                    lam: np.ndarray) -> np.ndarray:
    """lam^T [b(w) - sum_i d(s_i, a_i)] as an (n_states, n_actions) matrix."""
    lam = np.asarray(lam, dtype=float).reshape(spec.n_constraints)
    shape = (spec.exo_space_size, *spec.endo_space_sizes)
    n = spec.n_subproblems
    base = (spec.constraint_rhs @ lam).reshape([-1] + [1] * n)
    out = np.empty((spec.n_states, spec.n_actions))
    for j, parts in enumerate(cache.action_tuples):
        total = np.broadcast_to(base, shape).copy()
        for i in range(n):
            d = spec.constraint_lhs[i][:, :, parts[i], :] @ lam  # (X_i, W)
            view = [1] * (n + 1)
            view[0] = spec.exo_space_size
            view[i + 1] = spec.endo_space_sizes[i]
            total -= d.T.reshape(view)
        out[:, j] = total.reshape(-1)
    return out


def _vi_loop(spec: WcmdpSpec, cache: SpecCache, r_sa: np.ndarray,
             mask: np.ndarray | None, tol: float,
             max_iters: int) -> ViResult:
    tensor_shape = (spec.exo_space_size, *spec.endo_space_sizes)
    gamma = spec.discount
    v = np.zeros(spec.n_states)
    q = np.empty_like(r_sa)
    residuals: list[float] = []
    for it in range(1, max_iters + 1):
        v_tensor = v.reshape(tensor_shape)
        for j, parts in enumerate(cache.action_tuples):
            q[:, j] = gamma * _expected_next(spec, v_tensor, parts).reshape(-1)
        q += r_sa
        if mask is None:
            v_new = q.max(axis=1)
        else:
            v_new = np.where(mask, q, -np.inf).max(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        residuals.append(residual)
        v = v_new
        if residual <= tol:
            return ViResult(QTable(q.copy()), v, residuals, it)
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} in {max_iters} iterations "
        f"(last residual {residuals[-1]:.3e})", residuals[-1])


def value_iteration(spec: WcmdpSpec, tol: float = DEFAULT_TOL,
                    max_iters: int = DEFAULT_MAX_ITERS,
                    cache: SpecCache | None = None) -> ViResult:
    """Solve the full constrained problem: the Bellman max runs over the
    feasible set A(s') only. Raises InfeasibleStateError if any state has
    an empty feasible set."""
    _check_joint_size(spec)
    cache = cache or SpecCache(spec)
    mask = cache.feasibility_mask
    bad = np.flatnonzero(~mask.any(axis=1))
    if bad.size:
        raise InfeasibleStateError(
            f"{bad.size} states have an empty feasible action set "
            f"(first: index {int(bad[0])})")
    r_sa = _reward_matrix(spec, cache)
    return _vi_loop(spec, cache, r_sa, mask, tol, max_iters)


def value_iteration_relaxed(spec: WcmdpSpec, lam: np.ndarray,
                            tol: float = DEFAULT_TOL,
                            max_iters: int = DEFAULT_MAX_ITERS,
                            cache: SpecCache | None = None) -> ViResult:
    """Solve the Lagrangian-relaxed joint problem directly: reward is
    augmented by lam^T (b - sum d) and the max is unconstrained. This is
    the independent oracle for the decomposition identity."""
    _check_joint_size(spec)
    cache = cache or SpecCache(spec)
    r_sa = _reward_matrix(spec, cache) + _penalty_matrix(spec, cache, lam)
    return _vi_loop(spec, cache, r_sa, None, tol, max_iters)


def solve_subproblem_exact(spec: WcmdpSpec, i: int, lam: np.ndarray,
                           tol: float = DEFAULT_TOL,
                           max_iters: int = DEFAULT_MAX_ITERS) -> QTable:
    """Fixed point of the subproblem recursion with reward r_i - lam^T d
    and an unconstrained max over A_i. States indexed by (w, x_i) with w
    most significant."""
    lam = np.asarray(lam, dtype=float).reshape(spec.n_constraints)
    if np.any(lam < 0):
        raise ValueError("multiplier must be nonnegative")
    n_x = spec.endo_space_sizes[i]
    n_a = spec.action_space_sizes[i]
    n_w = spec.exo_space_size
    gamma = spec.discount
    # reward (W, X, A)
    r = np.transpose(spec.rewards[i] - spec.constraint_lhs[i] @ lam, (1, 0, 2))
    q_exo = spec.exo_kernel
    v = np.zeros((n_w, n_x))
    q = np.empty((n_w, n_x, n_a))
    residual = np.inf
    for _ in range(max_iters):
        for a in range(n_a):
            # E[V(w', x') | x, a, w] = q_exo @ (V @ p_i[:, a, :]^T)
            q[:, :, a] = r[:, :, a] + gamma * (
                q_exo @ (v @ spec.endo_kernels[i][:, a, :].T))
        v_new = q.max(axis=2)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual <= tol:
            return QTable(q.reshape(n_w * n_x, n_a).copy())
    raise ConvergenceError(
        f"subproblem {i} value iteration did not converge "
        f"(last residual {residual:.3e})", residual)


def exact_B(spec: WcmdpSpec, tol: float = DEFAULT_TOL,
            max_iters: int = DEFAULT_MAX_ITERS) -> np.ndarray:
    """Solve B(w) = b(w) + gamma E[B(w')] by fixed-point iteration.

    Returns an array of shape (|W|, L). The map is a gamma-contraction,
    so convergence is guaranteed.
    """
    b = spec.constraint_rhs
    gamma = spec.discount
    big_b = np.zeros_like(b)
    for _ in range(max_iters):
        new = b + gamma * spec.exo_kernel @ big_b
        residual = float(np.max(np.abs(new - big_b)))
        big_b = new
        if residual <= tol:
            return big_b
    raise ConvergenceError("B(w) iteration did not converge", residual)


def assemble_lagrangian(spec: WcmdpSpec, lam: np.ndarray, big_b: np.ndarray,
                        subproblem_tables: Sequence[QTable],
                        cache: SpecCache | None = None) -> QTable:
    """Assemble Q_lam(s, a) = lam^T B(w) + sum_i Q_i_lam(s_i, a_i) over
    every joint (s, a), including infeasible actions."""
    lam = np.asarray(lam, dtype=float).reshape(spec.n_constraints)
    n = spec.n_subproblems
    if len(subproblem_tables) != n:
        raise ValueError("need one subproblem table per subproblem")
    n_w = spec.exo_space_size
    shape = (n_w, *spec.endo_space_sizes, *spec.action_space_sizes)
    total = np.zeros(shape)
    base = big_b @ lam  # (W,)
    total += base.reshape([n_w] + [1] * (2 * n))
    for i, table in enumerate(subproblem_tables):
        n_x = spec.endo_space_sizes[i]
        n_a = spec.action_space_sizes[i]
        if table.values.shape != (n_w * n_x, n_a):
            raise ValueError(f"subproblem table {i} has wrong shape")
        view = [1] * (2 * n + 1)
        view[0] = n_w
        view[i + 1] = n_x
        view[n + i + 1] = n_a
        total += table.values.reshape(n_w, n_x, n_a).reshape(view)
    return QTable(total.reshape(spec.n_states, spec.n_actions))


def dual_over_grid(tables: Sequence[QTable]) -> tuple[QTable, np.ndarray]:
    """Pointwise minimum over assembled tables (one per multiplier in grid
    order); ties resolve to the first index."""
    if not tables:
        raise ValueError("lambda grid must be nonempty")
    stack = np.stack([t.values for t in tables])
    argmin = np.argmin(stack, axis=0)
    return QTable(stack.min(axis=0)), argmin


def lagrangian_bound(spec: WcmdpSpec, grid: LambdaGrid,
                     tol: float = DEFAULT_TOL,
                     cache: SpecCache | None = None
                     ) -> tuple[QTable, np.ndarray, list[QTable]]:
    """Exact Lagrangian dual bound over a multiplier grid.

    Solves every subproblem for every multiplier, assembles each
    Q_lam, and returns (min table, argmin indices, per-lambda tables).
    """
    big_b = exact_B(spec, tol)
    assembled = []
    for lam in grid:
        subs = [solve_subproblem_exact(spec, i, lam, tol)
                for i in range(spec.n_subproblems)]
        assembled.append(assemble_lagrangian(spec, lam, big_b, subs, cache))
    best, argmin = dual_over_grid(assembled)
    return best, argmin, assembled
