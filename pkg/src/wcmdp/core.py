"""Factored weakly coupled MDP model.

A weakly coupled MDP is made of N subproblems that evolve independently
given their own actions, share one exogenous state w, and are linked only
through per-step action constraints

    sum_i d(s_i, a_i) <= b(w)        (componentwise, L constraints)

All spaces are finite and index-based. A full state is (x_1..x_N, w); the
state of subproblem i is (x_i, w). Rewards are additive across
subproblems and stored per subproblem so that subagents and the main
agent can consume different views of the same experience tuple.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_KERNEL_TOL = 1e-12


class WcmdpError(Exception):
    """Base class for model-level errors."""


class InfeasibleActionError(WcmdpError):
    """Raised when a step is attempted with an action outside A(s)."""


class InfeasibleStateError(WcmdpError):
    """Raised when a state with an empty feasible action set is hit by a
    solver that needs a nonempty max."""


class ConvergenceError(WcmdpError):
    """Raised when an iterative solver hits its iteration cap.

    Carries the last observed residual in ``residual``.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _check_kernel(name: str, rows: np.ndarray) -> None:
    if np.any(rows < 0):
        raise ValueError(f"{name}: negative probability entries")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _KERNEL_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{name}: rows must sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True)
class WcmdpSpec:
    """Complete factored model of a weakly coupled MDP.

    Attributes:
        n_subproblems: number of subproblems N.
        n_constraints: number of linking constraints L.
        endo_space_sizes: |X_i| per subproblem.
        action_space_sizes: |A_i| per subproblem.
        exo_space_size: |W|.
        endo_kernels: per-subproblem arrays p_i with shape (|X_i|, |A_i|, |X_i|),
            p_i[x, a, x'] = P(x' | x, a).
        exo_kernel: array q with shape (|W|, |W|), q[w, w'] = P(w' | w).
        rewards: per-subproblem arrays r_i with shape (|X_i|, |W|, |A_i|).
        constraint_lhs: per-subproblem arrays d_i, shape (|X_i|, |W|, |A_i|, L).
        constraint_rhs: array b with shape (|W|, L).
        discount: gamma in [0, 1).
    """

    n_subproblems: int
    n_constraints: int
    endo_space_sizes: tuple[int, ...]
    action_space_sizes: tuple[int, ...]
    exo_space_size: int
    endo_kernels: tuple[np.ndarray, ...]
    exo_kernel: np.ndarray
    rewards: tuple[np.ndarray, ...]
    constraint_lhs: tuple[np.ndarray, ...]
    constraint_rhs: np.ndarray
    discount: float

    def __post_init__(self):
        n = self.n_subproblems
        if n < 1:
            raise ValueError("need at least one subproblem")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError("discount must lie in [0, 1)")
        if len(self.endo_space_sizes) != n or len(self.action_space_sizes) != n:
            raise ValueError("space size tuples must have length N")
        if len(self.endo_kernels) != n or len(self.rewards) != n:
            raise ValueError("per-subproblem arrays must have length N")
        if len(self.constraint_lhs) != n:
            raise ValueError("constraint_lhs must have length N")
        w = self.exo_space_size
        big_l = self.n_constraints
        if self.exo_kernel.shape != (w, w):
            raise ValueError("exo_kernel shape mismatch")
        if self.constraint_rhs.shape != (w, big_l):
            raise ValueError("constraint_rhs must have shape (|W|, L)")
        for i in range(n):
            xi, ai = self.endo_space_sizes[i], self.action_space_sizes[i]
            if self.endo_kernels[i].shape != (xi, ai, xi):
                raise ValueError(f"endo_kernels[{i}] shape mismatch")
            if self.rewards[i].shape != (xi, w, ai):
                raise ValueError(f"rewards[{i}] shape mismatch")
            if self.constraint_lhs[i].shape != (xi, w, ai, big_l):
                raise ValueError(f"constraint_lhs[{i}] shape mismatch")
            _check_kernel(f"endo_kernels[{i}]", self.endo_kernels[i])
        _check_kernel("exo_kernel", self.exo_kernel)
        # Freeze the arrays: the spec is shared across concurrent runs.
        for arr in (*self.endo_kernels, self.exo_kernel, *self.rewards,
                    *self.constraint_lhs, self.constraint_rhs):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.exo_space_size * int(np.prod(self.endo_space_sizes))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_space_sizes))


@dataclass(frozen=True)
class FullState:
    """Full state s = (x, w): per-subproblem endogenous indices plus the
    shared exogenous index."""

    endo: tuple[int, ...]
    exo: int


@dataclass(frozen=True)
class FactoredAction:
    """Joint action a = (a_1, ..., a_N)."""

    parts: tuple[int, ...]


@dataclass(frozen=True)
class Transition:
    """One experience tuple for the entire WCMDP.

    ``rewards`` holds the per-subproblem rewards r_i (length N) and
    ``rhs`` the constraint right-hand side b(w) of the originating state.
    """

    state: FullState
    action: FactoredAction
    rewards: np.ndarray
    rhs: np.ndarray
    next_state: FullState


@dataclass(frozen=True)
class SubTransition:
    """The slice of a Transition relevant to one subproblem.

    ``lhs`` carries d(s_i, a_i) so subagents can form the lambda^T d
    penalty without touching the spec again.
    """

    sub_state: tuple[int, int]
    sub_action: int
    reward: float
    lhs: np.ndarray
    next_sub_state: tuple[int, int]


def validate_state(spec: WcmdpSpec, state: FullState) -> None:
    if len(state.endo) != spec.n_subproblems:
        raise ValueError("state has wrong number of endogenous components")
    for i, x in enumerate(state.endo):
        if not 0 <= x < spec.endo_space_sizes[i]:
            raise IndexError(f"endo component {i} out of range: {x}")
    if not 0 <= state.exo < spec.exo_space_size:
        raise IndexError(f"exo component out of range: {state.exo}")


def state_index(spec: WcmdpSpec, state: FullState) -> int:
    """Mixed-radix encoding with w as the most significant digit, then
    x_1 ... x_N."""
    validate_state(spec, state)
    idx = state.exo
    for i, x in enumerate(state.endo):
        idx = idx * spec.endo_space_sizes[i] + x
    return idx


def index_state(spec: WcmdpSpec, idx: int) -> FullState:
    """Inverse of :func:`state_index`."""
    if not 0 <= idx < spec.n_states:
        raise IndexError(f"state index out of range: {idx}")
    endo = [0] * spec.n_subproblems
    for i in range(spec.n_subproblems - 1, -1, -1):
        idx, endo[i] = divmod(idx, spec.endo_space_sizes[i])
    return FullState(endo=tuple(endo), exo=idx)


def action_index(spec: WcmdpSpec, action: FactoredAction) -> int:
    """Lexicographic index of a joint action (a_1 most significant)."""
    idx = 0
    for i, a in enumerate(action.parts):
        if not 0 <= a < spec.action_space_sizes[i]:
            raise IndexError(f"action component {i} out of range: {a}")
        idx = idx * spec.action_space_sizes[i] + a
    return idx


def all_action_tuples(spec: WcmdpSpec) -> np.ndarray:
    """All joint actions in lexicographic order, shape (n_actions, N)."""
    parts = [range(k) for k in spec.action_space_sizes]
    return np.array(list(itertools.product(*parts)), dtype=np.int64)


def constraint_total(spec: WcmdpSpec, state: FullState,
                     action: FactoredAction) -> np.ndarray:
    """sum_i d(s_i, a_i) for a single (state, action) pair."""
    total = np.zeros(spec.n_constraints)
    for i, (x, a) in enumerate(zip(state.endo, action.parts)):
        total += spec.constraint_lhs[i][x, state.exo, a]
    return total


def is_feasible(spec: WcmdpSpec, state: FullState,
                action: FactoredAction) -> bool:
    total = constraint_total(spec, state, action)
    return bool(np.all(total <= spec.constraint_rhs[state.exo]))


def feasible_actions(spec: WcmdpSpec, state: FullState) -> list[FactoredAction]:
    """Enumerate A(s) in lexicographic order of the action parts.

    An empty list means the instance is genuinely infeasible at this
    state; callers that need a nonempty max must treat that as an error.
    """
    validate_state(spec, state)
    rhs = spec.constraint_rhs[state.exo]
    out = []
    for parts in itertools.product(*(range(k) for k in spec.action_space_sizes)):
        total = np.zeros(spec.n_constraints)
        for i, a in enumerate(parts):
            total += spec.constraint_lhs[i][state.endo[i], state.exo, a]
        if np.all(total <= rhs):
            out.append(FactoredAction(parts=parts))
    return out


class SpecCache:
    """Precomputed lookup structures for one spec.

    Builds cumulative kernels for fast sampling and (lazily) the dense
    feasibility mask over (state index, action index). The cache is
    read-only after construction and safe to share across runs.
    """

    def __init__(self, spec: WcmdpSpec):
        self.spec = spec
        self.action_tuples = all_action_tuples(spec)
        self.endo_cdfs = tuple(np.cumsum(k, axis=-1) for k in spec.endo_kernels)
        self.exo_cdf = np.cumsum(spec.exo_kernel, axis=-1)
        for cdf in (*self.endo_cdfs, self.exo_cdf):
            cdf[..., -1] = 1.0
            cdf.setflags(write=False)
        # state index strides: idx = w*prod(X) + sum x_i * stride_i
        strides = [1] * spec.n_subproblems
        for i in range(spec.n_subproblems - 2, -1, -1):
            strides[i] = strides[i + 1] * spec.endo_space_sizes[i + 1]
        self.endo_strides = np.array(strides, dtype=np.int64)
        self.exo_stride = int(np.prod(spec.endo_space_sizes))
        self._mask: np.ndarray | None = None

    def state_idx(self, state: FullState) -> int:
        return int(state.exo * self.exo_stride
                   + int(np.dot(self.endo_strides, state.endo)))

    def action_idx(self, action: FactoredAction) -> int:
        return action_index(self.spec, action)

    @property
    def feasibility_mask(self) -> np.ndarray:
        """Boolean array (n_states, n_actions); built on first access."""
        if self._mask is None:
            self._mask = self._build_mask()
        return self._mask

    def _build_mask(self) -> np.ndarray:
        spec = self.spec
        shape = (spec.exo_space_size, *spec.endo_space_sizes)
        n = spec.n_subproblems
        mask = np.empty((spec.n_states, spec.n_actions), dtype=bool)
        for j, parts in enumerate(self.action_tuples):
            ok = np.ones(shape, dtype=bool)
            for ell in range(spec.n_constraints):
                total = np.zeros(shape)
                for i in range(n):
                    d = spec.constraint_lhs[i][:, :, parts[i], ell].T  # (W, X_i)
                    view = [1] * (n + 1)
                    view[0] = spec.exo_space_size
                    view[i + 1] = spec.endo_space_sizes[i]
                    total += d.reshape(view)
                rhs = spec.constraint_rhs[:, ell].reshape([-1] + [1] * n)
                ok &= total <= rhs
            mask[:, j] = ok.reshape(-1)
        return mask

    def feasible_indices(self, state_idx: int) -> np.ndarray:
        return np.flatnonzero(self.feasibility_mask[state_idx])


def sample_step(spec: WcmdpSpec, state: FullState, action: FactoredAction,
                rng: np.random.Generator,
                cache: SpecCache | None = None) -> Transition:
    """Sample one environment transition.

    Endogenous parts are drawn independently from p_i(.|x_i, a_i), the
    exogenous part from q(.|w). ``rhs`` records b(w) of the CURRENT
    state. Raises InfeasibleActionError for actions outside A(s).
    """
    if not is_feasible(spec, state, action):
        raise InfeasibleActionError(
            f"infeasible action {action.parts} at state {state}")
    if cache is None:
        cache = SpecCache(spec)
    next_endo = []
    rewards = np.empty(spec.n_subproblems)
    w = state.exo
    for i, (x, a) in enumerate(zip(state.endo, action.parts)):
        u = rng.random()
        next_endo.append(int(np.searchsorted(cache.endo_cdfs[i][x, a], u,
                                             side="right")))
        rewards[i] = spec.rewards[i][x, w, a]
    u = rng.random()
    next_w = int(np.searchsorted(cache.exo_cdf[w], u, side="right"))
    return Transition(
        state=state,
        action=action,
        rewards=rewards,
        rhs=np.array(spec.constraint_rhs[w]),
        next_state=FullState(endo=tuple(next_endo), exo=next_w),
    )


def split_transition(spec: WcmdpSpec, tau: Transition) -> list[SubTransition]:
    """Split a full experience tuple into its per-subproblem slices.

    All slices share the same w and w'. Reassembling the endo parts of
    the slices reproduces the full transition.
    """
    w, w_next = tau.state.exo, tau.next_state.exo
    out = []
    for i in range(spec.n_subproblems):
        x, a = tau.state.endo[i], tau.action.parts[i]
        out.append(SubTransition(
            sub_state=(x, w),
            sub_action=a,
            reward=float(tau.rewards[i]),
            lhs=np.array(spec.constraint_lhs[i][x, w, a]),
            next_sub_state=(tau.next_state.endo[i], w_next),
        ))
    return out


def sub_state_index(spec: WcmdpSpec, i: int, x: int, w: int) -> int:
    """Index of subproblem state (x_i, w); w is the most significant digit."""
    return w * spec.endo_space_sizes[i] + x


def n_sub_states(spec: WcmdpSpec, i: int) -> int:
    return spec.exo_space_size * spec.endo_space_sizes[i]
