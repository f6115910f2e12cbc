"""Tabular agents.

Q-learning, Double Q-learning, a Lagrange-policy baseline, and weakly
coupled Q-learning (WCQL). WCQL maintains one Q-learning subagent per
(subproblem, multiplier) pair, a stochastic-approximation estimate of
the discounted right-hand side B(w), and projects its main Q estimate
onto the assembled Lagrangian upper bound at every visited pair.

One agent instance is single-owner mutable state; cross-run parallelism
is handled by the harness with disjoint agents and RNG streams.
Tie-breaking everywhere is the first maximizer in lexicographic action
order, so identical seeds give bit-identical learning traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wcmdp.core import (
    FactoredAction,
    FullState,
    InfeasibleStateError,
    SpecCache,
    SubTransition,
    Transition,
    WcmdpSpec,
    split_transition,
    sub_state_index,
)
from wcmdp.exact import LambdaGrid, QTable

PROJECTION_TOL = 1e-12


def _init_scale(spec: WcmdpSpec, subproblem: int | None = None) -> float:
    """Upper end of the random Q-table initialization range.

    Tables start at the optimistic scale r_max / (1 - gamma) so that
    initial values dominate any reachable return; WCQL's bound
    projection then replaces the optimism with bound information at
    visited pairs, while plain QL has to unlearn it by sampling.
    """
    if subproblem is None:
        r_max = sum(float(r.max()) for r in spec.rewards)
    else:
        r_max = float(spec.rewards[subproblem].max())
    return max(r_max, 0.0) / (1.0 - spec.discount)


@dataclass
class StepSchedule:
    """Learning-rate schedule keyed by per-entry visit counts.

    kind "polynomial-visit" emits 1/nu^exponent; "constant" emits a fixed
    rate. The default exponent 0.4 follows the experimental setting, not
    the square-summability condition of the convergence analysis (which
    would need exponent in (0.5, 1]).
    """

    kind: str = "polynomial-visit"
    exponent: float = 0.4
    constant: float = 0.1

    def __post_init__(self):
        if self.kind not in ("polynomial-visit", "constant"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if self.kind == "constant" and not 0.0 <= self.constant <= 1.0:
            raise ValueError("constant rate must lie in [0, 1]")

    def rate(self, visits: int) -> float:
        if self.kind == "constant":
            return self.constant
        return float(visits) ** (-self.exponent)


class SubagentBank:
    """Tabular Q-estimates for every (subproblem, multiplier) pair.

    tables[i] has shape (|Lambda|, |S_i|, |A_i|) with subproblem states
    indexed (w, x_i). All multipliers for a given subproblem are updated
    from the same experience slice, so the visit counters are shared
    across the lambda axis.
    """

    def __init__(self, spec: WcmdpSpec, grid: LambdaGrid,
                 init_rng: np.random.Generator):
        self.spec = spec
        self.grid = grid
        k = len(grid)
        self.tables = []
        self.counts = []
        self.penalties = []  # lam^T d precomputed, (X_i, W, A_i, K)
        for i in range(spec.n_subproblems):
            n_s = spec.exo_space_size * spec.endo_space_sizes[i]
            n_a = spec.action_space_sizes[i]
            scale = _init_scale(spec, i)
            self.tables.append(
                init_rng.uniform(0.0, scale, size=(k, n_s, n_a)))
            self.counts.append(np.zeros((n_s, n_a), dtype=np.int64))
            self.penalties.append(spec.constraint_lhs[i] @ grid.multipliers.T)

    def table_for(self, i: int, lam_index: int) -> QTable:
        return QTable(self.tables[i][lam_index].copy())


class BTable:
    """Stochastic-approximation estimate of B(w) = b(w) + gamma E[B(w')]."""

    def __init__(self, spec: WcmdpSpec):
        self.estimates = np.zeros((spec.exo_space_size, spec.n_constraints))
        self.counts = np.zeros(spec.exo_space_size, dtype=np.int64)


# ---------------------------------------------------------------------------
# Update rules (free functions; the agent classes below compose them).


def _feasible_max(q_row: np.ndarray, feas_idx: np.ndarray) -> float:
    if feas_idx.size == 0:
        raise InfeasibleStateError("empty feasible action set at next state")
    return float(q_row[feas_idx].max())


def ql_update(q: np.ndarray, visits: np.ndarray, tau: Transition,
              schedule: StepSchedule, spec: WcmdpSpec,
              cache: SpecCache) -> float:
    """Standard Q-learning update with the target max restricted to the
    feasible set at the next state. Returns the new Q(s, a)."""
    s = cache.state_idx(tau.state)
    a = cache.action_idx(tau.action)
    s2 = cache.state_idx(tau.next_state)
    visits[s, a] += 1
    alpha = schedule.rate(visits[s, a])
    target = (tau.rewards.sum()
              + spec.discount * _feasible_max(q[s2], cache.feasible_indices(s2)))
    q[s, a] += alpha * (target - q[s, a])
    return float(q[s, a])


def double_ql_update(table_a: np.ndarray, table_b: np.ndarray,
                     visits_a: np.ndarray, visits_b: np.ndarray,
                     tau: Transition, schedule: StepSchedule,
                     rng: np.random.Generator, spec: WcmdpSpec,
                     cache: SpecCache) -> None:
    """Double Q-learning: a coin flip selects which table is updated; the
    updated table selects the next action, the other one evaluates it."""
    s = cache.state_idx(tau.state)
    a = cache.action_idx(tau.action)
    s2 = cache.state_idx(tau.next_state)
    feas = cache.feasible_indices(s2)
    if feas.size == 0:
        raise InfeasibleStateError("empty feasible action set at next state")
    r = tau.rewards.sum()
    if rng.random() < 0.5:
        upd, other, visits = table_a, table_b, visits_a
    else:
        upd, other, visits = table_b, table_a, visits_b
    best = feas[int(np.argmax(upd[s2, feas]))]
    visits[s, a] += 1
    alpha = schedule.rate(visits[s, a])
    target = r + spec.discount * other[s2, best]
    upd[s, a] += alpha * (target - upd[s, a])


def subagent_update(bank: SubagentBank, subs: list[SubTransition],
                    schedule: StepSchedule, spec: WcmdpSpec) -> None:
    """Update every (subproblem, multiplier) table from one shared
    experience tuple. The inner max is unconstrained over A_i."""
    gamma = spec.discount
    for i, st in enumerate(subs):
        x, w = st.sub_state
        x2, w2 = st.next_sub_state
        s1 = sub_state_index(spec, i, x, w)
        s2 = sub_state_index(spec, i, x2, w2)
        a = st.sub_action
        q = bank.tables[i]
        bank.counts[i][s1, a] += 1
        beta = schedule.rate(bank.counts[i][s1, a])
        target = (st.reward - bank.penalties[i][x, w, a]
                  + gamma * q[:, s2, :].max(axis=1))
        q[:, s1, a] += beta * (target - q[:, s1, a])


def b_update(b_table: BTable, w: int, b_vec: np.ndarray, w_next: int,
             gamma: float, schedule: StepSchedule) -> None:
    """One stochastic-approximation step on B(w)."""
    b_table.counts[w] += 1
    eta = schedule.rate(b_table.counts[w])
    est = b_table.estimates
    est[w] += eta * (b_vec + gamma * est[w_next] - est[w])


def _bound_vector(bank: SubagentBank, b_table: BTable, endo: tuple[int, ...],
                  w: int, parts: tuple[int, ...],
                  spec: WcmdpSpec) -> np.ndarray:
    """Per-multiplier bound values lam^T B(w) + sum_i Q_i_lam(s_i, a_i)."""
    vals = bank.grid.multipliers @ b_table.estimates[w]
    for i in range(spec.n_subproblems):
        s_i = sub_state_index(spec, i, endo[i], w)
        vals = vals + bank.tables[i][:, s_i, parts[i]]
    return vals


def _bound_rows(bank: SubagentBank, b_table: BTable, state: FullState,
                tuples: np.ndarray, spec: WcmdpSpec) -> np.ndarray:
    """Assembled bound at one state for a batch of action tuples.

    tuples has shape (F, N); the result has shape (F,)."""
    vals = (bank.grid.multipliers @ b_table.estimates[state.exo])[:, None]
    for i in range(spec.n_subproblems):
        s_i = sub_state_index(spec, i, state.endo[i], state.exo)
        vals = vals + bank.tables[i][:, s_i, tuples[:, i]]
    return vals.min(axis=0)


def bound_at(bank: SubagentBank, b_table: BTable, state: FullState,
             action: FactoredAction, spec: WcmdpSpec) -> float:
    """Current assembled Lagrangian upper bound at one (s, a):
    min over the grid of lam^T B_n(w) + sum_i Q_i_lam_n(s_i, a_i)."""
    return float(_bound_vector(bank, b_table, state.endo, state.exo,
                               action.parts, spec).min())


def bound_table(bank: SubagentBank, b_table: BTable,
                spec: WcmdpSpec) -> np.ndarray:
    """Assembled bound at every joint (s, a); used by the full-sweep
    projection ablation and by diagnostics."""
    n = spec.n_subproblems
    n_w = spec.exo_space_size
    k = len(bank.grid)
    shape = (k, n_w, *spec.endo_space_sizes, *spec.action_space_sizes)
    total = np.zeros(shape)
    lam_b = bank.grid.multipliers @ b_table.estimates.T  # (K, W)
    total += lam_b.reshape([k, n_w] + [1] * (2 * n))
    for i in range(n):
        n_x = spec.endo_space_sizes[i]
        n_a = spec.action_space_sizes[i]
        view = [1] * (2 * n + 2)
        view[0] = k
        view[1] = n_w
        view[i + 2] = n_x
        view[n + i + 2] = n_a
        total += bank.tables[i].reshape(k, n_w, n_x, n_a).reshape(view)
    return total.min(axis=0).reshape(spec.n_states, spec.n_actions)


def lagrange_policy_action(bank: SubagentBank, b_table: BTable,
                           grid: LambdaGrid, state: FullState,
                           spec: WcmdpSpec, cache: SpecCache,
                           lam_index: int | None = None) -> FactoredAction:
    """Greedy action of the Lagrange policy.

    When lam_index is None, the multiplier is the grid element minimizing
    the assembled state-value bound at s; the action is the feasible
    argmax of sum_i Q_i_lam(s_i, a_i), first maximizer on ties.
    """
    s_idx = cache.state_idx(state)
    feas = cache.feasible_indices(s_idx)
    if feas.size == 0:
        raise InfeasibleStateError("empty feasible action set")
    w = state.exo
    if lam_index is None:
        vals = grid.multipliers @ b_table.estimates[w]  # (K,)
        for i in range(spec.n_subproblems):
            s_i = sub_state_index(spec, i, state.endo[i], w)
            vals = vals + bank.tables[i][:, s_i, :].max(axis=1)
        lam_index = int(np.argmin(vals))
    tuples = cache.action_tuples[feas]  # (F, N)
    totals = np.zeros(len(feas))
    for i in range(spec.n_subproblems):
        s_i = sub_state_index(spec, i, state.endo[i], w)
        totals += bank.tables[i][lam_index, s_i, tuples[:, i]]
    return FactoredAction(parts=tuple(int(v) for v in tuples[np.argmax(totals)]))


# ---------------------------------------------------------------------------
# Agents. All share the select_action(state, rng) / update(tau) /
# value_estimate() interface consumed by the harness.


class _EpsilonGreedyMixin:
    """Visit-count epsilon schedule eps(s) = 1/nu(s)^e over feasible actions."""

    def _greedy_table(self) -> np.ndarray:
        raise NotImplementedError

    def epsilon_greedy(self, state: FullState,
                       rng: np.random.Generator) -> FactoredAction:
        cache: SpecCache = self.cache
        s_idx = cache.state_idx(state)
        feas = cache.feasible_indices(s_idx)
        if feas.size == 0:
            raise InfeasibleStateError("empty feasible action set")
        self.state_visits[s_idx] += 1
        eps = float(self.state_visits[s_idx]) ** (-self.explore_exponent)
        if rng.random() < eps:
            j = int(feas[rng.integers(feas.size)])
        else:
            row = self._greedy_table()[s_idx]
            j = int(feas[int(np.argmax(row[feas]))])
        return FactoredAction(parts=tuple(int(v) for v in cache.action_tuples[j]))

    select_action = epsilon_greedy


def _masked_value(q: np.ndarray, cache: SpecCache) -> np.ndarray:
    return np.where(cache.feasibility_mask, q, -np.inf).max(axis=1)


class QlAgent(_EpsilonGreedyMixin):
    """Plain Q-learning on the full joint problem."""

    def __init__(self, spec: WcmdpSpec, cache: SpecCache,
                 init_rng: np.random.Generator,
                 alpha: StepSchedule | None = None,
                 explore_exponent: float = 0.4):
        self.spec = spec
        self.cache = cache
        self.alpha = alpha or StepSchedule()
        self.explore_exponent = explore_exponent
        self.q = init_rng.uniform(0.0, _init_scale(spec),
                                  size=(spec.n_states, spec.n_actions))
        self.visits = np.zeros_like(self.q, dtype=np.int64)
        self.state_visits = np.zeros(spec.n_states, dtype=np.int64)

    def _greedy_table(self) -> np.ndarray:
        return self.q

    def update(self, tau: Transition) -> None:
        ql_update(self.q, self.visits, tau, self.alpha, self.spec, self.cache)

    def value_estimate(self) -> np.ndarray:
        return _masked_value(self.q, self.cache)


class DoubleQlAgent(_EpsilonGreedyMixin):
    """Double Q-learning; acts greedily on the sum of both tables."""

    def __init__(self, spec: WcmdpSpec, cache: SpecCache,
                 init_rng: np.random.Generator,
                 alpha: StepSchedule | None = None,
                 explore_exponent: float = 0.4):
        self.spec = spec
        self.cache = cache
        self.alpha = alpha or StepSchedule()
        self.explore_exponent = explore_exponent
        shape = (spec.n_states, spec.n_actions)
        scale = _init_scale(spec)
        self.q_a = init_rng.uniform(0.0, scale, size=shape)
        self.q_b = init_rng.uniform(0.0, scale, size=shape)
        self.visits_a = np.zeros(shape, dtype=np.int64)
        self.visits_b = np.zeros(shape, dtype=np.int64)
        self.state_visits = np.zeros(spec.n_states, dtype=np.int64)
        self.update_rng: np.random.Generator | None = None

    def _greedy_table(self) -> np.ndarray:
        return self.q_a + self.q_b

    def update(self, tau: Transition) -> None:
        if self.update_rng is None:
            raise RuntimeError("update_rng must be set before training")
        double_ql_update(self.q_a, self.q_b, self.visits_a, self.visits_b,
                         tau, self.alpha, self.update_rng, self.spec,
                         self.cache)

    def value_estimate(self) -> np.ndarray:
        return _masked_value(0.5 * (self.q_a + self.q_b), self.cache)


class LagrangeQlAgent:
    """Baseline that trains only the subagent bank and B(w) and acts with
    the Lagrange policy. There is no main Q table, so no value estimate.

    The acting multiplier is the grid element minimizing the assembled
    state-value bound at the current state (one reasonable reconstruction
    of the Lagrange-policy baseline; exploration is epsilon-greedy with
    the same visit-count schedule as the other agents).
    """

    def __init__(self, spec: WcmdpSpec, cache: SpecCache, grid: LambdaGrid,
                 init_rng: np.random.Generator,
                 beta: StepSchedule | None = None,
                 eta: StepSchedule | None = None,
                 explore_exponent: float = 0.4):
        self.spec = spec
        self.cache = cache
        self.grid = grid
        self.beta = beta or StepSchedule()
        self.eta = eta or StepSchedule(exponent=0.6)
        self.explore_exponent = explore_exponent
        self.bank = SubagentBank(spec, grid, init_rng)
        self.b_table = BTable(spec)
        self.state_visits = np.zeros(spec.n_states, dtype=np.int64)

    def select_action(self, state: FullState,
                      rng: np.random.Generator) -> FactoredAction:
        s_idx = self.cache.state_idx(state)
        feas = self.cache.feasible_indices(s_idx)
        if feas.size == 0:
            raise InfeasibleStateError("empty feasible action set")
        self.state_visits[s_idx] += 1
        eps = float(self.state_visits[s_idx]) ** (-self.explore_exponent)
        if rng.random() < eps:
            j = int(feas[rng.integers(feas.size)])
            return FactoredAction(
                parts=tuple(int(v) for v in self.cache.action_tuples[j]))
        return lagrange_policy_action(self.bank, self.b_table, self.grid,
                                      state, self.spec, self.cache)

    def update(self, tau: Transition) -> None:
        subs = split_transition(self.spec, tau)
        subagent_update(self.bank, subs, self.beta, self.spec)
        b_update(self.b_table, tau.state.exo, tau.rhs, tau.next_state.exo,
                 self.spec.discount, self.eta)

    def value_estimate(self) -> None:
        return None


class WcqlAgent(_EpsilonGreedyMixin):
    """Weakly coupled Q-learning.

    Per step (in this order): update every subagent from the split
    experience, update B(w), take the standard Q-learning step on the
    main table, then project the visited entry onto the freshly assembled
    bound. projection is one of "async" (visited pair only, the default),
    "sweep" (whole table each step, ablation only), or "off".
    """

    def __init__(self, spec: WcmdpSpec, cache: SpecCache, grid: LambdaGrid,
                 init_rng: np.random.Generator,
                 alpha: StepSchedule | None = None,
                 beta: StepSchedule | None = None,
                 eta: StepSchedule | None = None,
                 explore_exponent: float = 0.4,
                 projection: str = "async"):
        if projection not in ("async", "sweep", "off"):
            raise ValueError(f"unknown projection mode: {projection!r}")
        self.spec = spec
        self.cache = cache
        self.grid = grid
        self.alpha = alpha or StepSchedule()
        self.beta = beta or StepSchedule()
        self.eta = eta or StepSchedule(exponent=0.6)
        self.explore_exponent = explore_exponent
        self.projection = projection
        # q_main is drawn before the bank so that, with projection off,
        # the trace is bit-identical to QlAgent under a shared init seed.
        self.q_main = init_rng.uniform(
            0.0, _init_scale(spec),
            size=(spec.n_states, spec.n_actions))
        self.bank = SubagentBank(spec, grid, init_rng)
        self.b_table = BTable(spec)
        self.visits = np.zeros_like(self.q_main, dtype=np.int64)
        self.state_visits = np.zeros(spec.n_states, dtype=np.int64)
        self.projection_violations = 0
        self.projections_applied = 0

    def _greedy_table(self) -> np.ndarray:
        return self.q_main

    def bound_at(self, state: FullState, action: FactoredAction) -> float:
        return bound_at(self.bank, self.b_table, state, action, self.spec)

    def select_action(self, state: FullState,
                      rng: np.random.Generator) -> FactoredAction:
        """Epsilon-greedy on the projected values min(Q, bound).

        The stored table is only clamped at visited pairs, but the
        behavioral policy evaluates the bound at the current state on
        the fly, so the subagents' action ranking guides exploration
        even at states that were never seen before. With projection
        "off" this reduces to the plain Q-learning rule (and consumes
        the RNG identically).
        """
        if self.projection == "off":
            return self.epsilon_greedy(state, rng)
        cache = self.cache
        s_idx = cache.state_idx(state)
        feas = cache.feasible_indices(s_idx)
        if feas.size == 0:
            raise InfeasibleStateError("empty feasible action set")
        self.state_visits[s_idx] += 1
        eps = float(self.state_visits[s_idx]) ** (-self.explore_exponent)
        if rng.random() < eps:
            j = int(feas[rng.integers(feas.size)])
        else:
            bounds = _bound_rows(self.bank, self.b_table, state,
                                 cache.action_tuples[feas], self.spec)
            row = np.minimum(self.q_main[s_idx, feas], bounds)
            j = int(feas[int(np.argmax(row))])
        return FactoredAction(parts=tuple(int(v)
                                          for v in cache.action_tuples[j]))

    def update(self, tau: Transition) -> None:
        spec, cache = self.spec, self.cache
        subs = split_transition(spec, tau)
        subagent_update(self.bank, subs, self.beta, spec)
        b_update(self.b_table, tau.state.exo, tau.rhs, tau.next_state.exo,
                 spec.discount, self.eta)
        new_q = ql_update(self.q_main, self.visits, tau, self.alpha, spec,
                          cache)
        if self.projection == "off":
            return
        s = cache.state_idx(tau.state)
        a = cache.action_idx(tau.action)
        if self.projection == "sweep":
            bounds = bound_table(self.bank, self.b_table, spec)
            np.minimum(self.q_main, bounds, out=self.q_main)
            bound = float(bounds[s, a])
        else:
            bound = float(_bound_vector(self.bank, self.b_table,
                                        tau.state.endo, tau.state.exo,
                                        tau.action.parts, spec).min())
            if bound < new_q:
                self.q_main[s, a] = bound
                self.projections_applied += 1
        if self.q_main[s, a] > bound + PROJECTION_TOL:
            self.projection_violations += 1
            raise AssertionError(
                f"projection invariant violated at ({s}, {a}): "
                f"{self.q_main[s, a]} > {bound}")

    def value_estimate(self) -> np.ndarray:
        return _masked_value(self.q_main, self.cache)

    def save_tables(self, path) -> None:
        """Serialize the main table to CSV for inspection."""
        np.savetxt(path, self.q_main, delimiter=",")


def epsilon_greedy_action(agent, state: FullState, spec: WcmdpSpec,
                          rng: np.random.Generator) -> FactoredAction:
    """Module-level alias for the agents' epsilon-greedy action rule."""
    del spec  # the agent carries its spec
    return agent.epsilon_greedy(state, rng)


def wcql_step(agent: WcqlAgent, tau: Transition,
              spec: WcmdpSpec) -> WcqlAgent:
    """Module-level alias for one full WCQL update."""
    del spec
    agent.update(tau)
    return agent
