"""Benchmark environment constructors.

Three benchmark weakly coupled MDPs (EV charging deadline scheduling,
multi-product inventory control, online stochastic ad matching) plus a
random instance generator used by oracle tests. Construction is pure
given (params, rng); the returned specs are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wcmdp.core import FullState, WcmdpSpec


@dataclass(frozen=True)
class EvChargingParams:
    """EV charging deadline scheduling.

    Each charging spot is a subproblem with endogenous state (B, D):
    remaining charge B in {0..max_charge} and remaining deadline D in
    {0..max_deadline}. The exogenous state is the electricity cost
    level. Note max_deadline=3 gives 12 (B, D) combos per spot, matching
    the 36-state subproblem (3 cost levels x 12) and the 0.7/11 arrival
    probabilities.
    """

    n_spots: int = 3
    cost_levels: tuple[float, ...] = (0.2, 0.5, 0.8)
    budgets: tuple[float, ...] = (3.0, 2.0, 1.0)  # b(c) per cost level
    penalty_coef: float = 0.2
    max_charge: int = 2
    max_deadline: int = 3
    empty_arrival_prob: float = 0.3
    cost_transitions: tuple[tuple[float, ...], ...] = (
        (0.4, 0.3, 0.3),
        (0.2, 0.5, 0.3),
        (0.6, 0.2, 0.2),
    )
    discount: float = 0.9

    def __post_init__(self):
        if len(self.budgets) != len(self.cost_levels):
            raise ValueError("budgets must be keyed by every cost level")
        for row in self.cost_transitions:
            if abs(sum(row) - 1.0) > 1e-12:
                raise ValueError("cost transition rows must sum to 1")

    @property
    def n_endo(self) -> int:
        return (self.max_charge + 1) * (self.max_deadline + 1)

    def endo_index(self, charge: int, deadline: int) -> int:
        return charge * (self.max_deadline + 1) + deadline

    def endo_decode(self, idx: int) -> tuple[int, int]:
        return divmod(idx, self.max_deadline + 1)


def make_ev_charging(params: EvChargingParams | None = None,
                     rng: np.random.Generator | None = None) -> WcmdpSpec:
    """Build the EV charging WCMDP. Deterministic given params (rng unused)."""
    p = params or EvChargingParams()
    n_endo = p.n_endo
    n_w = len(p.cost_levels)

    # Arrival distribution over (B, D): (0, 0) with prob empty_arrival_prob,
    # the remaining combos uniformly.
    arrival = np.full(n_endo, (1.0 - p.empty_arrival_prob) / (n_endo - 1))
    arrival[p.endo_index(0, 0)] = p.empty_arrival_prob

    kernel = np.zeros((n_endo, 2, n_endo))
    reward = np.zeros((n_endo, n_w, 2))
    lhs = np.zeros((n_endo, n_w, 2, 1))
    for x in range(n_endo):
        charge, deadline = p.endo_decode(x)
        for a in range(2):
            if deadline > 1:
                nxt = p.endo_index(max(charge - a, 0), deadline - 1)
                kernel[x, a, nxt] = 1.0
            else:
                kernel[x, a, :] = arrival
            for w, cost in enumerate(p.cost_levels):
                if charge > 0 and deadline > 1:
                    reward[x, w, a] = (1.0 - cost) * a
                elif charge > 0 and deadline == 1:
                    reward[x, w, a] = ((1.0 - cost) * a
                                       - p.penalty_coef * (charge - a) ** 2)
                else:
                    reward[x, w, a] = 0.0
            lhs[x, :, a, 0] = a

    exo = np.array(p.cost_transitions, dtype=float)
    rhs = np.array(p.budgets, dtype=float).reshape(n_w, 1)
    return WcmdpSpec(
        n_subproblems=p.n_spots,
        n_constraints=1,
        endo_space_sizes=(n_endo,) * p.n_spots,
        action_space_sizes=(2,) * p.n_spots,
        exo_space_size=n_w,
        endo_kernels=tuple(kernel.copy() for _ in range(p.n_spots)),
        exo_kernel=exo,
        rewards=tuple(reward.copy() for _ in range(p.n_spots)),
        constraint_lhs=tuple(lhs.copy() for _ in range(p.n_spots)),
        constraint_rhs=rhs,
        discount=p.discount,
    )


# Table of per-product inventory parameters: storage capacity R_i, max
# backorders M_i, mean demand mu_i, holding cost h_i, backorder cost b_i,
# lost sales cost l_i.
_INVENTORY_TABLE = {
    "storage": (20, 30, 10, 15, 10, 10, 25, 30, 15, 10),
    "max_backorders": (5, 5, 5, 5, 5, 5, 5, 5, 5, 5),
    "mean_demand": (0.3, 0.7, 0.5, 1.0, 1.4, 0.9, 1.1, 1.2, 0.3, 0.6),
    "holding_cost": (0.1, 0.2, 0.05, 0.3, 0.2, 0.5, 0.3, 0.4, 0.15, 0.12),
    "backorder_cost": (3.0, 1.2, 5.15, 1.3, 1.1, 1.1, 10.3, 1.05, 1.0, 3.1),
    "lost_sales_cost": (30.1, 3.3, 10.05, 3.9, 3.7, 3.6, 40.3, 4.5, 12.55, 44.1),
}


@dataclass(frozen=True)
class InventoryParams:
    """Multi-product inventory control with an exogenous production rate.

    Stock x_i lives in {-M_i, ..., R_i}; the action allocates a resource
    level a_i in {0..resource_cap} under sum_i a_i <= resource_cap. The
    production-rate noise p_t in [0.8, 1] is discretized to
    noise_grid_points levels with Dirichlet-sampled transitions (the
    Dirichlet parameters are themselves Uniform(1, 5), drawn once per
    construction).
    """

    n_products: int = 10
    resource_cap: int = 3
    rate_scale: float = 12.0
    rate_shift: float = 5.971
    noise_low: float = 0.8
    noise_high: float = 1.0
    noise_grid_points: int = 5
    dirichlet_param_range: tuple[float, float] = (1.0, 5.0)
    demand_tail_mass: float = 1e-6
    discount: float = 0.99

    def __post_init__(self):
        if not 1 <= self.n_products <= 10:
            raise ValueError("n_products must be in 1..10")

    def product_row(self, key: str) -> tuple[float, ...]:
        return _INVENTORY_TABLE[key][: self.n_products]


def production_rate(allocation: float, noise: float,
                    scale: float = 12.0, shift: float = 5.971) -> float:
    """rho(a, p) = scale * p * a / (shift + a); zero allocation gives zero."""
    return scale * noise * allocation / (shift + allocation)


def _truncated_poisson(mean: float, tail_mass: float) -> np.ndarray:
    """Poisson pmf truncated at the smallest k with CDF >= 1 - tail_mass;
    the residual mass is added to k."""
    probs = []
    pk = math.exp(-mean)
    total = pk
    probs.append(pk)
    k = 0
    while total < 1.0 - tail_mass:
        k += 1
        pk = pk * mean / k
        probs.append(pk)
        total += pk
    out = np.array(probs)
    out[-1] += 1.0 - out.sum()
    return out


def make_inventory(params: InventoryParams | None = None,
                   rng: np.random.Generator | None = None,
                   sampled_out: dict | None = None) -> WcmdpSpec:
    """Build the multi-product inventory WCMDP.

    Costs enter as negative rewards; the per-period cost is taken in
    expectation over the truncated Poisson demand so that r_i(s_i, a_i)
    is a deterministic function. Stock transitions round x + rho - D to
    the nearest integer and clamp to [-M_i, R_i].
    """
    p = params or InventoryParams()
    if rng is None:
        rng = np.random.default_rng(0)
    n = p.n_products
    cap = p.resource_cap
    n_actions = cap + 1
    grid = np.linspace(p.noise_low, p.noise_high, p.noise_grid_points)
    k = p.noise_grid_points

    lo, hi = p.dirichlet_param_range
    alpha = rng.uniform(lo, hi, size=(k, k))
    exo = np.vstack([rng.dirichlet(alpha[row]) for row in range(k)])
    if sampled_out is not None:
        sampled_out["noise_transitions"] = exo.copy()

    storage = p.product_row("storage")
    backmax = p.product_row("max_backorders")
    mu = p.product_row("mean_demand")
    hold = p.product_row("holding_cost")
    back = p.product_row("backorder_cost")
    lost = p.product_row("lost_sales_cost")

    kernels, rewards, lhs_list, sizes = [], [], [], []
    for i in range(n):
        r_i, m_i = int(storage[i]), int(backmax[i])
        n_x = r_i + m_i + 1  # stock values -M..R; index = x + M
        demand = _truncated_poisson(mu[i], p.demand_tail_mass)
        dvals = np.arange(len(demand))
        kernel = np.zeros((n_x, n_actions, n_x))
        reward = np.zeros((n_x, k, n_actions))
        lhs = np.zeros((n_x, k, n_actions, 1))
        for xi in range(n_x):
            stock = xi - m_i
            for a in range(n_actions):
                lhs[xi, :, a, 0] = a
                for wi, noise in enumerate(grid):
                    rho = production_rate(a, noise, p.rate_scale, p.rate_shift)
                    level = stock + rho
                    cost = (hold[i] * max(level, 0.0)
                            + back[i] * max(-level, 0.0)
                            + lost[i] * float(np.dot(
                                demand,
                                np.maximum(np.maximum(dvals - level, 0.0)
                                           - m_i, 0.0))))
                    reward[xi, wi, a] = -cost
                # Transition kernel does not depend on w in the paper's
                # dynamics; evaluate rho at the mid-grid noise level so the
                # endogenous kernel stays a function of (x, a) alone.
                rho_mid = production_rate(a, grid[k // 2],
                                          p.rate_scale, p.rate_shift)
                nxt_states = np.clip(np.rint(stock + rho_mid - dvals),
                                     -m_i, r_i).astype(int) + m_i
                for prob, nxt in zip(demand, nxt_states):
                    kernel[xi, a, nxt] += prob
        kernels.append(kernel)
        rewards.append(reward)
        lhs_list.append(lhs)
        sizes.append(n_x)

    rhs = np.full((k, 1), float(cap))
    return WcmdpSpec(
        n_subproblems=n,
        n_constraints=1,
        endo_space_sizes=tuple(sizes),
        action_space_sizes=(n_actions,) * n,
        exo_space_size=k,
        endo_kernels=tuple(kernels),
        exo_kernel=exo,
        rewards=tuple(rewards),
        constraint_lhs=tuple(lhs_list),
        constraint_rhs=rhs,
        discount=p.discount,
    )


@dataclass(frozen=True)
class AdMatchingParams:
    """Online stochastic ad matching.

    Exactly one advertiser receives each arriving impression; the
    equality constraint sum_i a_i = 1 is encoded as the pair
    sum a <= 1 and -sum a <= -1 (L=2) to stay in <=-form.
    """

    n_advertisers: int = 6
    n_impressions: int = 5
    initial_stock: tuple[int, ...] = (10, 11, 12, 10, 14, 9)
    reward_range: tuple[float, float] = (1.0, 4.0)
    dirichlet_param_range: tuple[float, float] = (1.0, 20.0)
    discount: float = 0.99

    def __post_init__(self):
        if len(self.initial_stock) != self.n_advertisers:
            raise ValueError("initial_stock must have one entry per advertiser")


def make_ad_matching(params: AdMatchingParams | None = None,
                     rng: np.random.Generator | None = None,
                     sampled_out: dict | None = None) -> WcmdpSpec:
    """Build the ad matching WCMDP. The reward coefficients l_{i,e} and
    the impression chain are sampled from rng (once per construction)."""
    p = params or AdMatchingParams()
    if rng is None:
        rng = np.random.default_rng(0)
    n, n_e = p.n_advertisers, p.n_impressions

    lo, hi = p.dirichlet_param_range
    alpha = rng.uniform(lo, hi, size=(n_e, n_e))
    exo = np.vstack([rng.dirichlet(alpha[row]) for row in range(n_e)])
    coef = rng.uniform(*p.reward_range, size=(n, n_e))
    if sampled_out is not None:
        sampled_out["impression_transitions"] = exo.copy()
        sampled_out["reward_coefficients"] = coef.copy()

    kernels, rewards, lhs_list, sizes = [], [], [], []
    for i in range(n):
        n_x = p.initial_stock[i] + 1  # stock 0..x0
        kernel = np.zeros((n_x, 2, n_x))
        reward = np.zeros((n_x, n_e, 2))
        lhs = np.zeros((n_x, n_e, 2, 2))
        for x in range(n_x):
            for a in range(2):
                kernel[x, a, max(x - a, 0)] = 1.0
                reward[x, :, a] = coef[i] * min(x, a)
                lhs[x, :, a, 0] = a
                lhs[x, :, a, 1] = -a
        kernels.append(kernel)
        rewards.append(reward)
        lhs_list.append(lhs)
        sizes.append(n_x)

    rhs = np.tile(np.array([1.0, -1.0]), (n_e, 1))
    return WcmdpSpec(
        n_subproblems=n,
        n_constraints=2,
        endo_space_sizes=tuple(sizes),
        action_space_sizes=(2,) * n,
        exo_space_size=n_e,
        endo_kernels=tuple(kernels),
        exo_kernel=exo,
        rewards=tuple(rewards),
        constraint_lhs=tuple(lhs_list),
        constraint_rhs=rhs,
        discount=p.discount,
    )


@dataclass(frozen=True)
class RandomWcmdpDims:
    """Shape of a random oracle-test instance."""

    n_subproblems: int = 2
    endo_space_sizes: tuple[int, ...] = (3, 3)
    action_space_sizes: tuple[int, ...] = (2, 2)
    exo_space_size: int = 2
    n_constraints: int = 1
    discount: float = 0.9


_RANDOM_SIZE_CAP = 100_000


def make_random_wcmdp(dims: RandomWcmdpDims,
                      rng: np.random.Generator) -> WcmdpSpec:
    """Random instance: Dirichlet(1) kernel rows, Uniform(0,1) rewards,
    d(s_i, a_i) = a_i in every constraint component, and b(w) drawn
    nonnegative so the all-zeros action is always feasible."""
    n_states = dims.exo_space_size * int(np.prod(dims.endo_space_sizes))
    n_actions = int(np.prod(dims.action_space_sizes))
    if n_states * n_actions > _RANDOM_SIZE_CAP:
        raise ValueError(
            f"instance too large: {n_states * n_actions} state-action pairs "
            f"(cap {_RANDOM_SIZE_CAP})")

    kernels, rewards, lhs_list = [], [], []
    w = dims.exo_space_size
    big_l = dims.n_constraints
    for i in range(dims.n_subproblems):
        xi, ai = dims.endo_space_sizes[i], dims.action_space_sizes[i]
        kernel = rng.dirichlet(np.ones(xi), size=(xi, ai))
        reward = rng.uniform(0.0, 1.0, size=(xi, w, ai))
        lhs = np.zeros((xi, w, ai, big_l))
        for a in range(ai):
            lhs[:, :, a, :] = a
        kernels.append(kernel)
        rewards.append(reward)
        lhs_list.append(lhs)
    exo = rng.dirichlet(np.ones(w), size=w)
    max_total = sum(a - 1 for a in dims.action_space_sizes)
    rhs = rng.uniform(0.0, max(max_total, 1), size=(w, big_l))
    return WcmdpSpec(
        n_subproblems=dims.n_subproblems,
        n_constraints=big_l,
        endo_space_sizes=tuple(dims.endo_space_sizes),
        action_space_sizes=tuple(dims.action_space_sizes),
        exo_space_size=w,
        endo_kernels=tuple(kernels),
        exo_kernel=exo,
        rewards=tuple(rewards),
        constraint_lhs=tuple(lhs_list),
        constraint_rhs=rhs,
        discount=dims.discount,
    )


# ---------------------------------------------------------------------------
# Registry used by the harness.

ENV_IDS = ("ev", "inventory", "ad_matching")

EPISODE_LENGTHS = {"ev": 50, "inventory": 25, "ad_matching": 30}


@dataclass
class EnvBuild:
    """A constructed environment plus the bookkeeping the harness needs."""

    env_id: str
    spec: WcmdpSpec
    params: object
    sampled: dict = field(default_factory=dict)


def build_env(env_id: str, overrides: dict | None = None,
              rng: np.random.Generator | None = None) -> EnvBuild:
    """Construct a registered environment, applying parameter overrides."""
    overrides = dict(overrides or {})
    if env_id == "ev":
        params = EvChargingParams(**overrides)
        spec = make_ev_charging(params, rng)
        return EnvBuild(env_id, spec, params)
    if env_id == "inventory":
        params = InventoryParams(**overrides)
        sampled: dict = {}
        spec = make_inventory(params, rng, sampled_out=sampled)
        return EnvBuild(env_id, spec, params, sampled)
    if env_id == "ad_matching":
        params = AdMatchingParams(**overrides)
        sampled = {}
        spec = make_ad_matching(params, rng, sampled_out=sampled)
        return EnvBuild(env_id, spec, params, sampled)
    raise ValueError(f"unknown env id: {env_id!r}")


def initial_state(build: EnvBuild, rng: np.random.Generator) -> FullState:
    """Episode start state. EV: all spots empty, uniform cost level.
    Inventory: zero stock, uniform noise level. Ad matching: full stocks,
    uniform impression type."""
    spec = build.spec
    w = int(rng.integers(spec.exo_space_size))
    if build.env_id == "ad_matching":
        endo = tuple(s - 1 for s in spec.endo_space_sizes)  # index of x0
        return FullState(endo=endo, exo=w)
    if build.env_id == "inventory":
        params: InventoryParams = build.params  # type: ignore[assignment]
        endo = tuple(int(m) for m in params.product_row("max_backorders"))
        return FullState(endo=endo, exo=w)
    return FullState(endo=(0,) * spec.n_subproblems, exo=w)
