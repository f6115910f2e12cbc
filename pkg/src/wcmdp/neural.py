"""Desk-scale WCDQN plus DQN and Double DQN baselines.

Everything runs on a self-contained dense network (input -> 64 -> 32 ->
output, rectifier hidden activations) with hand-written reverse-mode
gradients and an Adam optimizer, in double precision. One shared
subagent network learns Q_i_lam for all subproblems and multipliers at
once: its input is (one-hot subproblem id, raw multiplier, subproblem
state features) and its output head covers max_i |A_i| actions with the
invalid tail masked. B(w) stays tabular.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from wcmdp.core import (
    FactoredAction,
    FullState,
    InfeasibleStateError,
    SpecCache,
    Transition,
    WcmdpSpec,
    sample_step,
)
from wcmdp.exact import LambdaGrid, default_lambda_grid
from wcmdp.tabular import BTable, StepSchedule, b_update

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# Dense network with Adam state.


@dataclass
class MlpParams:
    """Weights, biases, and Adam moments of one dense network."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not self.m_w:
            self.m_w = [np.zeros_like(w) for w in self.weights]
            self.v_w = [np.zeros_like(w) for w in self.weights]
            self.m_b = [np.zeros_like(b) for b in self.biases]
            self.v_b = [np.zeros_like(b) for b in self.biases]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],
                *(w.shape[1] for w in self.weights))

    def copy(self) -> "MlpParams":
        return MlpParams(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases],
                         m_w=[m.copy() for m in self.m_w],
                         v_w=[v.copy() for v in self.v_w],
                         m_b=[m.copy() for m in self.m_b],
                         v_b=[v.copy() for v in self.v_b],
                         step=self.step)

    def frozen_copy(self) -> "MlpParams":
        """Weights only; used for target networks."""
        return MlpParams(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])


def init_mlp(rng: np.random.Generator, dims: tuple[int, ...]) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights=weights, biases=biases)


def _forward_cached(params: MlpParams, x: np.ndarray
                    ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; caches layer inputs for the backward pass.

    The rectifier uses subgradient 0 at exactly-zero preactivations.
    """
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k != last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single input vector or a (B, d) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match network "
            f"({params.weights[0].shape[0]})")
    out, _ = _forward_cached(params, np.atleast_2d(x))
    return out[0] if single else out


def _backward_from_cache(params: MlpParams, acts: list[np.ndarray],
                         d_out: np.ndarray
                         ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    g_w = [None] * len(params.weights)
    g_b = [None] * len(params.biases)
    delta = d_out
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        g_w[k] = acts[k].T @ delta
        g_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return g_w, g_b


def mlp_backward(params: MlpParams, x: np.ndarray, d_out: np.ndarray
                 ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact reverse-mode gradients of mlp_forward with respect to every
    weight and bias, for the given output cotangent."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d_out = np.atleast_2d(np.asarray(d_out, dtype=float))
    if d_out.shape[-1] != params.weights[-1].shape[1]:
        raise ValueError("output-gradient dimension mismatch")
    _, acts = _forward_cached(params, x)
    return _backward_from_cache(params, acts, d_out)


def adam_step(params: MlpParams,
              grads: tuple[list[np.ndarray], list[np.ndarray]],
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> MlpParams:
    """One bias-corrected Adam update, in place. Returns params."""
    g_w, g_b = grads
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for store_m, store_v, tensors, gs in (
            (params.m_w, params.v_w, params.weights, g_w),
            (params.m_b, params.v_b, params.biases, g_b)):
        for k, g in enumerate(gs):
            store_m[k] += (1.0 - beta1) * (g - store_m[k])
            store_v[k] += (1.0 - beta2) * (g * g - store_v[k])
            tensors[k] -= lr * (store_m[k] / c1) / (np.sqrt(store_v[k] / c2)
                                                    + eps)
    return params


def masked_q(out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked-out entries with -inf for argmax purposes."""
    return np.where(mask, out, NEG_INF)


# ---------------------------------------------------------------------------
# Feature encoding.


class FeatureEncoder:
    """One-hot feature encoding for full states and subagent inputs."""

    def __init__(self, spec: WcmdpSpec):
        self.spec = spec
        self.endo_offsets = np.concatenate(
            ([0], np.cumsum(spec.endo_space_sizes)))
        self.full_dim = int(self.endo_offsets[-1]) + spec.exo_space_size
        self.max_x = max(spec.endo_space_sizes)
        self.head_dim = max(spec.action_space_sizes)
        n, big_l = spec.n_subproblems, spec.n_constraints
        self.sub_dim = n + big_l + self.max_x + spec.exo_space_size
        # valid-action mask of the shared output head, per subproblem
        self.head_masks = np.zeros((n, self.head_dim), dtype=bool)
        for i, n_a in enumerate(spec.action_space_sizes):
            self.head_masks[i, :n_a] = True

    def encode_full(self, endo: np.ndarray, w: np.ndarray) -> np.ndarray:
        """endo: (B, N) ints, w: (B,) ints -> (B, full_dim) one-hot block."""
        endo = np.atleast_2d(endo)
        w = np.atleast_1d(w)
        b = endo.shape[0]
        out = np.zeros((b, self.full_dim))
        rows = np.arange(b)
        for i in range(self.spec.n_subproblems):
            out[rows, self.endo_offsets[i] + endo[:, i]] = 1.0
        out[rows, self.endo_offsets[-1] + w] = 1.0
        return out

    def encode_sub(self, sub_id: np.ndarray, lam: np.ndarray,
                   x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """(i, lambda, x_i, w) rows -> (R, sub_dim)."""
        sub_id = np.atleast_1d(sub_id)
        lam = np.atleast_2d(lam)
        x = np.atleast_1d(x)
        w = np.atleast_1d(w)
        r = sub_id.shape[0]
        n, big_l = self.spec.n_subproblems, self.spec.n_constraints
        out = np.zeros((r, self.sub_dim))
        rows = np.arange(r)
        out[rows, sub_id] = 1.0
        out[:, n:n + big_l] = lam
        out[rows, n + big_l + x] = 1.0
        out[rows, n + big_l + self.max_x + w] = 1.0
        return out


# ---------------------------------------------------------------------------
# Replay buffer.


class ReplayBuffer:
    """Ring buffer of transitions with uniform sampling after warmup."""

    def __init__(self, capacity: int = 100_000, warmup: int = 10_000):
        if warmup > capacity:
            raise ValueError("warmup cannot exceed capacity")
        self.capacity = capacity
        self.warmup = warmup
        self._store: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._store)

    @property
    def ready(self) -> bool:
        return len(self._store) >= self.warmup

    def push(self, tau: Transition) -> None:
        if len(self._store) < self.capacity:
            self._store.append(tau)
        else:
            self._store[self._next] = tau
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, k: int) -> list[Transition]:
        if not self.ready:
            raise RuntimeError("replay buffer sampled before warmup")
        idx = rng.integers(len(self._store), size=k)
        return [self._store[j] for j in idx]

    def contents(self) -> list[Transition]:
        return list(self._store)


@dataclass
class BatchArrays:
    """Columnar view of a minibatch of transitions."""

    endo: np.ndarray        # (B, N)
    w: np.ndarray           # (B,)
    parts: np.ndarray       # (B, N)
    a_idx: np.ndarray       # (B,)
    rewards: np.ndarray     # (B, N)
    rhs: np.ndarray         # (B, L)
    next_endo: np.ndarray   # (B, N)
    next_w: np.ndarray      # (B,)

    @property
    def size(self) -> int:
        return self.w.shape[0]


def batch_arrays(spec: WcmdpSpec, cache: SpecCache,
                 taus: list[Transition]) -> BatchArrays:
    b = len(taus)
    n = spec.n_subproblems
    endo = np.array([t.state.endo for t in taus], dtype=np.int64)
    parts = np.array([t.action.parts for t in taus], dtype=np.int64)
    strides = np.ones(n, dtype=np.int64)
    for i in range(n - 2, -1, -1):
        strides[i] = strides[i + 1] * spec.action_space_sizes[i + 1]
    return BatchArrays(
        endo=endo,
        w=np.array([t.state.exo for t in taus], dtype=np.int64),
        parts=parts,
        a_idx=parts @ strides,
        rewards=np.array([t.rewards for t in taus]),
        rhs=np.array([t.rhs for t in taus]),
        next_endo=np.array([t.next_state.endo for t in taus], dtype=np.int64),
        next_w=np.array([t.next_state.exo for t in taus], dtype=np.int64),
    )


def _state_indices(cache: SpecCache, endo: np.ndarray,
                   w: np.ndarray) -> np.ndarray:
    return w * cache.exo_stride + endo @ cache.endo_strides


# ---------------------------------------------------------------------------
# Targets and losses. Targets are always computed from frozen parameters
# and treated as constants by the gradients (semi-gradient convention).


def dqn_target_batch(spec: WcmdpSpec, cache: SpecCache, enc: FeatureEncoder,
                     batch: BatchArrays, target_params: MlpParams,
                     online_params: MlpParams | None = None) -> np.ndarray:
    """y = r + gamma * max over feasible a' of Q(s', a'; theta-).

    With online_params given, the Double DQN rule is used instead: the
    online network selects the feasible argmax, the target net evaluates.
    """
    feats = enc.encode_full(batch.next_endo, batch.next_w)
    q_t = mlp_forward(target_params, feats)
    s2 = _state_indices(cache, batch.next_endo, batch.next_w)
    mask = cache.feasibility_mask[s2]
    if not mask.any(axis=1).all():
        raise InfeasibleStateError("empty feasible set at a next state")
    r = batch.rewards.sum(axis=1)
    if online_params is None:
        best = masked_q(q_t, mask).max(axis=1)
    else:
        q_o = mlp_forward(online_params, feats)
        sel = np.argmax(masked_q(q_o, mask), axis=1)
        best = q_t[np.arange(batch.size), sel]
    return r + spec.discount * best


def dqn_target(tau: Transition, target_params: MlpParams, spec: WcmdpSpec,
               cache: SpecCache, enc: FeatureEncoder) -> float:
    """Single-transition convenience wrapper around dqn_target_batch."""
    batch = batch_arrays(spec, cache, [tau])
    return float(dqn_target_batch(spec, cache, enc, batch, target_params)[0])


def td_loss_and_grad(params: MlpParams, feats: np.ndarray, a_idx: np.ndarray,
                     y: np.ndarray
                     ) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Mean squared TD error and its gradient, targets held fixed."""
    out, acts = _forward_cached(params, feats)
    b = feats.shape[0]
    rows = np.arange(b)
    err = out[rows, a_idx] - y
    loss = float(np.mean(err ** 2))
    d_out = np.zeros_like(out)
    d_out[rows, a_idx] = 2.0 * err / b
    return loss, _backward_from_cache(params, acts, d_out)


def wcdqn_subagent_targets(spec: WcmdpSpec, enc: FeatureEncoder,
                           batch: BatchArrays, lam_batch: np.ndarray,
                           theta_u_target: MlpParams) -> np.ndarray:
    """Per-(element, subproblem) targets y_i_lam, shape (B, N).

    y = r_i - lam^T d(s_i, a_i) + gamma * max over A_i of
    Q_i_lam(s'_i, .; theta_U-). The generalized penalty lam^T d is used;
    it reduces to lam * a_i in the multi-action RMAB case.
    """
    b, n = batch.size, spec.n_subproblems
    pen = np.empty((b, n))
    for i in range(n):
        d = spec.constraint_lhs[i][batch.endo[:, i], batch.w,
                                   batch.parts[:, i]]  # (B, L)
        pen[:, i] = (d * lam_batch).sum(axis=1)
    sub_id = np.tile(np.arange(n), b)
    lam_rep = np.repeat(lam_batch, n, axis=0)
    x2 = batch.next_endo.reshape(-1)
    w2 = np.repeat(batch.next_w, n)
    feats = enc.encode_sub(sub_id, lam_rep, x2, w2)
    q_next = mlp_forward(theta_u_target, feats)  # (B*N, head)
    q_next = masked_q(q_next, enc.head_masks[sub_id]).max(axis=1)
    return batch.rewards - pen + spec.discount * q_next.reshape(b, n)


def wcdqn_subagent_loss(spec: WcmdpSpec, enc: FeatureEncoder,
                        batch: BatchArrays, lam_batch: np.ndarray,
                        theta_u: MlpParams, theta_u_target: MlpParams
                        ) -> tuple[float,
                                   tuple[list[np.ndarray], list[np.ndarray]]]:
    """Subagent loss: mean over the batch of sum_i (y_i_lam - Q_i_lam)^2,
    with gradient-stopped targets. Returns (loss, gradient)."""
    b, n = batch.size, spec.n_subproblems
    y = wcdqn_subagent_targets(spec, enc, batch, lam_batch, theta_u_target)
    sub_id = np.tile(np.arange(n), b)
    lam_rep = np.repeat(lam_batch, n, axis=0)
    feats = enc.encode_sub(sub_id, lam_rep, batch.endo.reshape(-1),
                           np.repeat(batch.w, n))
    out, acts = _forward_cached(theta_u, feats)
    rows = np.arange(b * n)
    cols = batch.parts.reshape(-1)
    err = out[rows, cols] - y.reshape(-1)
    loss = float(np.sum(err ** 2) / b)
    d_out = np.zeros_like(out)
    d_out[rows, cols] = 2.0 * err / b
    return loss, _backward_from_cache(theta_u, acts, d_out)


def wcdqn_bound_targets(spec: WcmdpSpec, cache: SpecCache,
                        enc: FeatureEncoder, batch: BatchArrays,
                        theta_u_target: MlpParams, b_estimates: np.ndarray,
                        grid: LambdaGrid) -> np.ndarray:
    """Upper-bound targets y_U = r + gamma * max over ALL a' of
    min over lambda of [lam^T B(w') + sum_i Q_i_lam(s'_i, a'_i; theta_U-)].

    The inner max deliberately runs over the full action set, unlike the
    feasibility-restricted max of the standard target.
    """
    b, n = batch.size, spec.n_subproblems
    k = len(grid)
    sub_id = np.tile(np.arange(n), b * k)
    lam_rep = np.repeat(np.tile(grid.multipliers, (b, 1)), n, axis=0)
    x2 = np.tile(batch.next_endo, (1, k)).reshape(-1)
    w2 = np.repeat(batch.next_w, k * n)
    feats = enc.encode_sub(sub_id, lam_rep, x2, w2)
    q = mlp_forward(theta_u_target, feats).reshape(b, k, n, enc.head_dim)
    tuples = cache.action_tuples  # (A, N)
    idx = np.broadcast_to(tuples.T[None, None], (b, k, n, tuples.shape[0]))
    per_i = np.take_along_axis(q, idx, axis=3)  # (B, K, N, A)
    q_joint = per_i.sum(axis=2)  # (B, K, A)
    lam_b = grid.multipliers @ b_estimates.T  # (K, W)
    bound = (q_joint + lam_b[:, batch.next_w].T[:, :, None]).min(axis=1)
    r = batch.rewards.sum(axis=1)
    return r + spec.discount * bound.max(axis=1)


def wcdqn_main_loss(params: MlpParams, feats: np.ndarray, a_idx: np.ndarray,
                    y: np.ndarray, y_u: np.ndarray, kappa_u: float
                    ) -> tuple[float,
                               tuple[list[np.ndarray], list[np.ndarray]]]:
    """Main WCDQN loss: mean of (y - Q)^2 + kappa_U * ((Q - y_U)_+)^2,
    with gradient-stopped targets. Returns (loss, gradient)."""
    out, acts = _forward_cached(params, feats)
    b = feats.shape[0]
    rows = np.arange(b)
    q = out[rows, a_idx]
    err = q - y
    viol = np.maximum(q - y_u, 0.0)
    loss = float(np.mean(err ** 2 + kappa_u * viol ** 2))
    d_out = np.zeros_like(out)
    d_out[rows, a_idx] = 2.0 * (err + kappa_u * viol) / b
    return loss, _backward_from_cache(params, acts, d_out)


# ---------------------------------------------------------------------------
# Training.


@dataclass
class WcdqnConfig:
    """Training knobs shared by the DQN family."""

    hidden: tuple[int, int] = (64, 32)
    kappa_u: float = 10.0
    c_target: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 30_000
    buffer_capacity: int = 100_000
    warmup: int = 10_000
    eta_exponent: float = 0.6
    enable_subagents: bool = True
    lambda_max: float = 10.0
    lambda_points: int = 41

    def __post_init__(self):
        if self.kappa_u < 0:
            raise ValueError("kappa_u must be nonnegative")
        if self.c_target < 1:
            raise ValueError("c_target must be at least 1")


@dataclass
class NeuralRunResult:
    returns: list[float]
    theta: MlpParams
    theta_u: MlpParams | None
    b_estimates: np.ndarray | None
    steps: int


def _epsilon(cfg: WcdqnConfig, step: int) -> float:
    frac = min(step / cfg.eps_decay_steps, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def _select_action(theta: MlpParams, enc: FeatureEncoder, cache: SpecCache,
                   state: FullState, eps: float,
                   rng: np.random.Generator) -> FactoredAction:
    s_idx = cache.state_idx(state)
    feas = cache.feasible_indices(s_idx)
    if feas.size == 0:
        raise InfeasibleStateError("empty feasible action set")
    if rng.random() < eps:
        j = int(feas[rng.integers(feas.size)])
    else:
        x = enc.encode_full(np.array([state.endo]), np.array([state.exo]))
        q = mlp_forward(theta, x)[0]
        j = int(feas[int(np.argmax(q[feas]))])
    return FactoredAction(parts=tuple(int(v) for v in cache.action_tuples[j]))


def train_neural(build, episodes: int, episode_length: int,
                 config: WcdqnConfig, seed: int, algo: str = "wcdqn",
                 initial_state_fn=None) -> NeuralRunResult:
    """Shared training loop for dqn / double_dqn / wcdqn.

    ``build`` is an envs.EnvBuild (or anything with .spec plus an
    initial-state function supplied via ``initial_state_fn``). WCDQN with
    subagents disabled and kappa_u = 0 walks exactly the DQN code path
    and consumes the same random streams, so their traces coincide.
    """
    from wcmdp import envs as _envs

    if algo not in ("dqn", "double_dqn", "wcdqn"):
        raise ValueError(f"unknown neural algorithm: {algo!r}")
    spec: WcmdpSpec = build.spec
    cache = SpecCache(spec)
    enc = FeatureEncoder(spec)
    if initial_state_fn is None:
        initial_state_fn = lambda rng: _envs.initial_state(build, rng)

    seq = np.random.SeedSequence(seed)
    rng_theta, rng_theta_u, rng_behave, rng_replay, rng_lam = (
        np.random.default_rng(s) for s in seq.spawn(5))

    theta = init_mlp(rng_theta, (enc.full_dim, *config.hidden, spec.n_actions))
    theta_minus = theta.frozen_copy()
    use_sub = algo == "wcdqn" and config.enable_subagents
    use_penalty = use_sub and config.kappa_u > 0
    theta_u = theta_u_minus = None
    grid = None
    b_table = None
    eta = StepSchedule(exponent=config.eta_exponent)
    if algo == "wcdqn":
        b_table = BTable(spec)
    if use_sub:
        grid = default_lambda_grid(spec.n_constraints, config.lambda_max,
                                   config.lambda_points)
        theta_u = init_mlp(rng_theta_u,
                           (enc.sub_dim, *config.hidden, enc.head_dim))
        theta_u_minus = theta_u.frozen_copy()

    buffer = ReplayBuffer(config.buffer_capacity, config.warmup)
    # Prefill with a random feasible policy, following the environment's
    # episode structure.
    state = initial_state_fn(rng_behave)
    t_in_ep = 0
    while len(buffer) < config.warmup:
        feas = cache.feasible_indices(cache.state_idx(state))
        j = int(feas[rng_behave.integers(feas.size)])
        action = FactoredAction(parts=tuple(int(v)
                                            for v in cache.action_tuples[j]))
        tau = sample_step(spec, state, action, rng_behave, cache)
        buffer.push(tau)
        state = tau.next_state
        t_in_ep += 1
        if t_in_ep >= episode_length:
            state = initial_state_fn(rng_behave)
            t_in_ep = 0

    returns: list[float] = []
    step = 0
    adam_kw = dict(lr=config.learning_rate, beta1=config.adam_beta1,
                   beta2=config.adam_beta2, eps=config.adam_eps)
    for _ep in range(episodes):
        state = initial_state_fn(rng_behave)
        ep_return = 0.0
        for _t in range(episode_length):
            eps = _epsilon(config, step)
            step += 1
            action = _select_action(theta, enc, cache, state, eps, rng_behave)
            tau = sample_step(spec, state, action, rng_behave, cache)
            buffer.push(tau)
            ep_return += float(tau.rewards.sum())

            batch = batch_arrays(spec, cache,
                                 buffer.sample(rng_replay, config.batch_size))
            if use_sub:
                lam_idx = rng_lam.integers(len(grid), size=batch.size)
                lam_batch = grid.multipliers[lam_idx]
                _, g_u = wcdqn_subagent_loss(spec, enc, batch, lam_batch,
                                             theta_u, theta_u_minus)
                adam_step(theta_u, g_u, **adam_kw)
            if algo == "wcdqn":
                b_update(b_table, tau.state.exo, tau.rhs,
                         tau.next_state.exo, spec.discount, eta)

            online = theta if algo == "double_dqn" else None
            y = dqn_target_batch(spec, cache, enc, batch, theta_minus,
                                 online_params=online)
            feats = enc.encode_full(batch.endo, batch.w)
            if use_penalty:
                y_u = wcdqn_bound_targets(spec, cache, enc, batch,
                                          theta_u_minus, b_table.estimates,
                                          grid)
                _, g = wcdqn_main_loss(theta, feats, batch.a_idx, y, y_u,
                                       config.kappa_u)
            else:
                _, g = td_loss_and_grad(theta, feats, batch.a_idx, y)
            adam_step(theta, g, **adam_kw)

            if step % config.c_target == 0:
                theta_minus = theta.frozen_copy()
                if use_sub:
                    theta_u_minus = theta_u.frozen_copy()
            state = tau.next_state
        returns.append(ep_return)

    return NeuralRunResult(
        returns=returns, theta=theta, theta_u=theta_u,
        b_estimates=None if b_table is None else b_table.estimates.copy(),
        steps=step)


def train_dqn(build, episodes, episode_length, config, seed,
              **kw) -> NeuralRunResult:
    return train_neural(build, episodes, episode_length, config, seed,
                        algo="dqn", **kw)


def train_double_dqn(build, episodes, episode_length, config, seed,
                     **kw) -> NeuralRunResult:
    return train_neural(build, episodes, episode_length, config, seed,
                        algo="double_dqn", **kw)


def train_wcdqn(build, episodes, episode_length, config, seed,
                **kw) -> NeuralRunResult:
    return train_neural(build, episodes, episode_length, config, seed,
                        algo="wcdqn", **kw)


# ---------------------------------------------------------------------------
# Checkpoints: flat binary with a versioned header.

_MAGIC = b"WCQN"
_VERSION = 1


def save_checkpoint(path, params: MlpParams, env_id: str, seed: int) -> None:
    dims = params.dims
    env_bytes = env_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IqH", _VERSION, seed, len(env_bytes)))
        fh.write(env_bytes)
        fh.write(struct.pack("<H", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(b, dtype=np.float64).tobytes())


def load_checkpoint(path) -> tuple[MlpParams, str, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a wcmdp checkpoint")
        version, seed, env_len = struct.unpack("<IqH", fh.read(14))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        env_id = fh.read(env_len).decode("utf-8")
        (n_dims,) = struct.unpack("<H", fh.read(2))
        dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(fh.read(8 * fan_in * fan_out),
                              dtype=np.float64).reshape(fan_in, fan_out)
            b = np.frombuffer(fh.read(8 * fan_out), dtype=np.float64)
            weights.append(w.copy())
            biases.append(b.copy())
    return MlpParams(weights=weights, biases=biases), env_id, seed
