"""Finite MDP kernel: gridworlds, forward planning, and expert rollouts.

States are flat integer indices; transitions live in a dense tensor
``p[s, a, s']``.  Terminal states self-loop in the stored tensor, and the
planning operators treat them as collecting their reward once with no
continuation, so ``Q(s, a) = R(s, a)`` at terminal ``s``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-9


class ConstructionError(ValueError):
    """Invalid environment specification (bad cell, discount, or row)."""


@dataclass(frozen=True)
class FiniteMDP:
    """Tabular MDP with dense transition tensor ``p[s, a, s']``."""

    n_states: int
    n_actions: int
    transitions: np.ndarray
    discount: float
    terminal_mask: np.ndarray
    initial_dist: np.ndarray
    feature_map: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=float)
        if p.shape != (self.n_states, self.n_actions, self.n_states):
            raise ConstructionError("transition tensor shape mismatch")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_TOL):
            raise ConstructionError("transition rows must be probabilities summing to 1")
        if not 0.0 < self.discount < 1.0:
            raise ConstructionError("discount must lie in (0, 1)")
        for s in np.flatnonzero(self.terminal_mask):
            if not np.all(p[s, :, s] == 1.0):
                raise ConstructionError(f"terminal state {s} must self-loop")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "terminal_mask",
                           np.asarray(self.terminal_mask, dtype=bool))
        object.__setattr__(self, "initial_dist",
                           np.asarray(self.initial_dist, dtype=float))
        # Derived views used on hot paths, precomputed once.
        object.__setattr__(self, "flat_transitions",
                           p.reshape(self.n_states * self.n_actions,
                                     self.n_states))
        object.__setattr__(self, "continuation_mask",
                           1.0 - self.terminal_mask.astype(float))


@dataclass(frozen=True)
class RewardTable:
    """Flat reward vector in state-major (state, action) order."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=float).ravel())

    def as_matrix(self, mdp):
        if self.values.size != mdp.n_states * mdp.n_actions:
            raise ValueError("reward length must be n_states * n_actions")
        return self.values.reshape(mdp.n_states, mdp.n_actions)

    @staticmethod
    def from_state_rewards(state_rewards, n_actions):
        """Replicate a per-state reward across all actions."""
        r = np.asarray(state_rewards, dtype=float)
        return RewardTable(np.repeat(r, n_actions))


@dataclass(frozen=True)
class Demonstration:
    """Ordered expert transitions plus the metadata that generated them."""

    transitions: tuple
    env_id: str = ""
    alpha: float = 0.0
    seed: int = 0

    @property
    def states(self):
        return np.array([t[0] for t in self.transitions])

    @property
    def actions(self):
        return np.array([t[1] for t in self.transitions], dtype=int)

    @property
    def next_states(self):
        return np.array([t[2] for t in self.transitions])

    def __len__(self):
        return len(self.transitions)

    def validate(self, mdp):
        for s, a, s2 in self.transitions:
            if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions
                    and 0 <= s2 < mdp.n_states):
                raise ValueError(f"transition ({s},{a},{s2}) out of bounds")
            if mdp.transitions[s, a, s2] <= 0:
                raise ValueError(f"transition ({s},{a},{s2}) has probability 0")
        return self


def save_demonstration(demo, path):
    """Write a demonstration JSON file (schema_version 1)."""
    payload = {
        "schema_version": 1,
        "env_id": demo.env_id,
        "alpha": demo.alpha,
        "seed": demo.seed,
        "transitions": [list(t) for t in demo.transitions],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_demonstration(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != 1:
        raise ValueError("unsupported demonstration schema_version")
    transitions = tuple(tuple(t) for t in payload["transitions"])
    return Demonstration(transitions=transitions, env_id=payload["env_id"],
                         alpha=payload["alpha"], seed=payload["seed"])


# Actions are up, down, left, right on a (row, col) grid; moving into a
# wall keeps the agent in place.
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def build_gridworld(width, height, goal_cells=(), hazard_cells=(),
                    step_reward=0.0, discount=0.9, initial_cell=0):
    """Deterministic four-action gridworld with state-only rewards.

    ``goal_cells`` and ``hazard_cells`` are sequences of ``(cell, reward)``
    pairs on flat row-major cell indices; goal cells are terminal.  Returns
    ``(mdp, reward_table)`` with the reward replicated across actions.
    """
    n_states = width * height
    n_actions = 4
    for cell, _ in list(goal_cells) + list(hazard_cells):
        if not 0 <= cell < n_states:
            raise ConstructionError(f"cell {cell} outside {width}x{height} grid")
    if not 0 <= initial_cell < n_states:
        raise ConstructionError("initial cell out of bounds")

    terminal = np.zeros(n_states, dtype=bool)
    state_reward = np.full(n_states, float(step_reward))
    for cell, r in goal_cells:
        terminal[cell] = True
        state_reward[cell] = r
    for cell, r in hazard_cells:
        state_reward[cell] = r

    p = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        row, col = divmod(s, width)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            if terminal[s]:
                p[s, a, s] = 1.0
                continue
            r2, c2 = row + dr, col + dc
            if 0 <= r2 < height and 0 <= c2 < width:
                p[s, a, r2 * width + c2] = 1.0
            else:
                p[s, a, s] = 1.0

    initial = np.zeros(n_states)
    initial[initial_cell] = 1.0
    mdp = FiniteMDP(n_states=n_states, n_actions=n_actions, transitions=p,
                    discount=discount, terminal_mask=terminal,
                    initial_dist=initial)
    return mdp, RewardTable.from_state_rewards(state_reward, n_actions)


def paper_gridworld(size=3, discount=0.9):
    """The illustrative square gridworld scaled to ``size``.

    Start in the top-left corner; the top-right corner is terminal with
    reward +10; the top-centre tile is an unsafe state with reward -30.
    """
    return build_gridworld(
        width=size, height=size,
        goal_cells=[(size - 1, 10.0)],
        hazard_cells=[(size // 2, -30.0)],
        step_reward=0.0, discount=discount, initial_cell=0)


def bellman_backup(mdp, reward_matrix, q):
    """One optimality Bellman sweep; terminal states keep Q = R."""
    v = q.max(axis=1)
    cont = mdp.flat_transitions @ v
    cont = cont.reshape(mdp.n_states, mdp.n_actions)
    return reward_matrix + mdp.discount * mdp.continuation_mask[:, None] * cont


def greedy_policy_value(mdp, reward_matrix, policy):
    """Exact Q of a deterministic ``policy`` via one linear solve."""
    idx = np.arange(mdp.n_states)
    p_pi = mdp.transitions[idx, policy, :]
    a_mat = np.eye(mdp.n_states) - mdp.discount * mdp.continuation_mask[:, None] * p_pi
    r_pi = reward_matrix[idx, policy]
    v_pi = np.linalg.solve(a_mat, r_pi)
    cont = (mdp.flat_transitions @ v_pi).reshape(mdp.n_states, mdp.n_actions)
    return reward_matrix + mdp.discount * mdp.continuation_mask[:, None] * cont


def value_iteration(mdp, reward, tol=1e-8, q_init=None):
    """Optimal Q-table satisfying the Bellman equation to within ``tol``.

    Runs policy iteration (greedy improvement against exact policy-value
    solves), which lands on the optimal policy's fixed point in a handful
    of linear solves; since the returned Q depends only on that final
    policy, warm starts change speed but never the result.  Falls back to
    plain Bellman sweeps if the improvement loop fails to settle.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    r_mat = reward.as_matrix(mdp) if isinstance(reward, RewardTable) \
        else np.asarray(reward, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    q = np.zeros_like(r_mat) if q_init is None else \
        np.asarray(q_init, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    policy = q.argmax(axis=1)
    for _ in range(mdp.n_states * mdp.n_actions + 2):
        q = greedy_policy_value(mdp, r_mat, policy)
        residual = np.max(np.abs(bellman_backup(mdp, r_mat, q) - q))
        if residual < tol:
            return q
        policy = q.argmax(axis=1)
    for _ in range(100_000):
        q_next = bellman_backup(mdp, r_mat, q)
        delta = np.max(np.abs(q_next - q))
        q = q_next
        if delta < tol:
            return q
    raise RuntimeError("value iteration failed to converge")


def boltzmann_action_probs(q_row, alpha):
    """Softmax of alpha * Q over one state's actions, in log space."""
    z = alpha * q_row
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def boltzmann_expert_rollout(mdp, q, alpha, n_steps, seed):
    """Sample ``n_steps`` transitions with p(a|s) proportional to exp(alpha Q).

    Episodes restart from the initial distribution whenever a terminal state
    is reached, so the step budget is always met.  Deterministic given seed.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    rng = np.random.default_rng(seed)
    q = np.asarray(q, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    transitions = []
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    while len(transitions) < n_steps:
        if mdp.terminal_mask[s]:
            s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
            continue
        probs = boltzmann_action_probs(q[s], alpha)
        a = int(rng.choice(mdp.n_actions, p=probs))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transitions[s, a]))
        transitions.append((s, a, s2))
        s = s2
    return Demonstration(transitions=tuple(transitions), alpha=alpha, seed=seed)


def greedy_rollout(mdp, q, n_steps, seed):
    """Argmax-policy rollout with the same restart and rng conventions.

    Actions are drawn through the same one-uniform-per-step ``rng.choice``
    path (with a one-hot distribution), so the stream stays aligned with
    ``boltzmann_expert_rollout`` at matched seeds.
    """
    rng = np.random.default_rng(seed)
    q = np.asarray(q, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    transitions = []
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    while len(transitions) < n_steps:
        if mdp.terminal_mask[s]:
            s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
            continue
        onehot = np.zeros(mdp.n_actions)
        onehot[np.argmax(q[s])] = 1.0
        a = int(rng.choice(mdp.n_actions, p=onehot))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transitions[s, a]))
        transitions.append((s, a, s2))
        s = s2
    return Demonstration(transitions=tuple(transitions), alpha=float("inf"),
                         seed=seed)
