"""LineWorld: a desk-scale continuous-state environment.

The agent moves on the segment [-1, 1] in fixed steps of 0.1 (actions left
and right), earns 1.0 on entering the goal region around +0.8, and episodes
end on goal entry or after 40 steps.  The goal test uses a strict radius
shrunk by 1e-9 so accumulated float steps land just outside the boundary
instead of terminating one step early.
"""

from dataclasses import dataclass

import numpy as np

from .mdp import FiniteMDP, RewardTable, boltzmann_action_probs, value_iteration


@dataclass(frozen=True)
class LineWorld:
    step: float = 0.1
    goal: float = 0.8
    goal_radius: float = 0.1
    horizon: int = 40
    start_low: float = -1.0
    start_high: float = 0.5
    n_actions: int = 2  # 0 = left, 1 = right

    def in_goal(self, x):
        return abs(x - self.goal) < self.goal_radius - 1e-9

    def move(self, x, action):
        delta = self.step if action == 1 else -self.step
        return float(np.clip(x + delta, -1.0, 1.0))

    def reward(self, x):
        return 1.0 if self.in_goal(x) else 0.0

    def sample_start(self, rng):
        return float(rng.uniform(self.start_low, self.start_high))

    def features(self, x):
        return np.array([x], dtype=float)


@dataclass(frozen=True)
class ContinuousDemonstration:
    """Ordered (x, action, x') transitions with real-valued positions."""

    transitions: tuple
    env_id: str = "lineworld"
    alpha: float = 0.0
    seed: int = 0
    episode_starts: tuple = ()

    @property
    def states(self):
        return np.array([t[0] for t in self.transitions], dtype=float)

    @property
    def actions(self):
        return np.array([t[1] for t in self.transitions], dtype=int)

    @property
    def next_states(self):
        return np.array([t[2] for t in self.transitions], dtype=float)

    def __len__(self):
        return len(self.transitions)

    def episodes(self):
        """Split the transition list back into per-episode tuples."""
        bounds = list(self.episode_starts) + [len(self.transitions)]
        return [self.transitions[bounds[i]:bounds[i + 1]]
                for i in range(len(bounds) - 1)]


def lineworld_rollout(policy, n_episodes, seed, env=None, start=None):
    """Roll out ``policy`` (x -> action probabilities) for whole episodes.

    Returns ``(demonstration, returns)`` where returns holds one episode
    total each.  ``start`` pins every episode's initial position; otherwise
    starts are drawn uniformly from the environment's start range.
    """
    env = env or LineWorld()
    rng = np.random.default_rng(seed)
    transitions = []
    starts = []
    returns = []
    for _ in range(n_episodes):
        starts.append(len(transitions))
        x = env.sample_start(rng) if start is None else float(start)
        total = 0.0
        for _ in range(env.horizon):
            probs = np.asarray(policy(x), dtype=float)
            a = int(rng.choice(env.n_actions, p=probs))
            x2 = env.move(x, a)
            transitions.append((x, a, x2))
            total += env.reward(x2)
            x = x2
            if env.in_goal(x):
                break
        returns.append(total)
    demo = ContinuousDemonstration(transitions=tuple(transitions), seed=seed,
                                   episode_starts=tuple(starts))
    return demo, np.array(returns)


def discretize_lineworld(env=None, n_points=41, discount=0.9):
    """Finite MDP on an evenly spaced position grid (step 0.05 by default).

    The 0.1 action step is an exact multiple of the grid spacing, so the
    discretized dynamics are exact, and goal-region grid points are terminal
    with reward 1.
    """
    env = env or LineWorld()
    grid = np.linspace(-1.0, 1.0, n_points)
    spacing = grid[1] - grid[0]
    shift = int(round(env.step / spacing))
    n = n_points
    terminal = np.array([env.in_goal(x) for x in grid])
    p = np.zeros((n, 2, n))
    for i in range(n):
        for a, sign in enumerate((-1, 1)):
            j = int(np.clip(i + sign * shift, 0, n - 1))
            if terminal[i]:
                j = i
            p[i, a, j] = 1.0
    initial = (~terminal).astype(float)
    initial /= initial.sum()
    mdp = FiniteMDP(n_states=n, n_actions=2, transitions=p, discount=discount,
                    terminal_mask=terminal, initial_dist=initial)
    reward = RewardTable.from_state_rewards(terminal.astype(float) * 1.0, 2)
    return mdp, reward, grid


def lineworld_expert_policy(alpha=30.0, env=None, n_points=41, discount=0.9):
    """Boltzmann policy over the value-iteration Q of the discretized world.

    A continuous position maps to its nearest grid point.  The default
    rationality is high enough that the expert reliably reaches the goal
    within the horizon from anywhere in the start range.
    """
    env = env or LineWorld()
    mdp, reward, grid = discretize_lineworld(env, n_points, discount)
    q = value_iteration(mdp, reward, tol=1e-10)

    def policy(x):
        i = int(np.argmin(np.abs(grid - x)))
        return boltzmann_action_probs(q[i], alpha)

    return policy


def generate_lineworld_demos(n_episodes, seed, alpha=30.0, env=None):
    """Expert demonstrations plus the expert's per-episode returns."""
    policy = lineworld_expert_policy(alpha=alpha, env=env)
    demo, returns = lineworld_rollout(policy, n_episodes, seed, env=env)
    return ContinuousDemonstration(transitions=demo.transitions,
                                   alpha=alpha, seed=seed,
                                   episode_starts=demo.episode_starts), returns


def save_continuous_demonstration(demo, path):
    import json
    payload = {
        "schema_version": 1,
        "env_id": demo.env_id,
        "alpha": demo.alpha,
        "seed": demo.seed,
        "episode_starts": list(demo.episode_starts),
        "transitions": [[float(x), int(a), float(x2)]
                        for x, a, x2 in demo.transitions],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_continuous_demonstration(path):
    import json
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != 1:
        raise ValueError("unsupported demonstration schema_version")
    return ContinuousDemonstration(
        transitions=tuple((float(x), int(a), float(x2))
                          for x, a, x2 in payload["transitions"]),
        env_id=payload["env_id"], alpha=payload["alpha"],
        seed=payload["seed"],
        episode_starts=tuple(payload.get("episode_starts", ())))
