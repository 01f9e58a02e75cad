"""Reward-space baselines: random-walk Metropolis with an inner forward
planner per proposal, and its gradient-based HMC variant.

The vanilla kernel re-solves the forward planning problem (value iteration,
warm-started from the previous proposal's solution) at every step.  The HMC
variant instead solves the linear policy-evaluation system under the current
greedy policy, holding that policy fixed through each trajectory (its
derivative with respect to the reward is zero almost everywhere) and
refreshing it after every transition.
"""

import numpy as np
from scipy.linalg import lu_factor

from . import autodiff as ad
from .finite_posterior import LOG_2PI, log_likelihood, normal_log_density
from .mdp import value_iteration
from .samplers import SamplerConfig, nuts_sample, rw_metropolis


def _reward_matrix(r, spec):
    mdp = spec.mdp
    r = np.asarray(r, dtype=float).ravel()
    if spec.value_space == "state_only":
        if r.size != mdp.n_states:
            raise ValueError("expected one reward per state")
        return np.repeat(r, mdp.n_actions).reshape(mdp.n_states, mdp.n_actions)
    if r.size != mdp.n_states * mdp.n_actions:
        raise ValueError("expected one reward per state-action pair")
    return r.reshape(mdp.n_states, mdp.n_actions)


def log_posterior_policywalk(r, spec, tol=1e-10, q_init=None):
    """Unnormalized log posterior over rewards with an inner planning solve.

    Returns ``(log_density, q_table)`` where the Q-table is the optimal
    value of the proposed reward, the auxiliary output of the chain.
    """
    q = value_iteration(spec.mdp, _reward_matrix(r, spec), tol=tol,
                        q_init=q_init)
    lp = normal_log_density(r, spec.prior) + log_likelihood(q, spec.demos,
                                                            spec.alpha)
    return lp, q


def make_policywalk_logp(spec, tol=1e-10, warm_start=True):
    """Closure ``r -> (logp, q_flat)`` with a warm-started inner solver."""
    state = {"q": None}

    def logp(r):
        lp, q = log_posterior_policywalk(
            r, spec, tol=tol, q_init=state["q"] if warm_start else None)
        if warm_start:
            state["q"] = q
        return lp, q.ravel()

    return logp


def policywalk_vanilla(spec, proposal_scale, config):
    """Random-walk Metropolis over rewards; aux carries the Q chain."""
    return rw_metropolis(make_policywalk_logp(spec), proposal_scale, config)


class _FrozenPolicySolver:
    """Frozen-greedy-policy surrogate used for gradients only.

    ``refresh`` re-plans at a reward point and refactors the linear
    policy-evaluation system; between refreshes the map from reward to Q is
    linear with the policy's transition kernel held fixed, which is the
    almost-everywhere-exact gradient of the true posterior.
    """

    def __init__(self, spec, tol=1e-10):
        self.spec = spec
        self.tol = tol
        self.policy = None
        self.lu = None
        self._warm_q = None

    def plan(self, r):
        """Exact forward planning at ``r``, warm-started."""
        q = value_iteration(self.spec.mdp, _reward_matrix(r, self.spec),
                            tol=self.tol, q_init=self._warm_q)
        self._warm_q = q
        return q

    def refresh(self, r):
        mdp = self.spec.mdp
        policy = self.plan(r).argmax(axis=1)
        if self.policy is not None and np.array_equal(policy, self.policy):
            return False
        self.policy = policy
        p_pi = mdp.transitions[np.arange(mdp.n_states), policy, :]
        a_mat = np.eye(mdp.n_states) \
            - mdp.discount * mdp.continuation_mask[:, None] * p_pi
        self.lu = lu_factor(a_mat)
        return True

    def logp_tape(self, theta):
        spec = self.spec
        mdp = spec.mdp
        n_states, n_actions = mdp.n_states, mdp.n_actions
        gamma_mask = mdp.discount * mdp.continuation_mask[:, None]
        if spec.value_space == "state_only":
            r_pi = theta
            r2d = None
        else:
            r2d = ad.reshape(theta, (n_states, n_actions))
            flat_idx = np.arange(n_states) * n_actions + self.policy
            r_pi = ad.gather(theta, flat_idx)
        v_pi = ad.solve_fixed(self.lu, r_pi)
        cont = ad.reshape(ad.matvec(mdp.flat_transitions, v_pi),
                          (n_states, n_actions))
        if spec.value_space == "state_only":
            q2d = ad.reshape(theta, (n_states, 1)) + ad.mul(gamma_mask, cont)
        else:
            q2d = r2d + ad.mul(gamma_mask, cont)

        mean, std = spec.prior.expanded(spec.reward_dim)
        z = (theta - mean) / std
        lp = -0.5 * ad.vsum(ad.mul(z, z)) \
            - float(np.sum(np.log(std)) + 0.5 * mean.size * LOG_2PI)

        demos = spec.demos
        if len(demos) > 0:
            states, actions = demos.states.astype(int), demos.actions
            rows = ad.gather(q2d, states)
            scaled = spec.alpha * rows
            lse = ad.logsumexp(scaled, axis=-1)
            flat = ad.reshape(scaled, (len(states) * n_actions,))
            chosen = ad.gather(flat, np.arange(len(states)) * n_actions + actions)
            lp = lp + ad.vsum(chosen) - ad.vsum(lse)
        return lp, q2d.value.ravel().copy()


def make_policywalk_hmc_logp(spec, tol=1e-10):
    """Closure ``r -> (logp, grad, q_flat)`` for HMC over rewards.

    The density is the exact reward posterior (inner forward-planning solve
    per evaluation, warm-started), so acceptance bookkeeping targets the
    true posterior.  The gradient comes from the frozen-greedy-policy
    linear solve, exact almost everywhere; its policy is re-planned by the
    returned ``post_step`` after each transition, never inside leapfrog
    steps.
    """
    solver = _FrozenPolicySolver(spec, tol=tol)

    def logp(r):
        r = np.asarray(r, dtype=float)
        if solver.lu is None:
            solver.refresh(r)
        tape = ad.Tape()
        x = tape.leaf(r)
        out, _ = solver.logp_tape(x)
        if not np.isfinite(out.value):
            ad.replay_nonfinite(lambda: solver.logp_tape(ad.Tape().leaf(r)))
        grad = tape.gradient(out, x)
        q_star = solver.plan(r)
        lp = normal_log_density(r, spec.prior) \
            + log_likelihood(q_star, spec.demos, spec.alpha)
        return lp, grad, q_star.ravel()

    def post_step(r):
        return solver.refresh(r)

    logp.solver = solver
    return logp, post_step


def policywalk_hmc(spec, config):
    """NUTS over rewards with the frozen-policy linear solve."""
    logp, post_step = make_policywalk_hmc_logp(spec)
    return nuts_sample(logp, config, post_step=post_step)
