"""Log posterior over value vectors for finite MDPs.

The chain walks value space (a Q-table entry per (state, action), or a
state-value entry per state when rewards are state-only) and recovers the
reward at each step through the Bellman inversion R = (I - gamma*Pbar) Q,
where Pbar composes the environment transitions with the softmax-greedy
policy of the proposed values.  Terminal states collect their reward once,
so their continuation rows are masked out of the inversion; this matches
the forward planner's convention and makes the value-iteration round trip
exact.

Includes the extension to unknown transition probabilities (joint sampling
of values and row-softmax transition logits under a per-row Dirichlet
prior) and the empirical-count transition shortcut.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .mdp import Demonstration, FiniteMDP, RewardTable

LOG_2PI = float(np.log(2.0 * np.pi))


class UnobservedPairError(KeyError):
    """Raised when querying an (s, a) pair absent from the demonstrations."""


@dataclass(frozen=True)
class NormalPrior:
    """Independent normal prior per reward entry; fields broadcast."""

    mean: float | np.ndarray = 0.0
    std: float | np.ndarray = 10.0

    def expanded(self, dim):
        mean = np.broadcast_to(np.asarray(self.mean, dtype=float), (dim,))
        std = np.broadcast_to(np.asarray(self.std, dtype=float), (dim,))
        if np.any(std <= 0):
            raise ValueError("prior std must be positive")
        return mean, std


def normal_log_density(x, prior):
    """Sum of independent normal log densities of ``x`` under ``prior``."""
    x = np.asarray(x, dtype=float)
    mean, std = prior.expanded(x.size)
    z = (x - mean) / std
    return float(-0.5 * np.sum(z * z) - np.sum(np.log(std)) - 0.5 * x.size * LOG_2PI)


@dataclass(frozen=True)
class FinitePosteriorSpec:
    """Everything the finite-space posterior needs.

    ``value_space`` selects the sampled parameterization: one value per
    (state, action) pair, or one state value per state (for state-only
    rewards).  ``det_mode`` controls the change-of-variables determinant:
    'exact' differentiates through the softmax policy, 'detached' includes
    the hard-greedy policy's determinant as a cached constant with zero
    gradient, 'omitted' drops the term.
    """

    mdp: FiniteMDP
    demos: Demonstration
    prior: NormalPrior = field(default_factory=NormalPrior)
    alpha: float = 3.0
    alpha_bar: float = 100.0
    det_mode: str = "detached"
    value_space: str = "state_action"
    prior_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.det_mode not in ("exact", "detached", "omitted"):
            raise ValueError(f"unknown det_mode {self.det_mode!r}")
        if self.value_space not in ("state_action", "state_only"):
            raise ValueError(f"unknown value_space {self.value_space!r}")
        if self.alpha < 0 or self.alpha_bar <= 0:
            raise ValueError("alpha must be >= 0 and alpha_bar > 0")

    @property
    def dim(self):
        if self.value_space == "state_only":
            return self.mdp.n_states
        return self.mdp.n_states * self.mdp.n_actions

    @property
    def reward_dim(self):
        return self.dim


def policy_from_q(q, alpha_bar):
    """Softmax policy rows pi(a'|s') proportional to exp(alpha_bar * Q)."""
    if alpha_bar <= 0:
        raise ValueError("alpha_bar must be positive")
    q = np.atleast_2d(np.asarray(q, dtype=float))
    z = alpha_bar * q
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def greedy_policy_matrix(q):
    """One-hot rows at the per-state argmax of Q."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    out = np.zeros_like(q)
    out[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return out


def joint_kernel(mdp, policy, zero_terminal_rows=False):
    """Compose transitions with a policy into the joint state-action kernel.

    Returns the (|S||A|, |S||A|) row-stochastic matrix with entries
    P(s'|s,a) * pi(a'|s').  With ``zero_terminal_rows`` the rows of terminal
    (s, a) pairs are zeroed, giving the termination-masked kernel used in
    the Bellman inversion.
    """
    policy = np.asarray(policy, dtype=float)
    if np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("policy rows must sum to 1")
    n_sa = mdp.n_states * mdp.n_actions
    pbar = np.einsum("qs,sa->qsa", mdp.flat_transitions, policy)
    pbar = pbar.reshape(n_sa, n_sa)
    if zero_terminal_rows:
        row_mask = np.repeat(mdp.continuation_mask, mdp.n_actions)
        pbar = pbar * row_mask[:, None]
    return pbar


def reward_from_q(q, pbar, discount):
    """Bellman inversion R = Q - discount * (Pbar @ Q)."""
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    q = np.asarray(q, dtype=float).ravel()
    return RewardTable(q - discount * (pbar @ q))


def log_det_term(pbar, discount):
    """log det(I - discount * Pbar) via LU factorization.

    Strictly positive for a (sub)stochastic kernel and discount < 1; a
    non-positive determinant signals corrupted input and raises.
    """
    a_mat = np.eye(pbar.shape[0]) - discount * pbar
    sign, logabs = np.linalg.slogdet(a_mat)
    if sign <= 0:
        raise np.linalg.LinAlgError("det(I - discount*Pbar) not positive")
    return float(logabs)


def log_likelihood(q, demos, alpha):
    """Boltzmann partial log likelihood of the demonstrated actions.

    Sums alpha*Q(s,a) - logsumexp_a' alpha*Q(s,a') over demonstration pairs;
    the transition factor cancels in the reward posterior and is excluded.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    states, actions = demos.states.astype(int), demos.actions
    if len(states) == 0:
        return 0.0
    if states.max() >= q.shape[0] or actions.max() >= q.shape[1]:
        raise ValueError("demonstration indices out of bounds")
    z = alpha * q[states]
    hi = z.max(axis=1, keepdims=True)
    lse = hi[:, 0] + np.log(np.exp(z - hi).sum(axis=1))
    return float(np.sum(z[np.arange(len(states)), actions] - lse))


class _DetCache:
    """Hard-greedy-policy determinants keyed by the argmax policy tuple."""

    def __init__(self):
        self.entries = {}
        self.recomputes = 0

    def lookup(self, key, compute):
        if key not in self.entries:
            self.entries[key] = compute()
            self.recomputes += 1
        return self.entries[key]


def _softmax_rows_tape(x, n_rows):
    lse = ad.logsumexp(x, axis=-1)
    return ad.exp(x - ad.reshape(lse, (n_rows, 1)))


def _demo_weights(spec):
    """Visit counts: per flat (s, a) pair and per state.

    The Boltzmann log likelihood is a weighted sum of Q entries minus a
    weighted sum of per-state logsumexps, so repeated demo pairs collapse
    into these counts.
    """
    mdp = spec.mdp
    states = spec.demos.states.astype(int)
    actions = spec.demos.actions
    if len(states) and (states.max() >= mdp.n_states
                        or actions.max() >= mdp.n_actions):
        raise ValueError("demonstration indices out of bounds")
    w_sa = np.zeros(mdp.n_states * mdp.n_actions)
    np.add.at(w_sa, states * mdp.n_actions + actions, 1.0)
    w_s = np.zeros(mdp.n_states)
    np.add.at(w_s, states, 1.0)
    return w_sa, w_s


def _likelihood_tape(q2d, q_flat, spec, weights):
    if len(spec.demos) == 0:
        return None
    w_sa, w_s = weights
    lse = ad.logsumexp(spec.alpha * q2d, axis=-1)
    return spec.alpha * ad.dot(w_sa, q_flat) - ad.dot(w_s, lse)


def _prior_tape(r_flat, spec):
    mean, std = spec.prior.expanded(spec.reward_dim)
    if spec.prior_mask is not None:
        idx = np.flatnonzero(spec.prior_mask)
        r_flat = ad.gather(r_flat, idx)
        mean, std = mean[idx], std[idx]
    const = -np.sum(np.log(std)) - 0.5 * mean.size * LOG_2PI
    if np.all(std == std.flat[0]):
        centered = r_flat - mean
        return (-0.5 / float(std.flat[0]) ** 2) * ad.dot(centered, centered) \
            + const
    z = (r_flat - mean) / std
    return -0.5 * ad.vsum(ad.mul(z, z)) + const


def _det_state_only_tape(pi, mdp, spec, cache):
    n_states, n_actions = mdp.n_states, mdp.n_actions
    mask = mdp.continuation_mask
    if spec.det_mode == "detached":
        amax = tuple(int(i) for i in pi.value.argmax(axis=1))

        def compute():
            p_pi = mdp.transitions[np.arange(n_states), list(amax), :]
            return log_det_term(mask[:, None] * p_pi, mdp.discount)

        return cache.lookup(amax, compute)
    # exact: soft policy kernel assembled on tape
    pi_flat = ad.reshape(pi, (n_states * n_actions,))
    p_pi = None
    for a in range(n_actions):
        col = ad.reshape(ad.gather(pi_flat, np.arange(n_states) * n_actions + a),
                         (n_states, 1))
        term = ad.mul(col, mdp.transitions[:, a, :])
        p_pi = term if p_pi is None else p_pi + term
    masked = ad.mul(mask[:, None], p_pi)
    return ad.logdet_shrink(masked, mdp.discount)


def _det_state_action_tape(pi, mdp, spec, cache):
    n_states, n_actions = mdp.n_states, mdp.n_actions
    n_sa = n_states * n_actions
    row_mask = np.repeat(mdp.continuation_mask, n_actions)
    if spec.det_mode == "detached":
        amax = tuple(int(i) for i in pi.value.argmax(axis=1))

        def compute():
            pbar = np.zeros((n_sa, n_sa))
            cols = np.arange(n_states) * n_actions + np.array(amax)
            pbar[:, cols] = mdp.flat_transitions
            return log_det_term(row_mask[:, None] * pbar, mdp.discount)

        return cache.lookup(amax, compute)
    block = np.zeros((n_states, n_sa))
    for s in range(n_states):
        block[s, s * n_actions:(s + 1) * n_actions] = 1.0
    weights = ad.mul(block, ad.reshape(pi, (1, n_sa)))
    pbar = ad.matmul(mdp.flat_transitions, weights)
    masked = ad.mul(row_mask[:, None], pbar)
    return ad.logdet_shrink(masked, mdp.discount)


def _posterior_tape(theta, spec, cache, weights):
    """Shared forward pass; returns (logp Var, reward values ndarray)."""
    mdp = spec.mdp
    n_states, n_actions = mdp.n_states, mdp.n_actions
    gamma_mask = mdp.discount * mdp.continuation_mask[:, None]

    if spec.value_space == "state_only":
        v = theta
        cont = ad.reshape(ad.matvec(mdp.flat_transitions, v),
                          (n_states, n_actions))
        g_cont = ad.mul(gamma_mask, cont)
        pi = _softmax_rows_tape(spec.alpha_bar * g_cont, n_states)
        r_vec = v - ad.vsum(ad.mul(pi, g_cont), axis=1)
        q2d = ad.reshape(r_vec, (n_states, 1)) + g_cont
        q_flat = ad.reshape(q2d, (n_states * n_actions,))
        r_flat = r_vec
    else:
        q2d = ad.reshape(theta, (n_states, n_actions))
        q_flat = theta
        pi = _softmax_rows_tape(spec.alpha_bar * q2d, n_states)
        ev = ad.vsum(ad.mul(pi, q2d), axis=1)
        cont = ad.reshape(ad.matvec(mdp.flat_transitions, ev),
                          (n_states, n_actions))
        r2d = q2d - ad.mul(gamma_mask, cont)
        r_flat = ad.reshape(r2d, (n_states * n_actions,))

    logp = _prior_tape(r_flat, spec)
    if spec.det_mode != "omitted":
        if spec.value_space == "state_only":
            det = _det_state_only_tape(pi, mdp, spec, cache)
        else:
            det = _det_state_action_tape(pi, mdp, spec, cache)
        logp = logp + det if isinstance(det, ad.Var) else logp + float(det)
    loglik = _likelihood_tape(q2d, q_flat, spec, weights)
    if loglik is not None:
        logp = logp + loglik
    return logp, r_flat.value.copy()


def log_posterior_finite(q, spec, cache=None):
    """Unnormalized log posterior at value vector ``q``.

    Returns ``(log_density, reward_table)`` where the reward is the Bellman
    inversion of ``q``, i.e. the candidate reward sample paired with it.
    """
    q = np.asarray(q, dtype=float).ravel()
    if q.size != spec.dim:
        raise ValueError(f"expected {spec.dim} values, got {q.size}")
    tape = ad.Tape()
    theta = tape.leaf(q)
    logp, rewards = _posterior_tape(theta, spec, cache or _DetCache(),
                                    _demo_weights(spec))
    if not np.isfinite(logp.value):
        ad.replay_nonfinite(lambda: _posterior_tape(
            ad.Tape().leaf(q), spec, _DetCache(), _demo_weights(spec)))
    return float(logp.value), RewardTable(rewards)


def make_finite_logp(spec):
    """Closure ``theta -> (logp, grad, rewards)`` with a per-chain det cache."""
    cache = _DetCache()
    weights = _demo_weights(spec)
    dim = spec.dim

    def logp(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != dim:
            raise ValueError(f"expected {dim} values, got {theta.size}")
        tape = ad.Tape()
        x = tape.leaf(theta)
        out, rewards = _posterior_tape(x, spec, cache, weights)
        if not np.isfinite(out.value):
            ad.replay_nonfinite(lambda: _posterior_tape(
                ad.Tape().leaf(theta), spec, cache, weights))
        return float(out.value), tape.gradient(out, x), rewards

    logp.dim = dim
    logp.det_cache = cache
    return logp


# ---------------------------------------------------------------------------
# Unknown transition probabilities
# ---------------------------------------------------------------------------

def _dirichlet_log_const(kappa, n):
    return float(gammaln(kappa * n) - n * gammaln(kappa))


def _unknown_tape(theta, spec, kappa, cache):
    """Joint posterior over values and transition logits.

    The transition rows are row-softmaxed logits; each row carries a
    Dirichlet(kappa) prior with the softmax log-Jacobian (sum of log
    probabilities) plus a standard-normal pin on each row's mean logit,
    which fixes the softmax's flat direction without altering the row's
    simplex marginal.
    """
    mdp = spec.mdp
    n_states, n_actions = mdp.n_states, mdp.n_actions
    n_sa = n_states * n_actions
    dim_v = spec.dim

    values = ad.gather(theta, np.arange(dim_v))
    logits = ad.reshape(ad.gather(theta, dim_v + np.arange(n_sa * n_states)),
                        (n_sa, n_states))
    log_p = logits - ad.reshape(ad.logsumexp(logits, axis=-1), (n_sa, 1))
    p_flat = ad.exp(log_p)

    # Dirichlet prior + softmax Jacobian + flat-direction pin
    logp = (kappa - 1.0) * ad.vsum(log_p) + n_sa * _dirichlet_log_const(kappa, n_states)
    logp = logp + ad.vsum(log_p)
    row_means = ad.vsum(logits, axis=1) / float(n_states)
    logp = logp + (-0.5) * ad.vsum(ad.mul(row_means, row_means)) \
        - 0.5 * n_sa * LOG_2PI

    gamma_mask = mdp.discount * mdp.continuation_mask[:, None]
    if spec.value_space == "state_only":
        cont = ad.reshape(ad.matvec(p_flat, values), (n_states, n_actions))
        g_cont = ad.mul(gamma_mask, cont)
        pi = _softmax_rows_tape(spec.alpha_bar * g_cont, n_states)
        r_vec = values - ad.vsum(ad.mul(pi, g_cont), axis=1)
        q2d = ad.reshape(r_vec, (n_states, 1)) + g_cont
        r_flat = r_vec
    else:
        q2d = ad.reshape(values, (n_states, n_actions))
        pi = _softmax_rows_tape(spec.alpha_bar * q2d, n_states)
        ev = ad.vsum(ad.mul(pi, q2d), axis=1)
        cont = ad.reshape(ad.matvec(p_flat, ev), (n_states, n_actions))
        r2d = q2d - ad.mul(gamma_mask, cont)
        r_flat = ad.reshape(r2d, (n_sa,))

    logp = logp + _prior_tape(r_flat, spec)

    if spec.det_mode != "omitted":
        # The determinant depends on the sampled transitions, so the greedy
        # cache does not apply here; assemble the soft kernel on tape.
        pi_flat = ad.reshape(pi, (n_states * n_actions,))
        if spec.value_space == "state_only":
            p_pi = None
            for a in range(n_actions):
                col = ad.reshape(
                    ad.gather(pi_flat, np.arange(n_states) * n_actions + a),
                    (n_states, 1))
                rows_a = ad.gather(p_flat, np.arange(n_states) * n_actions + a)
                term = ad.mul(col, rows_a)
                p_pi = term if p_pi is None else p_pi + term
            masked = ad.mul(mdp.continuation_mask[:, None], p_pi)
        else:
            block = np.zeros((n_states, n_sa))
            for s in range(n_states):
                block[s, s * n_actions:(s + 1) * n_actions] = 1.0
            weights = ad.mul(block, ad.reshape(pi, (1, n_sa)))
            pbar = ad.matmul(p_flat, weights)
            row_mask = np.repeat(mdp.continuation_mask, n_actions)
            masked = ad.mul(row_mask[:, None], pbar)
        det = ad.logdet_shrink(masked, mdp.discount)
        if spec.det_mode == "detached":
            det = ad.stop_gradient(det)
        logp = logp + det

    demos = spec.demos
    if len(demos) > 0:
        states, actions = demos.states.astype(int), demos.actions
        next_states = demos.next_states.astype(int)
        rows = ad.gather(q2d, states)
        scaled = spec.alpha * rows
        lse = ad.logsumexp(scaled, axis=-1)
        flat = ad.reshape(scaled, (len(states) * n_actions,))
        chosen = ad.gather(flat, np.arange(len(states)) * n_actions + actions)
        logp = logp + ad.vsum(chosen) - ad.vsum(lse)
        log_p_rows = ad.reshape(log_p, (n_sa * n_states,))
        trans_terms = ad.gather(
            log_p_rows, (states * n_actions + actions) * n_states + next_states)
        logp = logp + ad.vsum(trans_terms)

    aux = (r_flat.value.copy(),
           p_flat.value.reshape(n_states, n_actions, n_states).copy())
    return logp, aux


def log_posterior_unknown_transitions(q, p_params, spec, kappa=1.0):
    """Joint unnormalized log posterior over values and transition logits.

    ``p_params`` holds one row of state logits per (state, action) pair.
    Returns ``(log_density, (reward_table, transition_tensor))``.
    """
    q = np.asarray(q, dtype=float).ravel()
    p_params = np.asarray(p_params, dtype=float)
    n_sa = spec.mdp.n_states * spec.mdp.n_actions
    if q.size != spec.dim:
        raise ValueError(f"expected {spec.dim} values, got {q.size}")
    if p_params.shape != (n_sa, spec.mdp.n_states):
        raise ValueError("p_params must have shape (|S||A|, |S|)")
    tape = ad.Tape()
    theta = tape.leaf(np.concatenate([q, p_params.ravel()]))
    logp, (rewards, p_tensor) = _unknown_tape(theta, spec, kappa, _DetCache())
    return float(logp.value), (RewardTable(rewards), p_tensor)


def make_unknown_logp(spec, kappa=1.0):
    """Closure over the joint (values, transition logits) parameter vector."""
    cache = _DetCache()
    n_sa = spec.mdp.n_states * spec.mdp.n_actions
    dim = spec.dim + n_sa * spec.mdp.n_states

    def logp(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != dim:
            raise ValueError(f"expected {dim} values, got {theta.size}")
        tape = ad.Tape()
        x = tape.leaf(theta)
        out, (rewards, _) = _unknown_tape(x, spec, kappa, cache)
        return float(out.value), tape.gradient(out, x), rewards

    logp.dim = dim
    return logp


# ---------------------------------------------------------------------------
# Empirical transition shortcut
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalTransitions:
    """Count-based transition estimates restricted to observed pairs."""

    tensor: np.ndarray
    observed: np.ndarray  # (n_states, n_actions) bool

    def row(self, state, action):
        if not self.observed[state, action]:
            raise UnobservedPairError(
                f"state-action pair ({state}, {action}) never demonstrated")
        return self.tensor[state, action]

    @property
    def observed_flat(self):
        return self.observed.ravel()

    def complete(self):
        """Full tensor with self-loops filling unobserved rows, so a
        FiniteMDP can be constructed; pair with ``observed_flat`` to limit
        the prior to demonstrated pairs."""
        full = self.tensor.copy()
        n_states, n_actions = self.observed.shape
        for s in range(n_states):
            for a in range(n_actions):
                if not self.observed[s, a]:
                    full[s, a, s] = 1.0
        return full


def empirical_transition_shortcut(demos, n_states, n_actions):
    """Transition estimate p(s'|s,a) = count(s,a,s') / count(s,a)."""
    counts = np.zeros((n_states, n_actions, n_states))
    for s, a, s2 in demos.transitions:
        counts[int(s), int(a), int(s2)] += 1.0
    totals = counts.sum(axis=2)
    observed = totals > 0
    tensor = np.zeros_like(counts)
    tensor[observed] = counts[observed] / totals[observed][:, None]
    return EmpiricalTransitions(tensor=tensor, observed=observed)
