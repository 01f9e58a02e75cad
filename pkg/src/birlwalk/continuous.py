"""Posterior over MLP Q-function parameters for continuous state spaces.

The chain walks the flat parameter vector of a small multilayer perceptron
(one Q head per discrete action, elu activations).  At every evaluation the
continuous Bellman inversion produces one reward candidate per evaluation
point, R(s,a) = Q(s,a) - discount * weighted-mean over candidate successor
states of max_a' Q(s',a'), and a Gaussian-process prior scores the candidate
vector.  Successor sets come from one of three approximations: draws from a
generative model with equal weights, importance-weighted draws from a
proposal, or the observed next state as a singleton (which requires the
evaluation points to come from the dataset itself).

Successor draws are made once when the plan is built, so the target density
is a fixed deterministic approximation rather than re-randomized per step.
Transitions into terminal states carry zero continuation, matching episode
semantics where no reward follows termination.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import autodiff as ad
from .finite_posterior import LOG_2PI, UnobservedPairError


@dataclass(frozen=True)
class MLPArchitecture:
    """Fully connected Q network: input features -> hidden -> one head per action.

    Parameters flatten layer-major, weights before biases, each weight
    matrix stored (fan_in, fan_out) row-major.
    """

    input_dim: int
    hidden: tuple = (8,)
    n_actions: int = 2

    @property
    def layer_shapes(self):
        dims = [self.input_dim, *self.hidden, self.n_actions]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def param_count(self):
        return sum(i * o + o for i, o in self.layer_shapes)

    def param_slices(self):
        slices = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            w = (offset, offset + fan_in * fan_out)
            offset = w[1]
            b = (offset, offset + fan_out)
            offset = b[1]
            slices.append((w, b))
        return slices

    def init_params(self, rng, scale=0.1):
        return scale * rng.standard_normal(self.param_count)

    def forward(self, theta, x):
        """Numpy forward pass; ``x`` is (n, input_dim)."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters")
        h = np.atleast_2d(np.asarray(x, dtype=float))
        shapes = self.layer_shapes
        for layer, ((w0, w1), (b0, b1)) in enumerate(self.param_slices()):
            fan_in, fan_out = shapes[layer]
            w = theta[w0:w1].reshape(fan_in, fan_out)
            b = theta[b0:b1]
            h = h @ w + b
            if layer < len(shapes) - 1:
                h = np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
        return h

    def forward_many(self, thetas, x):
        """Forward pass batched over parameter vectors: (k, n, n_actions)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        shapes = self.layer_shapes
        h = None
        for layer, ((w0, w1), (b0, b1)) in enumerate(self.param_slices()):
            fan_in, fan_out = shapes[layer]
            w = thetas[:, w0:w1].reshape(-1, fan_in, fan_out)
            b = thetas[:, b0:b1]
            if h is None:
                h = np.einsum("ni,kio->kno", x, w) + b[:, None, :]
            else:
                h = np.einsum("kni,kio->kno", h, w) + b[:, None, :]
            if layer < len(shapes) - 1:
                h = np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
        return h

    def forward_tape(self, theta, x):
        """Tape forward pass; ``theta`` is a Var, ``x`` a constant matrix."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        shapes = self.layer_shapes
        out = None
        for layer, ((w0, w1), (b0, b1)) in enumerate(self.param_slices()):
            fan_in, fan_out = shapes[layer]
            w = ad.reshape(ad.gather(theta, np.arange(w0, w1)),
                           (fan_in, fan_out))
            b = ad.gather(theta, np.arange(b0, b1))
            if out is None:
                out = ad.matmul(h, w) + b
            else:
                out = ad.matmul(out, w) + b
            if layer < len(shapes) - 1:
                out = ad.elu(out)
        return out


def q_forward(theta, features, arch):
    """Q-values per action at a single feature vector."""
    return arch.forward(theta, np.atleast_2d(features))[0]


# ---------------------------------------------------------------------------
# Successor approximations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuccessorPlan:
    """Frozen successor structure: features of every candidate successor and
    a (n_eval, n_succ) weight matrix aggregating their greedy values."""

    succ_features: np.ndarray
    weights: np.ndarray
    kind: str


def _featurize_all(states, featurize):
    return np.vstack([np.atleast_1d(featurize(s)) for s in states])


def singleton_plan(eval_states, eval_actions, demos_plus, featurize,
                   terminal_fn=None):
    """One observed successor per evaluation point.

    ``demos_plus`` supplies (s, a, s') transitions; an evaluation pair that
    never occurs in it raises ``UnobservedPairError``.
    """
    lookup = {}
    for s, a, s2 in demos_plus.transitions:
        lookup.setdefault((s, a), s2)
    succ = []
    for s, a in zip(eval_states, eval_actions):
        key = (s, int(a))
        if key not in lookup:
            raise UnobservedPairError(f"pair {key} not in the dataset")
        succ.append(lookup[key])
    m = len(succ)
    weights = np.eye(m)
    if terminal_fn is not None:
        for i, s2 in enumerate(succ):
            if terminal_fn(s2):
                weights[i, i] = 0.0
    return SuccessorPlan(succ_features=_featurize_all(succ, featurize),
                         weights=weights, kind="singleton")


def sampler_plan(eval_states, eval_actions, sample_fn, n_draws, seed,
                 featurize, terminal_fn=None):
    """Equal-weight successors drawn once from a generative model."""
    rng = np.random.default_rng(seed)
    succ, weights = [], np.zeros((len(eval_states), len(eval_states) * n_draws))
    for i, (s, a) in enumerate(zip(eval_states, eval_actions)):
        for j in range(n_draws):
            s2 = sample_fn(s, int(a), rng)
            col = i * n_draws + j
            succ.append(s2)
            if terminal_fn is None or not terminal_fn(s2):
                weights[i, col] = 1.0 / n_draws
    return SuccessorPlan(succ_features=_featurize_all(succ, featurize),
                         weights=weights, kind="sampler")


def importance_plan(eval_states, eval_actions, proposal_sample,
                    proposal_density, model_density, n_draws, seed,
                    featurize, terminal_fn=None):
    """Importance-weighted successors: draws from a proposal q, weights
    model_density / proposal_density averaged over the draw count."""
    rng = np.random.default_rng(seed)
    succ = []
    weights = np.zeros((len(eval_states), len(eval_states) * n_draws))
    for i, (s, a) in enumerate(zip(eval_states, eval_actions)):
        for j in range(n_draws):
            s2 = proposal_sample(s, int(a), rng)
            w = model_density(s2, s, int(a)) / proposal_density(s2, s, int(a))
            if not np.isfinite(w):
                raise ValueError("non-finite importance weight")
            col = i * n_draws + j
            succ.append(s2)
            if terminal_fn is None or not terminal_fn(s2):
                weights[i, col] = w / n_draws
    return SuccessorPlan(succ_features=_featurize_all(succ, featurize),
                         weights=weights, kind="importance")


def reward_candidates(theta, arch, eval_features, eval_actions, plan,
                      discount):
    """Reward candidate per evaluation point via the continuous Bellman
    inversion, R = Q(s,a) - discount * sum_j w_j max_a' Q(s'_j, a')."""
    q_eval = arch.forward(theta, eval_features)
    q_succ = arch.forward(theta, plan.succ_features)
    chosen = q_eval[np.arange(len(eval_actions)), np.asarray(eval_actions, int)]
    return chosen - discount * plan.weights @ q_succ.max(axis=1)


# ---------------------------------------------------------------------------
# Gaussian-process reward prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GPRewardPrior:
    """Zero-mean GP over rewards at the evaluation points.

    The rbf kernel acts on state features with one independent block per
    action; the diagonal kernel reduces to an independent normal of the
    given scale per point.
    """

    kernel: str = "rbf"
    scale: float = 1.0
    lengthscale: float = 0.2
    jitter: float = 1e-6

    def covariance(self, features, actions):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        actions = np.asarray(actions, dtype=int)
        m = features.shape[0]
        if self.kernel == "diagonal":
            return self.scale ** 2 * np.eye(m)
        if self.kernel != "rbf":
            raise ValueError(f"unknown kernel {self.kernel!r}")
        sq = np.sum((features[:, None, :] - features[None, :, :]) ** 2, axis=2)
        cov = self.scale ** 2 * np.exp(-0.5 * sq / self.lengthscale ** 2)
        same_action = actions[:, None] == actions[None, :]
        return cov * same_action

    def factorize(self, features, actions):
        """Cholesky of the covariance with jitter escalation (x10 per retry,
        capped at 1e-3)."""
        cov = self.covariance(features, actions)
        jitter = self.jitter
        while True:
            try:
                chol = cho_factor(cov + jitter * np.eye(cov.shape[0]),
                                  lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
                if jitter > 1e-3:
                    raise
        stabilized = cov + jitter * np.eye(cov.shape[0])
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        inverse = cho_solve(chol, np.eye(cov.shape[0]))
        return GPFactorization(chol=chol, inverse=inverse, logdet=logdet,
                               dim=cov.shape[0])


@dataclass(frozen=True)
class GPFactorization:
    chol: tuple
    inverse: np.ndarray
    logdet: float
    dim: int

    @property
    def log_const(self):
        return -0.5 * (self.logdet + self.dim * LOG_2PI)


def gp_log_prior(rewards, factorization):
    """Multivariate normal log density at the candidate reward vector."""
    r = np.asarray(rewards, dtype=float).ravel()
    if r.size != factorization.dim:
        raise ValueError(f"expected {factorization.dim} rewards")
    alpha = cho_solve(factorization.chol, r)
    return float(-0.5 * r @ alpha + factorization.log_const)


# ---------------------------------------------------------------------------
# Posterior assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuousPosteriorSpec:
    arch: MLPArchitecture
    demo_features: np.ndarray
    demo_actions: np.ndarray
    eval_features: np.ndarray
    eval_actions: np.ndarray
    plan: SuccessorPlan
    prior: GPRewardPrior = field(default_factory=GPRewardPrior)
    alpha: float = 3.0
    discount: float = 0.9

    def factorization(self):
        return self.prior.factorize(self.eval_features, self.eval_actions)


def _continuous_tape(theta, spec, factorization):
    arch = spec.arch
    n_eval = len(spec.eval_actions)
    n_actions = arch.n_actions
    x_all = np.vstack([np.atleast_2d(spec.eval_features),
                       spec.plan.succ_features,
                       np.atleast_2d(spec.demo_features)])
    q_all = arch.forward_tape(theta, x_all)
    n_succ = spec.plan.succ_features.shape[0]
    q_flat = ad.reshape(q_all, (x_all.shape[0] * n_actions,))

    eval_idx = np.arange(n_eval) * n_actions + np.asarray(spec.eval_actions, int)
    q_eval = ad.gather(q_flat, eval_idx)
    succ_rows = ad.gather(q_all, n_eval + np.arange(n_succ))
    best_succ = ad.vmax(succ_rows, axis=-1)
    rewards = q_eval - spec.discount * ad.matvec(spec.plan.weights, best_succ)

    quad = ad.dot(rewards, ad.matvec(factorization.inverse, rewards))
    logp = -0.5 * quad + factorization.log_const

    n_demo = len(spec.demo_actions)
    if n_demo > 0:
        demo_rows = ad.gather(q_all, n_eval + n_succ + np.arange(n_demo))
        scaled = spec.alpha * demo_rows
        lse = ad.logsumexp(scaled, axis=-1)
        flat = ad.reshape(scaled, (n_demo * n_actions,))
        chosen = ad.gather(flat, np.arange(n_demo) * n_actions
                           + np.asarray(spec.demo_actions, int))
        logp = logp + ad.vsum(chosen) - ad.vsum(lse)
    return logp, rewards.value.copy()


def log_posterior_continuous(theta, spec, factorization=None):
    """Unnormalized log posterior at MLP parameters ``theta``.

    Returns ``(log_density, reward_candidates)``; the candidates are the
    auxiliary reward chain entries.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.size != spec.arch.param_count:
        raise ValueError(f"expected {spec.arch.param_count} parameters")
    factorization = factorization or spec.factorization()
    tape = ad.Tape()
    x = tape.leaf(theta)
    logp, rewards = _continuous_tape(x, spec, factorization)
    return float(logp.value), rewards


def make_continuous_logp(spec):
    """Closure ``theta -> (logp, grad, rewards)`` with the covariance
    factorized once up front."""
    factorization = spec.factorization()
    dim = spec.arch.param_count

    def logp(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != dim:
            raise ValueError(f"expected {dim} parameters")
        tape = ad.Tape()
        x = tape.leaf(theta)
        out, rewards = _continuous_tape(x, spec, factorization)
        if not np.isfinite(out.value):
            ad.replay_nonfinite(lambda: _continuous_tape(
                ad.Tape().leaf(theta), spec, factorization))
        return float(out.value), tape.gradient(out, x), rewards

    logp.dim = dim
    return logp


def discretize_actions(low, high, n):
    """Uniform grid over a 1- or 2-dimensional box of continuous actions."""
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    if low.shape != high.shape or low.size > 2:
        raise ValueError("only 1- or 2-dimensional action boxes are supported")
    if n < 2:
        raise ValueError("need at least 2 grid points per dimension")
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(low, high)]
    if low.size == 1:
        return axes[0]
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def apprentice_policy(theta_samples, arch, features):
    """Action maximizing the per-action median of posterior Q samples.

    Ties break toward the lowest action index.
    """
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    if theta_samples.shape[0] < 1:
        raise ValueError("need at least one posterior sample")
    qs = arch.forward_many(theta_samples, np.atleast_2d(features))[:, 0, :]
    return int(np.argmax(np.median(qs, axis=0)))
