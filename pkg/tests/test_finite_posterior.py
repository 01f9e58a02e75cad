"""Finite-space posterior: Bellman inversion, determinant term, likelihood,
and the unknown-transition extension."""

import numpy as np
import pytest

from birlwalk.finite_posterior import (FinitePosteriorSpec, NormalPrior,
                                       UnobservedPairError,
                                       empirical_transition_shortcut,
                                       greedy_policy_matrix, joint_kernel,
                                       log_det_term, log_likelihood,
                                       log_posterior_finite,
                                       log_posterior_unknown_transitions,
                                       make_finite_logp, make_unknown_logp,
                                       normal_log_density, policy_from_q,
                                       reward_from_q)
from birlwalk.mdp import (Demonstration, FiniteMDP, RewardTable,
                          boltzmann_expert_rollout, build_gridworld,
                          paper_gridworld, value_iteration)


@pytest.fixture(scope="module")
def world():
    mdp, reward = paper_gridworld(3)
    q_star = value_iteration(mdp, reward, tol=1e-10)
    demos = boltzmann_expert_rollout(mdp, q_star, 3.0, 50, seed=1)
    return mdp, reward, q_star, demos


def two_state_chain(discount=0.9):
    """Two states, one action, no terminals: a generic tiny MDP."""
    p = np.array([[[0.7, 0.3]], [[0.2, 0.8]]])
    return FiniteMDP(n_states=2, n_actions=1, transitions=p,
                     discount=discount, terminal_mask=np.zeros(2, bool),
                     initial_dist=np.array([1.0, 0.0]))


class TestPolicyFromQ:
    def test_hard_limit(self):
        q = np.array([[1.0, 0.0], [0.2, 0.9]])
        pi = policy_from_q(q, 1e6)
        np.testing.assert_allclose(pi, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)

    def test_constant_rows_uniform(self):
        pi = policy_from_q(np.zeros((3, 4)), 5.0)
        np.testing.assert_allclose(pi, 0.25)

    def test_two_action_value(self):
        pi = policy_from_q(np.array([[1.0, 0.0]]), 3.0)
        expected = np.exp(3.0) / (np.exp(3.0) + 1.0)
        assert pi[0, 0] == pytest.approx(expected, abs=1e-4)
        assert pi[0, 0] == pytest.approx(0.9526, abs=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        pi = policy_from_q(rng.standard_normal((6, 4)), 100.0)
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)


class TestJointKernel:
    def test_deterministic_onehot_rows(self, world):
        mdp, _, q_star, _ = world
        pbar = joint_kernel(mdp, greedy_policy_matrix(q_star))
        assert pbar.shape == (36, 36)
        np.testing.assert_allclose(pbar.sum(axis=1), 1.0, atol=1e-12)
        # deterministic transitions with a one-hot policy: one 1 per row
        assert np.all(np.sort(pbar, axis=1)[:, -1] == 1.0)
        assert np.all(pbar.sum(axis=1) == 1.0)

    def test_uniform_everything(self):
        p = np.full((2, 2, 2), 0.5)
        mdp = FiniteMDP(n_states=2, n_actions=2, transitions=p, discount=0.9,
                        terminal_mask=np.zeros(2, bool),
                        initial_dist=np.full(2, 0.5))
        pbar = joint_kernel(mdp, np.full((2, 2), 0.5))
        np.testing.assert_allclose(pbar, 0.25)

    def test_matches_elementwise_composition(self, world):
        mdp, _, q_star, _ = world
        policy = policy_from_q(q_star, 100.0)
        pbar = joint_kernel(mdp, policy)
        rng = np.random.default_rng(3)
        for _ in range(5):
            s, a = rng.integers(9), rng.integers(4)
            row = pbar[s * 4 + a].reshape(9, 4)
            expected = mdp.transitions[s, a][:, None] * policy
            np.testing.assert_allclose(row, expected, atol=1e-12)
            assert row.sum() == pytest.approx(1.0)


class TestRewardFromQ:
    def test_zero_discount_identity(self, world):
        mdp, _, q_star, _ = world
        pbar = joint_kernel(mdp, greedy_policy_matrix(q_star))
        out = reward_from_q(q_star.ravel(), pbar, 0.0)
        np.testing.assert_allclose(out.values, q_star.ravel())

    def test_single_self_loop_closed_form(self):
        pbar = np.array([[1.0]])
        out = reward_from_q(np.array([2.0]), pbar, 0.9)
        assert out.values[0] == pytest.approx(2.0 * (1 - 0.9))

    def test_value_iteration_round_trip(self, world):
        mdp, _, _, _ = world
        rng = np.random.default_rng(4)
        for _ in range(5):
            r = rng.normal(scale=5, size=36)
            q = value_iteration(mdp, r.reshape(9, 4), tol=1e-11)
            pbar = joint_kernel(mdp, greedy_policy_matrix(q),
                                zero_terminal_rows=True)
            recovered = reward_from_q(q.ravel(), pbar, mdp.discount)
            assert np.max(np.abs(recovered.values - r)) < 1e-6


class TestLogDetTerm:
    def test_identity_kernel_closed_form(self):
        n, gamma = 8, 0.9
        value = log_det_term(np.eye(n), gamma)
        assert value == pytest.approx(n * np.log(1 - gamma))

    def test_two_by_two_closed_form(self):
        q = 0.3
        pbar = np.array([[1 - q, q], [q, 1 - q]])
        gamma = 0.8
        expected = np.log((1 - gamma * (1 - q)) ** 2 - (gamma * q) ** 2)
        assert log_det_term(pbar, gamma) == pytest.approx(expected)

    def test_always_positive_determinant(self, world):
        mdp, _, q_star, _ = world
        rng = np.random.default_rng(5)
        for _ in range(10):
            pi = policy_from_q(rng.standard_normal((9, 4)), 100.0)
            value = log_det_term(joint_kernel(mdp, pi), 0.9)
            assert np.isfinite(value)


class TestLogLikelihood:
    def test_zero_alpha(self, world):
        mdp, _, q_star, demos = world
        value = log_likelihood(q_star, demos, 0.0)
        assert value == pytest.approx(len(demos) * np.log(0.25))

    def test_single_pair_scalar(self):
        demos = Demonstration(transitions=((0, 0, 0),))
        value = log_likelihood(np.array([[1.0, 0.0]]), demos, 3.0)
        assert value == pytest.approx(np.log(np.exp(3) / (np.exp(3) + 1)))
        assert value == pytest.approx(-0.04859, abs=1e-4)

    def test_duplication_doubles(self, world):
        mdp, _, q_star, demos = world
        doubled = Demonstration(transitions=demos.transitions * 2)
        assert log_likelihood(q_star, doubled, 3.0) == pytest.approx(
            2 * log_likelihood(q_star, demos, 3.0))

    def test_alpha_q_scaling_invariance(self, world):
        """Scaling alpha by c and Q by 1/c leaves the likelihood fixed."""
        mdp, _, q_star, demos = world
        base = log_likelihood(q_star, demos, 3.0)
        for c in (0.1, 2.0, 17.0):
            scaled = log_likelihood(q_star / c, demos, 3.0 * c)
            assert scaled == pytest.approx(base, abs=1e-12)


class TestLogPosteriorFinite:
    def test_prior_only_when_unconstrained(self):
        """No demos, determinant omitted, one self-looping state: the
        posterior at q reduces to the prior at the inverted reward."""
        mdp, _ = build_gridworld(1, 1, discount=0.5)
        spec = FinitePosteriorSpec(
            mdp=mdp, demos=Demonstration(transitions=()),
            prior=NormalPrior(0.0, 10.0), det_mode="omitted",
            value_space="state_action")
        q = np.array([1.0, -2.0, 0.5, 3.0])
        lp, rewards = log_posterior_finite(q, spec)
        assert lp == pytest.approx(normal_log_density(rewards.values,
                                                      spec.prior))

    def test_true_q_beats_zero(self, world):
        mdp, reward, q_star, demos = world
        spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                   value_space="state_action")
        lp_star, _ = log_posterior_finite(q_star.ravel(), spec)
        lp_zero, _ = log_posterior_finite(np.zeros(36), spec)
        assert lp_star > lp_zero

    def test_dimension_mismatch_rejected(self, world):
        mdp, _, _, demos = world
        spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                   value_space="state_only")
        with pytest.raises(ValueError):
            log_posterior_finite(np.zeros(36), spec)

    def test_state_only_reward_is_per_state(self, world):
        mdp, _, _, demos = world
        spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                   value_space="state_only")
        _, rewards = log_posterior_finite(np.linspace(-1, 1, 9), spec)
        assert rewards.values.shape == (9,)

    def test_gradient_matches_finite_differences(self, world):
        mdp, _, _, demos = world
        rng = np.random.default_rng(12)
        for value_space in ("state_only", "state_action"):
            for det_mode in ("detached", "omitted"):
                spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                           det_mode=det_mode,
                                           value_space=value_space)
                logp = make_finite_logp(spec)
                for _ in range(10):
                    theta = rng.standard_normal(spec.dim) * 2.0
                    _, grad, _ = logp(theta)
                    h, fd = 1e-5, np.zeros(spec.dim)
                    for i in range(spec.dim):
                        up, dn = theta.copy(), theta.copy()
                        up[i] += h
                        dn[i] -= h
                        fd[i] = (logp(up)[0] - logp(dn)[0]) / (2 * h)
                    scale = np.maximum(np.abs(fd), 1e-6)
                    assert np.max(np.abs(grad - fd) / scale) < 1e-5

    def test_det_cache_recomputes_only_on_policy_change(self, world):
        mdp, _, _, demos = world
        spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                   value_space="state_only")
        logp = make_finite_logp(spec)
        theta = np.linspace(-1.0, 1.0, 9)
        logp(theta)
        first = logp.det_cache.recomputes
        for _ in range(10):
            logp(theta + 1e-9 * np.arange(9))
        assert logp.det_cache.recomputes == first


class TestUnknownTransitions:
    def setup_method(self):
        self.mdp = two_state_chain()
        self.true_logits = np.log(self.mdp.flat_transitions)

    def test_no_demos_factorizes(self):
        """With a uniform Dirichlet and no data, the joint posterior equals
        the value part plus transition-prior terms that do not depend on
        the values."""
        spec = FinitePosteriorSpec(mdp=self.mdp,
                                   demos=Demonstration(transitions=()),
                                   det_mode="omitted",
                                   value_space="state_action")
        q = np.array([0.5, -0.3])
        lp1, _ = log_posterior_unknown_transitions(q, self.true_logits, spec)
        lp2, _ = log_posterior_unknown_transitions(q * 2, self.true_logits,
                                                   spec)
        base1, _ = log_posterior_finite(q, spec)
        base2, _ = log_posterior_finite(q * 2, spec)
        assert lp1 - lp2 == pytest.approx(base1 - base2, abs=1e-9)

    def test_known_transition_limit(self):
        """Fixing the logits at the truth reproduces the known-transition
        posterior up to value-independent constants."""
        demos = Demonstration(transitions=((0, 0, 1), (1, 0, 1), (1, 0, 0)))
        spec = FinitePosteriorSpec(mdp=self.mdp, demos=demos,
                                   det_mode="omitted",
                                   value_space="state_action")
        q = np.array([1.0, 0.4])
        joint, (rewards, p_tensor) = log_posterior_unknown_transitions(
            q, self.true_logits, spec)
        base, base_rewards = log_posterior_finite(q, spec)
        np.testing.assert_allclose(p_tensor, self.mdp.transitions, atol=1e-12)
        np.testing.assert_allclose(rewards.values, base_rewards.values)
        trans_term = sum(np.log(self.mdp.transitions[s, a, s2])
                         for s, a, s2 in demos.transitions)
        joint2, _ = log_posterior_unknown_transitions(q * 3.0,
                                                      self.true_logits, spec)
        base2, _ = log_posterior_finite(q * 3.0, spec)
        assert joint - joint2 == pytest.approx(base - base2, abs=1e-9)
        # the transition factor enters with the demo log-probabilities
        assert joint - base == pytest.approx(joint2 - base2, abs=1e-9)

    def test_posterior_concentrates_with_repeats(self):
        """50 repeats of the same transition push the row's posterior mean
        above the Dirichlet-multinomial lower bound of 0.9."""
        demos = Demonstration(transitions=((0, 0, 1),) * 50)
        spec = FinitePosteriorSpec(mdp=self.mdp, demos=demos,
                                   prior=NormalPrior(0.0, 10.0),
                                   det_mode="omitted",
                                   value_space="state_action")
        logp = make_unknown_logp(spec, kappa=1.0)
        from birlwalk.samplers import SamplerConfig, nuts_sample
        cfg = SamplerConfig(n_warmup=300, n_samples=800,
                            init=0.1 * np.random.default_rng(0).standard_normal(logp.dim),
                            seed=21)

        probs = []

        def wrapped(theta):
            lp, grad, aux = logp(theta)
            logits = theta[2:].reshape(2, 2)
            row = np.exp(logits[0] - np.logaddexp(logits[0][0], logits[0][1]))
            probs.append(row[1])
            return lp, grad, aux

        res = nuts_sample(wrapped, cfg)
        # conjugate oracle: mean (1+50)/(2+50) ~ 0.98 > 0.9
        chain_mean = np.mean(probs[-800:])
        assert chain_mean > 0.9

    def test_gradient_matches_finite_differences(self):
        demos = Demonstration(transitions=((0, 0, 1), (1, 0, 0)))
        spec = FinitePosteriorSpec(mdp=self.mdp, demos=demos,
                                   det_mode="exact",
                                   value_space="state_action")
        logp = make_unknown_logp(spec, kappa=1.5)
        rng = np.random.default_rng(6)
        theta = rng.standard_normal(logp.dim)
        _, grad, _ = logp(theta)
        h, fd = 1e-5, np.zeros(logp.dim)
        for i in range(logp.dim):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (logp(up)[0] - logp(dn)[0]) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / scale) < 1e-5

    def test_shape_mismatch_rejected(self):
        spec = FinitePosteriorSpec(mdp=self.mdp,
                                   demos=Demonstration(transitions=()),
                                   value_space="state_action")
        with pytest.raises(ValueError):
            log_posterior_unknown_transitions(np.zeros(2), np.zeros((3, 2)),
                                              spec)


class TestEmpiricalShortcut:
    def test_single_observed_target(self):
        demos = Demonstration(transitions=((0, 0, 1), (0, 0, 1)))
        est = empirical_transition_shortcut(demos, 3, 2)
        np.testing.assert_allclose(est.row(0, 0), [0.0, 1.0, 0.0])

    def test_split_counts(self):
        demos = Demonstration(transitions=((0, 0, 1), (0, 0, 2)))
        est = empirical_transition_shortcut(demos, 3, 1)
        np.testing.assert_allclose(est.row(0, 0), [0.0, 0.5, 0.5])

    def test_unobserved_pair_raises(self):
        demos = Demonstration(transitions=((0, 0, 1),))
        est = empirical_transition_shortcut(demos, 3, 2)
        with pytest.raises(UnobservedPairError):
            est.row(1, 0)

    def test_long_rollout_recovers_deterministic_dynamics(self):
        mdp, reward = paper_gridworld(3)
        q_star = value_iteration(mdp, reward, tol=1e-10)
        demos = boltzmann_expert_rollout(mdp, q_star, 1.0, 10_000, seed=3)
        est = empirical_transition_shortcut(demos, 9, 4)
        for s in range(9):
            for a in range(4):
                if est.observed[s, a]:
                    np.testing.assert_allclose(est.row(s, a),
                                               mdp.transitions[s, a])

    def test_complete_fills_self_loops(self):
        demos = Demonstration(transitions=((0, 0, 1),))
        est = empirical_transition_shortcut(demos, 2, 1)
        full = est.complete()
        np.testing.assert_allclose(full[1, 0], [0.0, 1.0])


class TestDetModeAgreement:
    def test_exact_and_detached_values_close_at_high_alpha_bar(self, world):
        """At a hard softmax the exact (soft-policy) determinant equals the
        cached hard-policy determinant."""
        mdp, _, _, demos = world
        rng = np.random.default_rng(14)
        theta = rng.standard_normal(9) * 2
        lp = {}
        for det_mode in ("exact", "detached", "omitted"):
            spec = FinitePosteriorSpec(mdp=mdp, demos=demos, det_mode=det_mode,
                                       value_space="state_only")
            lp[det_mode], _ = log_posterior_finite(theta, spec)
        assert lp["exact"] == pytest.approx(lp["detached"], abs=1e-6)
        assert lp["exact"] != pytest.approx(lp["omitted"], abs=1e-6)
