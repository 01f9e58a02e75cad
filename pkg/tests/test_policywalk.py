"""Reward-space baseline posteriors and their samplers."""

import numpy as np
import pytest

from birlwalk.finite_posterior import (FinitePosteriorSpec, NormalPrior,
                                       log_posterior_finite,
                                       normal_log_density)
from birlwalk.mdp import (Demonstration, FiniteMDP, boltzmann_expert_rollout,
                          paper_gridworld, value_iteration)
from birlwalk.policywalk import (log_posterior_policywalk,
                                 make_policywalk_hmc_logp,
                                 make_policywalk_logp, policywalk_hmc,
                                 policywalk_vanilla)
from birlwalk.samplers import SamplerConfig, rw_metropolis


@pytest.fixture(scope="module")
def world():
    mdp, reward = paper_gridworld(3)
    q_star = value_iteration(mdp, reward, tol=1e-10)
    demos = boltzmann_expert_rollout(mdp, q_star, 3.0, 50, seed=1)
    true_state_rewards = reward.as_matrix(mdp)[:, 0]
    return mdp, true_state_rewards, demos


def spec_of(world, **kwargs):
    mdp, _, demos = world
    defaults = dict(mdp=mdp, demos=demos, prior=NormalPrior(0.0, 10.0),
                    alpha=3.0, value_space="state_only")
    defaults.update(kwargs)
    return FinitePosteriorSpec(**defaults)


class TestLogPosteriorPolicywalk:
    def test_true_reward_beats_negated(self, world):
        _, true_r, _ = world
        spec = spec_of(world)
        lp_true, _ = log_posterior_policywalk(true_r, spec)
        lp_neg, _ = log_posterior_policywalk(-true_r, spec)
        assert np.isfinite(lp_true) and lp_true > lp_neg

    def test_zero_demos_equals_prior(self, world):
        spec = spec_of(world, demos=Demonstration(transitions=()))
        r = np.linspace(-2, 2, 9)
        lp, _ = log_posterior_policywalk(r, spec)
        assert lp == pytest.approx(normal_log_density(r, spec.prior))

    def test_matches_finite_posterior_at_optimal_pair(self, world):
        """At (R, Q*(R)), the reward-space posterior equals the value-space
        posterior with the determinant omitted evaluated at Q*(R), because
        the Bellman inversion of Q* recovers R exactly."""
        mdp, true_r, demos = world
        spec = spec_of(world, det_mode="omitted", alpha_bar=1e6)
        rng = np.random.default_rng(8)
        for _ in range(5):
            r = rng.normal(scale=3, size=9)
            lp_pw, q = log_posterior_policywalk(r, spec)
            # state-value vector of the optimal Q
            v = q.max(axis=1)
            lp_vw, rewards = log_posterior_finite(v, spec)
            np.testing.assert_allclose(rewards.values, r, atol=1e-6)
            assert lp_pw == pytest.approx(lp_vw, abs=1e-5)


class TestPolicywalkVanilla:
    def test_conjugate_single_state(self):
        """One state, one action: the likelihood is constant, so the chain
        must reproduce the prior's moments within Monte Carlo error."""
        p = np.ones((1, 1, 1))
        mdp = FiniteMDP(n_states=1, n_actions=1, transitions=p, discount=0.9,
                        terminal_mask=np.zeros(1, bool),
                        initial_dist=np.ones(1))
        demos = Demonstration(transitions=((0, 0, 0),) * 20)
        spec = FinitePosteriorSpec(mdp=mdp, demos=demos,
                                   prior=NormalPrior(0.0, 10.0),
                                   value_space="state_only")
        cfg = SamplerConfig(n_warmup=2000, n_samples=100_000,
                            init=np.zeros(1), seed=17)
        res = policywalk_vanilla(spec, proposal_scale=10.0, config=cfg)
        n_eff = 100_000 * 0.15  # rough iid-equivalent given ~30% acceptance
        se_mean = 10.0 / np.sqrt(n_eff)
        assert abs(res.samples.mean()) < 3 * se_mean
        assert abs(res.samples.std() - 10.0) < 3 * se_mean

    def test_aux_carries_q_chain(self, world):
        spec = spec_of(world)
        cfg = SamplerConfig(n_warmup=50, n_samples=100, init=np.zeros(9),
                            seed=2)
        res = policywalk_vanilla(spec, proposal_scale=0.5, config=cfg)
        assert res.aux_samples.shape == (100, 36)
        # each aux row is the optimal Q of its reward row
        i = 50
        q = value_iteration(spec.mdp, np.repeat(res.samples[i], 4), tol=1e-10)
        np.testing.assert_allclose(res.aux_samples[i], q.ravel(), atol=1e-8)

    def test_tiny_proposal_high_acceptance_low_ess(self, world):
        from birlwalk.diagnostics import ess
        spec = spec_of(world)
        cfg = SamplerConfig(n_warmup=100, n_samples=4000, init=np.zeros(9),
                            seed=3)
        res = policywalk_vanilla(spec, proposal_scale=0.01, config=cfg)
        assert res.accept_stats.mean() > 0.9
        assert np.min(ess(res.samples)) / 4000 < 0.05

    def test_warm_start_never_changes_results(self, world):
        spec = spec_of(world)
        cfg = SamplerConfig(n_warmup=100, n_samples=300, init=np.zeros(9),
                            seed=4)
        warm = rw_metropolis(make_policywalk_logp(spec, warm_start=True),
                             0.5, cfg)
        cold = rw_metropolis(make_policywalk_logp(spec, warm_start=False),
                             0.5, cfg)
        np.testing.assert_array_equal(warm.samples, cold.samples)
        np.testing.assert_array_equal(warm.aux_samples, cold.aux_samples)


class TestPolicywalkHmc:
    def test_gradient_matches_fd_with_frozen_policy(self, world):
        spec = spec_of(world)
        logp, _ = make_policywalk_hmc_logp(spec)
        rng = np.random.default_rng(5)
        theta = rng.normal(scale=2, size=9)
        _, grad, _ = logp(theta)  # freezes the policy at theta
        h, fd = 1e-5, np.zeros(9)
        for i in range(9):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (logp(up)[0] - logp(dn)[0]) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / scale) < 1e-5

    def test_agrees_with_vanilla_posterior_mean(self, world):
        """Cross-sampler agreement on posterior means at modest length;
        the full KS protocol lives in the acceptance suite."""
        spec = spec_of(world)
        init = np.random.default_rng(42).normal(scale=2.0, size=9)
        hmc_cfg = SamplerConfig(n_warmup=150, n_samples=800, init=init,
                                seed=6)
        hmc = policywalk_hmc(spec, hmc_cfg)
        rw_cfg = SamplerConfig(n_warmup=5000, n_samples=150_000, init=init,
                               seed=7)
        vanilla = policywalk_vanilla(spec, proposal_scale=0.6, config=rw_cfg)
        gap = np.abs(hmc.samples.mean(axis=0) - vanilla.samples.mean(axis=0))
        pooled_std = vanilla.samples.std(axis=0)
        assert np.all(gap < 0.75 * pooled_std)

    def test_deterministic_given_seed(self, world):
        spec = spec_of(world)
        init = np.random.default_rng(1).normal(scale=2.0, size=9)
        cfg = SamplerConfig(n_warmup=50, n_samples=100, init=init, seed=8)
        a = policywalk_hmc(spec, cfg)
        b = policywalk_hmc(spec, cfg)
        np.testing.assert_array_equal(a.samples, b.samples)
