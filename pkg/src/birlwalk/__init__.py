"""Bayesian inverse reinforcement learning by MCMC in value space.

The main entry points are the posterior builders (``finite_posterior``,
``continuous``), the samplers (``samplers``), the reward-space baselines
(``policywalk``), and the experiment driver (``experiment`` / ``cli``).
"""

__version__ = "0.1.0"

from .autodiff import NonFiniteError, grad, stop_gradient, value_and_grad
from .continuous import (ContinuousPosteriorSpec, GPRewardPrior,
                         MLPArchitecture, apprentice_policy,
                         discretize_actions, gp_log_prior,
                         log_posterior_continuous, make_continuous_logp,
                         q_forward, reward_candidates)
from .diagnostics import ess, r_hat
from .evaluation import (brute_force_posterior, heldout_metrics,
                         joint_posterior_report, ks_two_sample)
from .finite_posterior import (EmpiricalTransitions, FinitePosteriorSpec,
                               NormalPrior, UnobservedPairError,
                               empirical_transition_shortcut, joint_kernel,
                               log_det_term, log_likelihood,
                               log_posterior_finite,
                               log_posterior_unknown_transitions,
                               make_finite_logp, policy_from_q,
                               reward_from_q)
from .lineworld import LineWorld, lineworld_rollout
from .mdp import (Demonstration, FiniteMDP, RewardTable,
                  boltzmann_expert_rollout, build_gridworld, paper_gridworld,
                  value_iteration)
from .policywalk import (log_posterior_policywalk, policywalk_hmc,
                         policywalk_vanilla)
from .samplers import (ChainResult, SamplerConfig, nuts_sample, rw_metropolis)
