"""Experiment orchestration: config files, environment registry, multi-chain
runs, and artifact writing.

Every run is a pure function of its resolved config: the root seed is split
deterministically per chain as ``rng([seed, chain_index])``, so results do
not depend on scheduling.  Unknown config keys are rejected outright to
keep experiment files from drifting silently.
"""

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .continuous import (ContinuousPosteriorSpec, GPRewardPrior,
                         MLPArchitecture, make_continuous_logp,
                         singleton_plan, sampler_plan)
from .diagnostics import ess, r_hat
from .finite_posterior import (FinitePosteriorSpec, NormalPrior,
                               make_finite_logp)
from .lineworld import (LineWorld, generate_lineworld_demos,
                        load_continuous_demonstration,
                        save_continuous_demonstration)
from .mdp import (Demonstration, boltzmann_expert_rollout, load_demonstration,
                  paper_gridworld, save_demonstration, value_iteration)
from .policywalk import make_policywalk_hmc_logp, make_policywalk_logp
from .samplers import SamplerConfig, nuts_sample, rw_metropolis


class ConfigError(ValueError):
    """Malformed experiment configuration."""


GRIDWORLD_SIZES = {"gridworld3x3": 3, "gridworld6x6": 6, "gridworld12x12": 12}
ENV_IDS = tuple(GRIDWORLD_SIZES) + ("lineworld",)


def resolve_env(env_id):
    """Environment registry lookup by string id."""
    if env_id in GRIDWORLD_SIZES:
        return paper_gridworld(GRIDWORLD_SIZES[env_id])
    if env_id == "lineworld":
        return LineWorld()
    raise ConfigError(f"unknown environment id {env_id!r}")


_SCHEMA = {
    "schema_version": None,
    "env": {"id": None},
    "demos": {"path": None, "alpha": None, "n_steps": None,
              "n_episodes": None, "seed": None},
    "prior": {"kind": None, "mean": None, "std": None, "scale": None,
              "lengthscale": None, "jitter": None},
    "sampler": {"n_warmup": None, "n_samples": None, "seed": None,
                "n_chains": None, "target_accept": None, "max_tree_depth": None,
                "proposal_scale": None, "thin": None, "rhat_threshold": None},
    "method": {"name": None, "det_mode": None, "value_space": None,
               "alpha": None, "alpha_bar": None, "hidden": None,
               "successor": None, "n_successors": None, "discount": None},
}

_DEFAULTS = {
    "schema_version": 1,
    "env": {"id": "gridworld3x3"},
    "demos": {"path": None, "alpha": 3.0, "n_steps": 50, "n_episodes": 5,
              "seed": 1},
    "prior": {"kind": "normal", "mean": 0.0, "std": 10.0, "scale": 1.0,
              "lengthscale": 0.2, "jitter": 1e-6},
    "sampler": {"n_warmup": 100, "n_samples": 1000, "seed": 0, "n_chains": 4,
                "target_accept": 0.8, "max_tree_depth": 10,
                "proposal_scale": 1.0, "thin": 1, "rhat_threshold": 1.01},
    "method": {"name": "valuewalk", "det_mode": "detached",
               "value_space": "state_only", "alpha": 3.0, "alpha_bar": 100.0,
               "hidden": [8], "successor": "singleton", "n_successors": 8,
               "discount": 0.9},
}

METHODS = ("valuewalk", "valuewalk-cont", "policywalk", "policywalk-hmc")


def validate_config(raw):
    """Merge a raw config dict over the defaults, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    config = json.loads(json.dumps(_DEFAULTS))
    for section, values in raw.items():
        if section == "schema_version":
            if values != 1:
                raise ConfigError("unsupported schema_version")
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(values) - set(_SCHEMA[section])
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        config[section].update(values)
    if config["env"]["id"] not in ENV_IDS:
        raise ConfigError(f"unknown environment id {config['env']['id']!r}")
    if config["method"]["name"] not in METHODS:
        raise ConfigError(f"unknown method {config['method']['name']!r}")
    s = config["sampler"]
    if s["n_samples"] <= 0 or s["n_warmup"] <= 0:
        raise ConfigError("sampler counts must be positive")
    if s["rhat_threshold"] <= 1.0:
        raise ConfigError("rhat_threshold must exceed 1")
    return config


def load_config(path, overrides=None):
    with open(path) as fh:
        raw = json.load(fh)
    if overrides:
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            raw.setdefault(section, {})[key] = value
    return validate_config(raw)


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(canonical).hexdigest()[:16]


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def generate_demos(config):
    """Demonstrations per the config: loaded from file when a path is given,
    generated from the value-iteration expert otherwise."""
    env_id = config["env"]["id"]
    d = config["demos"]
    if d["path"]:
        if env_id == "lineworld":
            return load_continuous_demonstration(d["path"])
        return load_demonstration(d["path"])
    if env_id == "lineworld":
        demo, _ = generate_lineworld_demos(d["n_episodes"], d["seed"],
                                           alpha=d["alpha"])
        return demo
    mdp, true_reward = resolve_env(env_id)
    q_star = value_iteration(mdp, true_reward, tol=1e-10)
    demo = boltzmann_expert_rollout(mdp, q_star, d["alpha"], d["n_steps"],
                                    d["seed"])
    return Demonstration(transitions=demo.transitions, env_id=env_id,
                         alpha=d["alpha"], seed=d["seed"])


def _finite_spec(config, demos, det_mode=None):
    mdp, _ = resolve_env(config["env"]["id"])
    p = config["prior"]
    if p["kind"] != "normal":
        raise ConfigError("finite methods need a normal prior")
    m = config["method"]
    return FinitePosteriorSpec(
        mdp=mdp, demos=demos,
        prior=NormalPrior(mean=p["mean"], std=p["std"]),
        alpha=m["alpha"], alpha_bar=m["alpha_bar"],
        det_mode=det_mode or m["det_mode"], value_space=m["value_space"])


def continuous_spec(config, demos, env=None):
    """Build the continuous posterior spec for a lineworld run.

    Evaluation points default to the demonstration transitions themselves.
    """
    env = env or LineWorld()
    m = config["method"]
    p = config["prior"]
    if p["kind"] == "normal":
        prior = GPRewardPrior(kernel="diagonal", scale=p["std"],
                              jitter=p["jitter"])
    elif p["kind"] in ("gp_rbf", "gp_diagonal"):
        prior = GPRewardPrior(kernel="rbf" if p["kind"] == "gp_rbf" else "diagonal",
                              scale=p["scale"], lengthscale=p["lengthscale"],
                              jitter=p["jitter"])
    else:
        raise ConfigError(f"unknown prior kind {p['kind']!r}")
    arch = MLPArchitecture(input_dim=1, hidden=tuple(m["hidden"]),
                           n_actions=env.n_actions)
    states = [t[0] for t in demos.transitions]
    actions = [t[1] for t in demos.transitions]
    if m["successor"] == "singleton":
        plan = singleton_plan(states, actions, demos, env.features,
                              terminal_fn=env.in_goal)
    elif m["successor"] == "sampler":
        def sample_fn(s, a, rng):
            return env.move(s, a)

        plan = sampler_plan(states, actions, sample_fn, m["n_successors"],
                            config["demos"]["seed"], env.features,
                            terminal_fn=env.in_goal)
    else:
        raise ConfigError(f"unknown successor model {m['successor']!r}")
    features = np.array([env.features(s) for s in states])
    return ContinuousPosteriorSpec(
        arch=arch, demo_features=features,
        demo_actions=np.array(actions, dtype=int), eval_features=features,
        eval_actions=np.array(actions, dtype=int), plan=plan, prior=prior,
        alpha=m["alpha"], discount=m["discount"])


def _chain_init(dim, root_seed, chain_index, scale):
    rng = np.random.default_rng([root_seed, chain_index, 7])
    return scale * rng.standard_normal(dim)


@dataclass
class RunResult:
    config: dict
    chains: list
    reward_chains: list
    theta_chains: list
    sampling_seconds: float
    reward_labels: list

    def pooled_rewards(self):
        return np.vstack(self.reward_chains)


def _max_workers(n_chains):
    cap = os.environ.get("BIRL_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_chains, cap))


def _sampler_config(config, dim, chain, init_scale):
    s = config["sampler"]
    return SamplerConfig(n_warmup=s["n_warmup"], n_samples=s["n_samples"],
                         init=_chain_init(dim, s["seed"], chain, init_scale),
                         seed=[s["seed"], chain],
                         target_accept=s["target_accept"],
                         max_tree_depth=s["max_tree_depth"], thin=s["thin"])


def _run_one_chain(args):
    """Run chain ``chain`` of the configured method (picklable worker)."""
    config, demos, chain = args
    method = config["method"]["name"]
    if method == "valuewalk-cont":
        spec = continuous_spec(config, demos)
        logp = make_continuous_logp(spec)
        return nuts_sample(logp, _sampler_config(config, spec.arch.param_count,
                                                 chain, init_scale=0.1))
    spec = _finite_spec(config, demos)
    # overdispersed but prior-plausible starts; generic draws also avoid
    # the tied-reward degenerate policies of an all-equal start
    init_scale = 0.1 * float(np.mean(spec.prior.expanded(spec.reward_dim)[1]))
    if method == "valuewalk":
        logp = make_finite_logp(spec)
        return nuts_sample(logp, _sampler_config(config, spec.dim, chain,
                                                 init_scale))
    if method == "policywalk":
        logp = make_policywalk_logp(spec)
        return rw_metropolis(logp, config["sampler"]["proposal_scale"],
                             _sampler_config(config, spec.reward_dim, chain,
                                             init_scale))
    if method == "policywalk-hmc":
        logp, post_step = make_policywalk_hmc_logp(spec)
        return nuts_sample(logp, _sampler_config(config, spec.reward_dim,
                                                 chain, init_scale),
                           post_step=post_step)
    raise ConfigError(f"unknown method {method!r}")


def run_method(config, demos=None, n_chains=None):
    """Run the configured method; returns chains plus aligned reward chains.

    Chains execute in separate processes (capped by BIRL_THREADS); results
    are identical regardless of scheduling because every chain derives its
    randomness from (root seed, chain index).
    """
    config = validate_config(config)
    demos = demos if demos is not None else generate_demos(config)
    method = config["method"]["name"]
    n_chains = n_chains or config["sampler"]["n_chains"]
    env_id = config["env"]["id"]
    if method == "valuewalk-cont" and env_id != "lineworld":
        raise ConfigError("valuewalk-cont runs on lineworld")
    if method != "valuewalk-cont" and env_id == "lineworld":
        raise ConfigError(f"{method} needs a finite environment")

    if method == "valuewalk-cont":
        spec = continuous_spec(config, demos)
        reward_labels = [f"eval_{i}" for i in range(len(spec.eval_actions))]
    else:
        reward_labels = _reward_labels(_finite_spec(config, demos))

    jobs = [(config, demos, chain) for chain in range(n_chains)]
    workers = _max_workers(n_chains)
    t0 = time.perf_counter()
    if workers == 1 or n_chains == 1:
        chains = [_run_one_chain(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_run_one_chain, jobs))
    sampling_seconds = time.perf_counter() - t0

    if method in ("valuewalk", "valuewalk-cont"):
        reward_chains = [c.aux_samples for c in chains]
    else:
        reward_chains = [c.samples for c in chains]
    return RunResult(config=config, chains=chains,
                     reward_chains=reward_chains,
                     theta_chains=[c.samples for c in chains],
                     sampling_seconds=sampling_seconds,
                     reward_labels=reward_labels)


def _reward_labels(spec):
    if spec.value_space == "state_only":
        return [f"state_{i}" for i in range(spec.mdp.n_states)]
    return [f"s{i}_a{j}" for i in range(spec.mdp.n_states)
            for j in range(spec.mdp.n_actions)]


def write_csv(path, array, labels):
    array = np.atleast_2d(np.asarray(array, dtype=float))
    np.savetxt(path, array, delimiter=",", header=",".join(labels),
               comments="")


def read_csv(path):
    with open(path) as fh:
        labels = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return labels, data


def write_run_outputs(result, out_dir, demo_path=None):
    """Chain dumps, reward posterior, diagnostics, and the run manifest.

    Returns the diagnostics dict (the caller decides the exit status from
    its worst R-hat).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = result.config
    s = config["sampler"]

    for i, chain in enumerate(result.chains):
        dim = chain.samples.shape[1]
        write_csv(out / f"chain_{i:02d}.csv", chain.samples,
                  [f"theta_{j}" for j in range(dim)])
        write_csv(out / f"chain_{i:02d}_rewards.csv", result.reward_chains[i],
                  result.reward_labels)
        meta = {"seed": [s["seed"], i], "n_warmup": s["n_warmup"],
                "n_samples": s["n_samples"],
                "divergences": chain.divergence_count,
                "step_size_final": chain.step_size_final,
                "mean_accept": float(np.mean(chain.accept_stats[s["n_warmup"]:])),
                "wall_seconds": chain.wall_seconds}
        (out / f"chain_{i:02d}_meta.json").write_text(json.dumps(meta, indent=1))

    pooled = result.pooled_rewards()
    write_csv(out / "rewards.csv", pooled, result.reward_labels)

    rhat = r_hat(result.reward_chains)
    ess_values = np.sum([ess(c) for c in result.reward_chains], axis=0)
    diagnostics = {
        "r_hat": {lab: float(v) for lab, v in zip(result.reward_labels, rhat)},
        "ess": {lab: float(v) for lab, v in zip(result.reward_labels, ess_values)},
        "max_r_hat": float(np.max(rhat)),
        "min_ess": float(np.min(ess_values)),
        "divergences": int(sum(c.divergence_count for c in result.chains)),
        "sampling_seconds": result.sampling_seconds,
        "rhat_threshold": s["rhat_threshold"],
        "converged": bool(np.max(rhat) <= s["rhat_threshold"]),
    }
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=1))

    sidecar = {"spec_hash": config_hash(config), "seed": s["seed"],
               "r_hat": diagnostics["r_hat"], "ess": diagnostics["ess"]}
    (out / "rewards_meta.json").write_text(json.dumps(sidecar, indent=1))

    manifest = {"tool_version": __version__, "config_hash": config_hash(config),
                "inputs": {}, "created_unix": int(time.time())}
    if demo_path:
        manifest["inputs"]["demos"] = _file_hash(demo_path)
    (out / "config.json").write_text(json.dumps(config, indent=1))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return diagnostics


def bench_scaling(sizes, methods, seed, counts=None, out_path=None):
    """Timing sweep over gridworld sizes; one row per (size, method).

    ``counts`` optionally overrides (n_warmup, n_samples) per method name.
    Single chain per run; seconds-per-ESS is sampling wall time divided by
    the smallest per-dimension ESS of the reward chain.
    """
    default_counts = {"valuewalk": (100, 1000), "policywalk-hmc": (100, 1000),
                      "policywalk": (1000, 200_000)}
    counts = {**default_counts, **(counts or {})}
    rows = []
    for env_id in sizes:
        mdp, _ = resolve_env(env_id)
        for method in methods:
            warmup, samples = counts[method]
            # Random-walk jumps follow the 2.4 * sigma / sqrt(dim) rule
            # against the prior scale (the posterior scale is unknown a
            # priori and mostly prior-dominated on larger grids).
            config = validate_config({
                "env": {"id": env_id},
                "demos": {"seed": seed},
                "sampler": {"n_warmup": warmup, "n_samples": samples,
                            "seed": seed, "n_chains": 1,
                            "proposal_scale": 2.4 * 10.0 / np.sqrt(mdp.n_states)},
                "method": {"name": method},
            })
            result = run_method(config, n_chains=1)
            min_ess = float(np.min(ess(result.reward_chains[0])))
            wall = result.chains[0].wall_seconds
            rows.append({"states": mdp.n_states, "method": method,
                         "wall_seconds": wall, "min_ess": min_ess,
                         "seconds_per_ess": wall / min_ess})
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("states,method,wall_seconds,min_ess,seconds_per_ess\n")
            for row in rows:
                fh.write(f"{row['states']},{row['method']},"
                         f"{row['wall_seconds']:.6f},{row['min_ess']:.3f},"
                         f"{row['seconds_per_ess']:.8f}\n")
    return rows
