"""Command-line experiment driver.

Subcommands: gen-demos, run, bench-scaling, eval, diag.  Every command is a
pure function of its config file, flags, and seed; report paths emit PNG
figures next to the CSV data they are drawn from.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from .continuous import MLPArchitecture, apprentice_policy
from .diagnostics import ess, r_hat
from .evaluation import heldout_metrics, joint_posterior_report
from .experiment import (ConfigError, bench_scaling, generate_demos,
                         load_config, read_csv, resolve_env, run_method,
                         validate_config, write_csv, write_run_outputs)
from .lineworld import (LineWorld, lineworld_rollout,
                        load_continuous_demonstration,
                        save_continuous_demonstration)
from .mdp import save_demonstration


def _cmd_gen_demos(args):
    config = validate_config({
        "env": {"id": args.env},
        "demos": {"alpha": args.alpha, "n_steps": args.n_steps,
                  "n_episodes": args.n_episodes, "seed": args.seed},
    })
    demo = generate_demos(config)
    if args.env == "lineworld":
        save_continuous_demonstration(demo, args.out)
    else:
        save_demonstration(demo, args.out)
    print(f"wrote {len(demo)} transitions to {args.out}")
    return 0


def _overrides_from(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        overrides[dotted] = json.loads(value)
    return overrides


def _cmd_run(args):
    config = load_config(args.config, overrides=_overrides_from(args))
    result = run_method(config)
    diag = write_run_outputs(result, args.out_dir,
                             demo_path=config["demos"]["path"])
    print(f"max R-hat {diag['max_r_hat']:.4f} "
          f"(threshold {diag['rhat_threshold']}), "
          f"min ESS {diag['min_ess']:.0f}, "
          f"divergences {diag['divergences']}, "
          f"sampling {diag['sampling_seconds']:.1f}s")
    if not diag["converged"]:
        print("convergence check FAILED", file=sys.stderr)
        return 3
    return 0


def _cmd_bench(args):
    sizes = [f"gridworld{s}" for s in args.sizes.split(",")]
    methods = args.methods.split(",")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_scaling(sizes, methods, args.seed,
                         out_path=out / "scaling.csv")
    for row in rows:
        print(f"{row['states']:>4} states  {row['method']:<15} "
              f"{row['seconds_per_ess']:.4f} s/ESS "
              f"(wall {row['wall_seconds']:.1f}s, min ESS {row['min_ess']:.0f})")
    return 0


def _load_chain_dir(chains_dir):
    chains_dir = Path(chains_dir)
    config = json.loads((chains_dir / "config.json").read_text())
    theta_chains, reward_chains = [], []
    for path in sorted(chains_dir.glob("chain_[0-9][0-9].csv")):
        theta_chains.append(read_csv(path)[1])
    labels = None
    for path in sorted(chains_dir.glob("chain_[0-9][0-9]_rewards.csv")):
        labels, data = read_csv(path)
        reward_chains.append(data)
    if not theta_chains:
        raise ConfigError(f"no chain files under {chains_dir}")
    return config, theta_chains, reward_chains, labels


def _cmd_eval(args):
    config, theta_chains, reward_chains, labels = _load_chain_dir(args.chains_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "apprentice":
        if config["env"]["id"] != "lineworld":
            raise ConfigError("apprentice evaluation targets lineworld runs")
        env = LineWorld()
        arch = MLPArchitecture(input_dim=1,
                               hidden=tuple(config["method"]["hidden"]),
                               n_actions=env.n_actions)
        samples = np.vstack(theta_chains)

        def policy(x):
            probs = np.zeros(env.n_actions)
            probs[apprentice_policy(samples, arch, env.features(x))] = 1.0
            return probs

        _, returns = lineworld_rollout(policy, args.episodes, args.seed, env=env)
        payload = {"episodes": args.episodes,
                   "mean_return": float(returns.mean()),
                   "std_return": float(returns.std())}
        (out / "apprentice.json").write_text(json.dumps(payload, indent=1))
        print(f"apprentice mean return {payload['mean_return']:.3f} "
              f"over {args.episodes} episodes")
        return 0

    if args.mode == "heldout":
        if not args.test_demos:
            raise ConfigError("heldout mode needs --test-demos")
        test = load_continuous_demonstration(args.test_demos)
        if len(test) == 0:
            raise ConfigError("held-out demonstration set is empty")
        env = LineWorld()
        arch = MLPArchitecture(input_dim=1,
                               hidden=tuple(config["method"]["hidden"]),
                               n_actions=env.n_actions)
        samples = np.vstack(theta_chains)
        feats = np.array([env.features(x) for x in test.states])

        def q_fn(theta, states):
            return arch.forward(theta, states)

        loglik, entropy = heldout_metrics(samples, feats, test.actions, q_fn,
                                          config["method"]["alpha"])
        payload = {"mean_loglik": loglik, "mean_entropy": entropy,
                   "n_test_steps": len(test)}
        (out / "heldout.json").write_text(json.dumps(payload, indent=1))
        print(f"held-out mean log-likelihood {loglik:.4f}, "
              f"entropy {entropy:.4f}")
        return 0

    if args.mode == "report":
        rewards = np.vstack(reward_chains)
        report = joint_posterior_report(rewards)
        write_csv(out / "correlations.csv", report.correlations, labels)
        for (i, j), (x_edges, y_edges, counts) in report.histograms.items():
            stem = f"hist2d_{labels[i]}_{labels[j]}"
            write_csv(out / f"{stem}.csv", counts,
                      [f"bin_{k}" for k in range(counts.shape[1])])
        means = rewards.mean(axis=0)
        write_csv(out / "reward_means.csv", means[None, :], labels)
        figures.save_reward_histograms(rewards, out / "reward_histograms.png",
                                       labels=labels)
        figures.save_pairwise_histograms(rewards,
                                         out / "pairwise_histograms.png")
        print(f"report written to {out}")
        return 0

    raise ConfigError(f"unknown eval mode {args.mode!r}")


def _cmd_diag(args):
    config, theta_chains, reward_chains, labels = _load_chain_dir(args.chains_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rhat = r_hat(reward_chains)
    ess_total = np.sum([ess(c) for c in reward_chains], axis=0)
    with open(out / "diag.csv", "w") as fh:
        fh.write("dimension,r_hat,ess\n")
        for lab, rv, ev in zip(labels, rhat, ess_total):
            fh.write(f"{lab},{rv:.6f},{ev:.2f}\n")
    payload = {"max_r_hat": float(np.max(rhat)),
               "min_ess": float(np.min(ess_total))}
    (out / "diag.json").write_text(json.dumps(payload, indent=1))
    figures.save_trace(reward_chains, out / "trace.png")
    print(f"max R-hat {payload['max_r_hat']:.4f}, "
          f"min ESS {payload['min_ess']:.0f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="birlwalk",
        description="Bayesian IRL posterior sampling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    p.add_argument("--env", required=True)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--n-steps", type=int, default=50)
    p.add_argument("--n-episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_demos)

    p = sub.add_parser("run", help="run a sampling experiment from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--set", action="append", metavar="section.key=value",
                   help="override a config value (JSON-encoded)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench-scaling", help="timing sweep over gridworlds")
    p.add_argument("--sizes", default="3x3,6x6,12x12")
    p.add_argument("--methods", default="valuewalk,policywalk-hmc,policywalk")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--chains-dir", required=True)
    p.add_argument("--mode", required=True,
                   choices=["apprentice", "heldout", "report"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-demos")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("diag", help="convergence diagnostics for a run")
    p.add_argument("--chains-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_diag)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
