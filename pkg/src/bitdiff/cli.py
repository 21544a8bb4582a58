"""Command-line interface.

Subcommands: gen-graphs, train, solve, estimate, oracle.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 convergence failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .decode import conditional_expectation
from .diffusion import exp_schedule, sample_reverse_path
from .energies import (
    BoltzmannTarget,
    EAInstance,
    IsingLattice2D,
    enumerate_observables,
    read_instance_text,
)
from .graphs import BaConfig, Graph, RbConfig, brute_force_co, gen_ba, gen_rb, is_feasible, solution_size
from .nets import GraphCondition
from .train import load_checkpoint, load_dataset, train
from .unbiased import (
    ConvergenceError,
    nmcmc_estimate,
    observable_estimates,
    snis_sample,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CONVERGENCE = 4


def _write_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_gen_graphs(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    files, seeds = [], []
    for i in range(args.count):
        gseed = int(rng.integers(0, 2 ** 31 - 1))
        for _ in range(1000):
            if args.kind == "ba":
                n = int(rng.integers(args.min_nodes, args.max_nodes + 1))
                g = gen_ba(BaConfig(n, args.ba_m, gseed))
            else:
                n_cl = int(rng.integers(args.rb_min_cliques, args.rb_max_cliques + 1))
                k = int(rng.integers(args.rb_min_k, args.rb_max_k + 1))
                p = float(rng.uniform(args.rb_min_p, args.rb_max_p))
                g = gen_rb(RbConfig(n_cl, k, p, gseed))
            if args.min_nodes <= g.n_nodes <= args.max_nodes:
                break
            gseed = int(rng.integers(0, 2 ** 31 - 1))
        else:
            raise ConfigError("could not sample a graph within the node bounds")
        name = f"graph_{i:05d}.txt"
        (out / name).write_text(g.to_text(), encoding="utf-8")
        files.append(name)
        seeds.append(gseed)
    manifest = {
        "kind": args.kind,
        "problem": args.problem,
        "count": args.count,
        "min_nodes": args.min_nodes,
        "max_nodes": args.max_nodes,
        "config": {
            "ba_m": args.ba_m,
            "rb_cliques": [args.rb_min_cliques, args.rb_max_cliques],
            "rb_k": [args.rb_min_k, args.rb_max_k],
            "rb_p": [args.rb_min_p, args.rb_max_p],
        },
        "seed": args.seed,
        "seeds": seeds,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {args.count} graphs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        _, cfg, *_ = load_checkpoint(args.resume)
        summary = train(cfg, resume=args.resume)
    else:
        cfg = load_config(args.config)
        summary = train(cfg)
    print(json.dumps({k: v for k, v in summary.items() if k != "final"}))
    return EXIT_OK


def _rebuild_problem(problem_meta: dict):
    kind = problem_meta["kind"]
    if kind == "ising":
        model = IsingLattice2D(problem_meta["lattice_size"], problem_meta["coupling"])
    elif kind == "ea":
        model = read_instance_text(problem_meta["instance_text"])
        if not isinstance(model, EAInstance):
            raise ConfigError("bad coupling instance embedded in checkpoint")
    else:
        raise ConfigError(f"estimate requires a lattice checkpoint, got {kind!r}")
    return model, BoltzmannTarget(model, problem_meta["beta"])


def cmd_solve(args) -> int:
    policy, cfg, *_rest, problem_meta = load_checkpoint(args.checkpoint)
    if problem_meta["kind"] != "co":
        raise ConfigError("solve requires a checkpoint trained on a co problem")
    problem = problem_meta["problem"]
    pa, pb = problem_meta["penalty_a"], problem_meta["penalty_b"]
    graphs = load_dataset(args.dataset)
    t_steps = policy.n_steps * args.steps_multiplier
    policy = policy.with_steps(t_steps)
    schedule = exp_schedule(t_steps)
    rng = np.random.default_rng(args.seed)
    results = []
    best_sizes, mean_sizes = [], []
    for gi, g in enumerate(graphs):
        co = g.co_problem(problem, pa, pb)
        cond = GraphCondition(g)
        paths = sample_reverse_path(policy, schedule, args.n_samples, rng, cond)
        if args.ce:
            probs = policy.probs(paths.states[:, 1], 1, cond)
            solutions = np.array([conditional_expectation(p, co.energy) for p in probs])
        else:
            solutions = paths.x0
        feasible = np.array([is_feasible(problem, g, s) for s in solutions])
        energies = co.energy(solutions.astype(np.float64))
        entry = {
            "instance": gi,
            "n_samples": int(args.n_samples),
            "n_feasible": int(feasible.sum()),
            "flagged_infeasible_only": not bool(feasible.any()),
        }
        if feasible.any():
            fe = energies[feasible]
            fs = solutions[feasible]
            best_idx = int(np.argmin(fe))
            sizes = np.array([solution_size(problem, g, s) for s in fs])
            entry["best_energy"] = float(fe[best_idx])
            entry["best_size"] = int(sizes[best_idx])
            entry["mean_size"] = float(sizes.mean())
            best_sizes.append(entry["best_size"])
            mean_sizes.append(entry["mean_size"])
        results.append(entry)
    payload = {
        "problem": problem,
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "n_samples": args.n_samples,
        "conditional_expectation": bool(args.ce),
        "steps_multiplier": args.steps_multiplier,
        "seed": args.seed,
        "instances": results,
        "mean_best_size": float(np.mean(best_sizes)) if best_sizes else None,
        "mean_mean_size": float(np.mean(mean_sizes)) if mean_sizes else None,
    }
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    policy, cfg, *_rest, problem_meta = load_checkpoint(args.checkpoint)
    model, target = _rebuild_problem(problem_meta)
    schedule = exp_schedule(policy.n_steps)
    n_sites = model.n_sites
    payload = {
        "method": args.method,
        "checkpoint": args.checkpoint,
        "beta": target.beta,
        "n_sites": n_sites,
        "seed": args.seed,
        "F_per_site": None,
        "U_per_site": None,
        "S_per_site": None,
        "ess_per_sample": None,
        "tau": None,
        "acceptance_rate": None,
    }
    rng = np.random.default_rng(args.seed)
    if args.method == "snis":
        ws = snis_sample(policy, target, schedule, args.n_samples, rng)
        est = observable_estimates(ws, target)
        per = est.per_site()
        payload.update(
            n_samples=args.n_samples,
            F_per_site=per["F"],
            U_per_site=per["U"],
            S_per_site=per["S"],
            ess_per_sample=est.ess_per_sample,
        )
    else:
        res = nmcmc_estimate(
            policy, target, schedule,
            n_chains=args.chains, n_steps=args.chain_steps, rng=rng,
        )
        payload.update(
            chains=args.chains,
            chain_steps=args.chain_steps,
            U_per_site=res.estimate / n_sites,
            U_stderr_per_site=None if res.stderr is None else res.stderr / n_sites,
            tau=res.tau,
            burn_in=res.burn_in,
            acceptance_rate=res.acceptance_rate,
            flagged_chains=res.n_flagged,
        )
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.problem == "ising" or args.problem == "ea":
        if args.problem == "ising":
            model = IsingLattice2D(args.lattice_size, args.coupling)
        elif args.instance:
            model = read_instance_text(Path(args.instance).read_text(encoding="utf-8"))
        else:
            maker = EAInstance.normal if args.ea_dist == "normal" else EAInstance.uniform
            model = maker(args.lattice_size, args.ea_seed)
        target = BoltzmannTarget(model, args.beta)
        obs = enumerate_observables(target, with_probabilities=False)
        n = model.n_sites
        payload = {
            "problem": args.problem,
            "beta": args.beta,
            "n_sites": n,
            "log_z": obs.log_z,
            "F": obs.free_energy,
            "U": obs.internal_energy,
            "S": obs.entropy,
            "F_per_site": None if obs.free_energy is None else obs.free_energy / n,
            "U_per_site": obs.internal_energy / n,
            "S_per_site": obs.entropy / n,
        }
    else:
        graph = Graph.from_text(Path(args.graph).read_text(encoding="utf-8"))
        res = brute_force_co(args.problem, graph, args.penalty_a, args.penalty_b,
                             allow_large=args.allow_large)
        payload = {
            "problem": args.problem,
            "n_nodes": graph.n_nodes,
            "optimal_energy": res.optimal_energy,
            "optimal_size": res.optimal_size,
            "n_optima": int(len(res.optimal_states)),
        }
    _write_json(payload, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitdiff",
                                     description="discrete diffusion samplers for binary states")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-graphs", help="write a random-graph dataset directory")
    g.add_argument("--kind", choices=("ba", "rb"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--problem", default="", help="recorded in the manifest")
    g.add_argument("--min-nodes", type=int, default=10)
    g.add_argument("--max-nodes", type=int, default=14)
    g.add_argument("--ba-m", type=int, default=4)
    g.add_argument("--rb-min-cliques", type=int, default=2)
    g.add_argument("--rb-max-cliques", type=int, default=3)
    g.add_argument("--rb-min-k", type=int, default=3)
    g.add_argument("--rb-max-k", type=int, default=5)
    g.add_argument("--rb-min-p", type=float, default=0.3)
    g.add_argument("--rb-max-p", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_graphs)

    t = sub.add_parser("train", help="train a sampler from a config file")
    t.add_argument("--config", help="run configuration file")
    t.add_argument("--resume", help="checkpoint to resume from (config comes from it)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="sample solutions for a co dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--n-samples", type=int, default=30)
    s.add_argument("--ce", action=argparse.BooleanOptionalAction, default=False,
                   help="decode the final step by conditional expectation")
    s.add_argument("--steps-multiplier", type=int, default=1,
                   help="inference diffusion steps as a multiple of training steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("estimate", help="unbiased observable estimation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--method", choices=("snis", "nmcmc"), default="snis")
    e.add_argument("--n-samples", type=int, default=100000)
    e.add_argument("--chains", type=int, default=8)
    e.add_argument("--chain-steps", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_estimate)

    o = sub.add_parser("oracle", help="exact references by enumeration")
    o.add_argument("--problem", choices=("ising", "ea", "mis", "mds", "maxcl", "maxcut"),
                   required=True)
    o.add_argument("--lattice-size", type=int, default=4)
    o.add_argument("--coupling", type=float, default=1.0)
    o.add_argument("--beta", type=float, default=0.4407)
    o.add_argument("--ea-seed", type=int, default=0)
    o.add_argument("--ea-dist", choices=("normal", "uniform"), default="normal")
    o.add_argument("--instance", default=None, help="coupling instance text file")
    o.add_argument("--graph", default=None, help="edge-list file for co problems")
    o.add_argument("--penalty-a", type=float, default=1.0)
    o.add_argument("--penalty-b", type=float, default=1.1)
    o.add_argument("--allow-large", action="store_true")
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not (args.config or args.resume):
        parser.error("train requires --config or --resume")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConvergenceError as err:
        print(f"convergence failure: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FileNotFoundError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
