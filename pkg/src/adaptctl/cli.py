"""Command-line pipeline driver.

Stages write their artifacts under `<out>/<system>/` and record what they
did in a manifest, so a full reproduction is a sequence of commands over
one config file:

    adaptctl collect   --config configs/van_der_pol.json --out out
    adaptctl train-fe  --config configs/van_der_pol.json --out out
    adaptctl bank      --config configs/van_der_pol.json --out out
    adaptctl train-dpc --config configs/van_der_pol.json --out out
    adaptctl simulate  --config configs/van_der_pol.json --out out
    adaptctl benchmark --config configs/van_der_pol.json --out out

Simulation episodes are independent and can run on a thread pool with
--jobs; the benchmark stage always runs serially because it compares
controller wall times and parallel load would contaminate them.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import closed_loop as cl
from . import dpc, dynamics, encoder
from .config import ConfigError, RunConfig, config_hash, default_config, load_config, save_config, summarize


class MissingArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# artifact layout


def _paths(out: str, system: str) -> dict:
    root = os.path.join(out, system)
    return {
        "root": root,
        "datasets": os.path.join(root, "datasets"),
        "basis": os.path.join(root, "basis.json"),
        "bank": os.path.join(root, "bank.json"),
        "policy": os.path.join(root, "policy.json"),
        "traces": os.path.join(root, "traces"),
        "benchmark": os.path.join(root, "benchmark.json"),
        "manifest": os.path.join(root, "manifest.json"),
    }


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing artifact {path}; run 'adaptctl {stage}' first")
    return path


def _git_describe() -> str:
    try:
        run = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return run.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _update_manifest(paths: dict, stage: str, cfg: RunConfig, extra: dict) -> None:
    manifest = {"system": cfg.system, "stages": {}}
    if os.path.exists(paths["manifest"]):
        with open(paths["manifest"]) as fh:
            manifest = json.load(fh)
    manifest["git"] = _git_describe()
    manifest.setdefault("stages", {})[stage] = {
        "config_hash": config_hash(cfg),
        "completed": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2)


def _dataset_files(paths: dict) -> list:
    return sorted(glob.glob(os.path.join(paths["datasets"], "ds_*.json")))


def _load_problem(cfg: RunConfig):
    problem = dpc.default_problem(cfg.system)
    if cfg.problem.horizon is not None:
        problem.horizon = cfg.problem.horizon
    if cfg.problem.penalty_weight is not None:
        problem.penalty_weight = cfg.problem.penalty_weight
    return problem


# ---------------------------------------------------------------------------
# stages


def stage_collect(cfg: RunConfig, paths: dict) -> int:
    spec = dynamics.get_system(cfg.system)
    os.makedirs(paths["datasets"], exist_ok=True)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.collect.n_systems)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        params = dynamics.sample_params(spec, rng)
        ds = dynamics.collect_dataset(
            spec, params, cfg.collect.transitions, rng,
            excitation=cfg.collect.excitation, hold_steps=cfg.collect.hold_steps)
        dynamics.save_dataset(os.path.join(paths["datasets"], f"ds_{i:03d}.json"), ds)
    _update_manifest(paths, "collect", cfg, {"files": cfg.collect.n_systems})
    print(f"collect: wrote {cfg.collect.n_systems} datasets to {paths['datasets']}")
    return 0


def stage_train_fe(cfg: RunConfig, paths: dict) -> int:
    files = _dataset_files(paths)
    if not files:
        raise MissingArtifactError(
            f"no datasets under {paths['datasets']}; run 'adaptctl collect' first")
    datasets = [dynamics.load_dataset(f) for f in files]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    basis = encoder.init_basis(cfg.system, cfg.basis.size, cfg.basis.hidden, rng,
                               lam=cfg.basis.lam)
    train_cfg = encoder.FeTrainConfig(**asdict(cfg.fe_train))
    t0 = time.perf_counter()
    history = encoder.train_basis(basis, datasets, train_cfg, rng)
    seconds = time.perf_counter() - t0
    encoder.save_basis(paths["basis"], basis)
    _update_manifest(paths, "train-fe", cfg, {
        "epochs": len(history),
        "loss_first": history[0],
        "loss_last": history[-1],
        "seconds": seconds,
    })
    print(f"train-fe: {len(history)} epochs, loss {history[0]:.3e} -> {history[-1]:.3e} "
          f"in {seconds:.1f}s; saved {paths['basis']}")
    return 0


def stage_bank(cfg: RunConfig, paths: dict) -> int:
    basis = encoder.load_basis(_require(paths["basis"], "train-fe"))
    files = _dataset_files(paths)
    if not files:
        raise MissingArtifactError(
            f"no datasets under {paths['datasets']}; run 'adaptctl collect' first")
    datasets = [dynamics.load_dataset(f) for f in files]
    bank = dpc.build_coefficient_bank(basis, datasets)
    dpc.save_bank(paths["bank"], bank)
    _update_manifest(paths, "bank", cfg, {"entries": bank.size})
    print(f"bank: {bank.size} coefficient vectors of width {bank.dim}; saved {paths['bank']}")
    return 0


def stage_train_dpc(cfg: RunConfig, paths: dict) -> int:
    basis = encoder.load_basis(_require(paths["basis"], "train-fe"))
    bank = dpc.load_bank(_require(paths["bank"], "bank"))
    problem = _load_problem(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    policy = dpc.init_policy(problem, bank, cfg.policy.hidden, rng)
    train_cfg = dpc.DpcTrainConfig(lr=cfg.policy.lr, iters=cfg.policy.iters,
                                   batch=cfg.policy.batch, mixture=cfg.policy.mixture,
                                   coeff_noise=cfg.policy.coeff_noise)
    t0 = time.perf_counter()
    history = dpc.train_policy(policy, basis, problem, bank, train_cfg, rng)
    seconds = time.perf_counter() - t0
    dpc.save_policy(paths["policy"], policy)
    _update_manifest(paths, "train-dpc", cfg, {
        "iters": len(history),
        "loss_first": history[0],
        "loss_last": history[-1],
        "seconds": seconds,
    })
    print(f"train-dpc: {len(history)} iterations, loss {history[0]:.3e} -> "
          f"{history[-1]:.3e} in {seconds:.1f}s; saved {paths['policy']}")
    return 0


def _episode_conditions(cfg: RunConfig, problem, n_episodes: int, with_switch: bool):
    """Deterministic per-episode draws, independent of execution order."""
    spec = dynamics.get_system(cfg.system)
    conditions = []
    for i, child in enumerate(np.random.SeedSequence((cfg.seed, 3)).spawn(n_episodes)):
        rng = np.random.default_rng(child)
        params = dynamics.sample_params(spec, rng)
        x0 = dynamics.sample_state(spec, rng)
        if problem.task_dim == 0:
            xi = None
        elif cfg.episode.xi_hold is not None:
            xi = cl.piecewise_xi(problem, cfg.episode.steps, cfg.episode.xi_hold, rng)
        else:
            xi = problem.sample_xi(rng, 1)[0]
        switches = None
        if with_switch:
            switches = cl.SwitchSchedule.single_random(
                spec, rng, cfg.episode.switch_lo, cfg.episode.switch_hi)
        conditions.append({"index": i, "rng": rng, "params": params, "x0": x0,
                           "xi": xi, "switches": switches})
    return conditions


def stage_simulate(cfg: RunConfig, paths: dict, algorithm: str, episodes: int | None,
                   jobs: int, with_switch: bool) -> int:
    problem = _load_problem(cfg)
    n_episodes = cfg.episode.episodes if episodes is None else episodes
    if with_switch:
        if cfg.episode.switch_lo is None:
            raise ConfigError("--switch needs episode.switch_lo/switch_hi in the config")
        if algorithm == "wb_mpc":
            raise ConfigError("the white-box baseline does not support silent switches")
        if cfg.episode.switch_hi >= cfg.episode.steps:
            raise ConfigError("switch window must end before the episode does")
    if algorithm == "fe_dpc":
        basis = encoder.load_basis(_require(paths["basis"], "train-fe"))
        policy = dpc.load_policy(_require(paths["policy"], "train-dpc"))
        adapt = cl.AdaptConfig(window=cfg.episode.window, period=cfg.episode.period,
                               warmup=cfg.episode.warmup,
                               refit_trigger=cfg.episode.refit_trigger)

        def run(cond):
            return cl.run_fedpc_episode(
                policy, basis, problem, cond["params"], cond["x0"],
                cfg.episode.steps, cond["rng"], adapt=adapt,
                switches=cond["switches"], xi_traj=cond["xi"])
    else:

        def run(cond):
            return cl.run_mpc_episode(problem, cond["params"], cond["x0"],
                                      cfg.episode.steps, xi_traj=cond["xi"])

    conditions = _episode_conditions(cfg, problem, n_episodes, with_switch)
    os.makedirs(paths["traces"], exist_ok=True)
    t0 = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(run, conditions))
    else:
        traces = [run(cond) for cond in conditions]
    seconds = time.perf_counter() - t0
    summaries = []
    for cond, trace in zip(conditions, traces):
        cl.save_trace(os.path.join(paths["traces"], f"{algorithm}_{cond['index']:03d}.csv"),
                      trace)
        summaries.append(trace.summary)
    mse = float(np.mean([s["mse"] for s in summaries]))
    aggregate = {
        "algorithm": algorithm,
        "episodes": n_episodes,
        "steps": cfg.episode.steps,
        "switched": with_switch,
        "mse_mean": mse,
        "state_violations": int(sum(s["state_violations"] for s in summaries)),
        "control_violations": int(sum(s["control_violations"] for s in summaries)),
        "mean_ctrl_seconds": float(np.mean([s["mean_ctrl_seconds"] for s in summaries])),
        "wall_seconds": seconds,
    }
    with open(os.path.join(paths["traces"], f"{algorithm}_summary.json"), "w") as fh:
        json.dump({"aggregate": aggregate, "episodes": summaries}, fh, indent=2)
    _update_manifest(paths, f"simulate-{algorithm}", cfg, aggregate)
    print(f"simulate[{algorithm}]: {n_episodes} episodes x {cfg.episode.steps} steps, "
          f"mse {mse:.4g}, {seconds:.1f}s wall")
    return 0


def stage_benchmark(cfg: RunConfig, paths: dict, episodes: int | None) -> int:
    basis = encoder.load_basis(_require(paths["basis"], "train-fe"))
    policy = dpc.load_policy(_require(paths["policy"], "train-dpc"))
    problem = _load_problem(cfg)
    n_episodes = cfg.episode.episodes if episodes is None else episodes
    adapt = cl.AdaptConfig(window=cfg.episode.window, period=cfg.episode.period,
                           warmup=cfg.episode.warmup,
                           refit_trigger=cfg.episode.refit_trigger)
    table = cl.benchmark_suite(policy, basis, problem, n_episodes,
                               cfg.episode.steps, cfg.seed, adapt=adapt)
    with open(paths["benchmark"], "w") as fh:
        json.dump(table, fh, indent=2)
    _update_manifest(paths, "benchmark", cfg, {
        "episodes": n_episodes,
        "speedup": table["speedup"],
        "fe_dpc_mse": table["fe_dpc"]["mse"],
        "wb_mpc_mse": table["wb_mpc"]["mse"],
    })
    print(f"{'system':>16} {'algorithm':>9} {'mse':>12} {'ctrl s/step':>12}")
    for name in ("fe_dpc", "wb_mpc"):
        row = table[name]
        print(f"{cfg.system:>16} {name:>9} {row['mse']:>12.4g} "
              f"{row['mean_ctrl_seconds']:>12.3e}")
    print(f"baseline/adaptive time ratio: {table['speedup']:.1f}x; saved {paths['benchmark']}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptctl",
        description="Adaptive surrogate control pipeline (collect, train, evaluate).")
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init", help="write a default config for a system")
    init.add_argument("--system", required=True, help="registered system name")
    init.add_argument("--out", required=True, help="config file to write")

    for name, desc in (
        ("collect", "sample systems and record transition datasets"),
        ("train-fe", "train the basis functions on collected datasets"),
        ("bank", "identify one coefficient vector per dataset"),
        ("train-dpc", "train the coefficient-conditioned policy"),
        ("simulate", "run closed-loop episodes and save traces"),
        ("benchmark", "paired comparison against the online baseline"),
    ):
        cmd = sub.add_parser(name, help=desc)
        cmd.add_argument("--config", required=True, help="run config JSON")
        cmd.add_argument("--out", default="out", help="artifact root directory")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        if name == "simulate":
            cmd.add_argument("--algorithm", choices=("fe_dpc", "wb_mpc"),
                             default="fe_dpc")
            cmd.add_argument("--episodes", type=int, default=None)
            cmd.add_argument("--jobs", type=int, default=1)
            cmd.add_argument("--switch", action="store_true",
                             help="apply one silent random parameter switch per episode")
        if name == "benchmark":
            cmd.add_argument("--episodes", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init":
            cfg = default_config(args.system)
            save_config(args.out, cfg)
            print(f"wrote {args.out}: {summarize(cfg)}")
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed).validate()
        paths = _paths(args.out, cfg.system)
        os.makedirs(paths["root"], exist_ok=True)
        if args.command == "collect":
            return stage_collect(cfg, paths)
        if args.command == "train-fe":
            return stage_train_fe(cfg, paths)
        if args.command == "bank":
            return stage_bank(cfg, paths)
        if args.command == "train-dpc":
            return stage_train_dpc(cfg, paths)
        if args.command == "simulate":
            return stage_simulate(cfg, paths, args.algorithm, args.episodes,
                                  args.jobs, args.switch)
        if args.command == "benchmark":
            return stage_benchmark(cfg, paths, args.episodes)
        raise ConfigError(f"unhandled command {args.command}")
    except (ConfigError, MissingArtifactError, FileNotFoundError,
            encoder.TrainingDivergedError, dynamics.CollectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
