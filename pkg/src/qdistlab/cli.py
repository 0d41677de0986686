"""Command-line entry point.

Subcommands: solve, gen-dataset, train, sweep, fourstate {sweep|online},
metrics, report. Exit codes: 0 success, 1 usage or config error,
2 training divergence occurred. Relative output paths are resolved
against $QDISTLAB_OUTPUT_ROOT when set.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2

ENV_IDS = ("grid1", "grid2", "multipath", "fourstate", "pendulum",
           "mountaincar", "cartpole")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_Usage(message)


class SystemExit_Usage(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="qdistlab", description=__doc__.strip().split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("solve", help="emit a reference Q table for an env")
    sp.add_argument("env", choices=ENV_IDS)
    sp.add_argument("--out", default=None, help="output stem (.npz + .json)")
    sp.add_argument("--episodes", type=int, default=20_000,
                    help="table Q-learning budget for simulator envs")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--map", dest="map_path", default=None,
                    help="grid layout file (overrides the built-in layout)")

    gp = sub.add_parser("gen-dataset", help="generate an offline dataset")
    gp.add_argument("env", choices=ENV_IDS)
    gp.add_argument("--policy", required=True,
                    choices=("eps_greedy", "boltzmann", "uniform"))
    gp.add_argument("--param", type=float, default=0.0,
                    help="eps or temperature")
    gp.add_argument("--size", type=int, required=True)
    gp.add_argument("--coverage", action="store_true",
                    help="append one transition per absent (cell, action)")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--qref", default=None,
                    help=".npz with the reference Q (required for"
                         " simulator envs)")
    gp.add_argument("--out", default=None, help="output stem (.npz + .json)")

    tp = sub.add_parser("train", help="train one offline run on a dataset")
    tp.add_argument("algo", choices=("dqn", "cql"))
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--config", default=None,
                    help="JSON file of TrainConfig overrides")
    tp.add_argument("--penalty", default="logsumexp_minus_data",
                    choices=("logsumexp_minus_data", "max_q"))
    tp.add_argument("--qref", default=None)
    tp.add_argument("--out", default="run", help="output stem")
    tp.add_argument("--seed", type=int, default=0)

    wp = sub.add_parser("sweep", help="run an experiment config")
    wp.add_argument("config", help="experiment JSON")
    wp.add_argument("--out", default=None, help="override output directory")
    wp.add_argument("--workers", type=int, default=None)

    fp = sub.add_parser("fourstate", help="diagnostic MDP studies")
    fsub = fp.add_subparsers(dest="fourstate_cmd", required=True)
    fsp = fsub.add_parser("sweep", help="fixed-point sweep over (alpha, q)")
    fsp.add_argument("--mode", default="td", choices=("td", "oracle", "both"))
    fsp.add_argument("--alphas", type=float, nargs="+",
                     default=[1.0, 1.2, 1.25, 1.4])
    fsp.add_argument("--q-step", type=float, default=0.005)
    fsp.add_argument("--out", default="fourstate_sweep")
    fop = fsub.add_parser("online", help="replay-buffer simulation")
    fop.add_argument("--episodes", type=int, default=20_000)
    fop.add_argument("--alpha", type=float, default=1.2)
    fop.add_argument("--eps", type=float, default=0.05,
                     help="exploration rate of the acting policy")
    fop.add_argument("--eta", type=float, default=0.05,
                     help="update step size")
    fop.add_argument("--seed", type=int, default=0)
    fop.add_argument("--capacities", type=int, nargs="+", default=None,
                     help="run the buffer-size study at these capacities"
                          " (0 = unlimited) instead of the standard trio")
    fop.add_argument("--stride", type=int, default=1,
                     help="write every n-th episode row")
    fop.add_argument("--out", default="fourstate_online")

    mp = sub.add_parser("metrics", help="dataset metrics or the Dirichlet"
                                        " sampling study")
    mp.add_argument("dataset", nargs="?", default=None,
                    help="dataset .npz to score")
    mp.add_argument("--dirichlet", action="store_true",
                    help="run the Dirichlet sampling-distribution study")
    mp.add_argument("--alphas", type=float, nargs="+",
                    default=[0.1, 0.3, 1.0, 3.0, 10.0, 1e4])
    mp.add_argument("--pairs", type=int, default=200)
    mp.add_argument("--dists", type=int, default=50)
    mp.add_argument("--sizes", type=int, nargs="+", default=[50, 200, 1000])
    mp.add_argument("--peers", type=int, default=20)
    mp.add_argument("--seed", type=int, default=0)
    mp.add_argument("--out", default=None)

    rp = sub.add_parser("report", help="emit figure-analog CSVs and PNGs")
    rp.add_argument("dir", help="result directory")
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except SystemExit_Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse -h and friends
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ValueError, FileNotFoundError, json.JSONDecodeError, KeyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args) -> int:
    if args.cmd == "solve":
        return _cmd_solve(args)
    if args.cmd == "gen-dataset":
        return _cmd_gen_dataset(args)
    if args.cmd == "train":
        return _cmd_train(args)
    if args.cmd == "sweep":
        return _cmd_sweep(args)
    if args.cmd == "fourstate":
        return _cmd_fourstate(args)
    if args.cmd == "metrics":
        return _cmd_metrics(args)
    if args.cmd == "report":
        return _cmd_report(args)
    raise SystemExit_Usage(f"unknown command {args.cmd!r}")


def _make_env(env_id: str, map_path=None):
    from .envs import make_env
    if map_path is not None:
        if env_id not in ("grid1", "grid2"):
            raise ValueError("--map only applies to grid envs")
        return make_env(f"grid:{map_path}")
    return make_env(env_id)


def _out_stem(path_like, default: str) -> Path:
    from .experiments import resolve_out_dir
    stem = resolve_out_dir(path_like if path_like else default)
    stem.parent.mkdir(parents=True, exist_ok=True)
    return stem


def _cmd_solve(args) -> int:
    from .experiments import solve_reference
    handle = _make_env(args.env, args.map_path)
    q = solve_reference(handle, episodes=args.episodes, seed=args.seed)
    stem = _out_stem(args.out, f"{args.env}_qref")
    np.savez(stem.with_suffix(".npz"), q=q)
    start = handle.reset(np.random.default_rng(0))
    info = {"env": args.env, "n_cells": handle.n_cells,
            "n_actions": handle.n_actions,
            "v_start": float(q[handle.cell_of(start)].max())}
    stem.with_suffix(".json").write_text(
        json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"wrote {stem.with_suffix('.npz')} (v_start="
          f"{info['v_start']:.6g})")
    return EXIT_OK


def _load_qref(handle, qref_path, episodes: int = 20_000, seed: int = 0):
    from .experiments import solve_reference
    if qref_path is not None:
        with np.load(qref_path) as z:
            return z["q"]
    if not handle.is_tabular:
        raise ValueError("simulator envs need --qref (run `qdistlab solve`"
                         " first)")
    return solve_reference(handle, episodes=episodes, seed=seed)


def _cmd_gen_dataset(args) -> int:
    from .datasets import DatasetSpec, enforce_coverage, generate_dataset
    handle = _make_env(args.env)
    q_ref = _load_qref(handle, args.qref)
    spec = DatasetSpec(env=args.env, policy_kind=args.policy,
                       param=args.param, size=args.size, seed=args.seed)
    ds = generate_dataset(handle, q_ref, spec)
    if args.coverage:
        ds = enforce_coverage(ds, handle)
    stem = _out_stem(args.out, f"{args.env}_{args.policy}_{args.param}"
                               f"_{args.size}")
    ds.save(stem.with_suffix(".npz"))
    print(f"wrote {stem.with_suffix('.npz')} ({ds.n} transitions,"
          f" hash {ds.spec.stable_hash()})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .approx import MlpQ, mlp_widths_for
    from .datasets import Dataset
    from .training import (TrainConfig, build_eval_context, offline_cql,
                           offline_dqn)
    ds = Dataset.load(args.dataset)
    handle = _make_env(ds.spec.env)
    q_ref = _load_qref(handle, args.qref)
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    overrides.setdefault("gamma", handle.gamma)
    overrides["seed"] = args.seed
    cfg = TrainConfig(**overrides)
    ctx = build_eval_context(handle, q_ref, seed=0)
    net = MlpQ(handle.obs_dim, mlp_widths_for(handle.is_tabular),
               handle.n_actions, seed=args.seed, activation=cfg.activation)
    if args.algo == "dqn":
        res = offline_dqn(ds, net, cfg, ctx)
    else:
        res = offline_cql(ds, net, cfg, ctx, penalty=args.penalty)
    stem = _out_stem(args.out, "run")
    res.save(stem)
    net.save(str(stem) + ".ckpt")
    print(f"final normalized return {res.final_norm_return:.4f}"
          f" (return {res.final_return:.4f}), diverged={res.diverged}")
    return EXIT_DIVERGED if res.diverged else EXIT_OK


def _cmd_sweep(args) -> int:
    from .experiments import ExperimentConfig, run_experiment
    config = ExperimentConfig.from_json(args.config)
    if args.workers is not None:
        config.n_workers = args.workers
    out = run_experiment(config, out_dir=args.out)
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"wrote {out} ({manifest['n_rows']} runs,"
          f" diverged={manifest['any_diverged']})")
    return EXIT_DIVERGED if manifest["any_diverged"] else EXIT_OK


def _cmd_fourstate(args) -> int:
    if args.fourstate_cmd == "sweep":
        return _cmd_fourstate_sweep(args)
    return _cmd_fourstate_online(args)


def _fourstate_sweep_rows(mode: str, alphas, q_step: float):
    from .fourstate import sweep_offline
    qs = np.arange(q_step, 1.0, q_step)
    rows = []
    for m in (("td", "oracle") if mode == "both" else (mode,)):
        for r in sweep_offline(alphas, qs, mode=m):
            rows.append({"alpha": r.alpha, "q_ratio": r.q_ratio, "mode": m,
                         "correct_actions": r.correct_actions, "w1": r.w1,
                         "w2": r.w2, "w3": r.w3})
    return rows


def _cmd_fourstate_sweep(args) -> int:
    from .experiments import resolve_out_dir
    out = resolve_out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _fourstate_sweep_rows(args.mode, args.alphas, args.q_step)
    lines = ["# fixed-point weights and greedy-policy correctness",
             "alpha,q_ratio,mode,correct_actions,w1,w2,w3"]
    for r in rows:
        lines.append(",".join([repr(float(r["alpha"])),
                               repr(float(r["q_ratio"])), r["mode"],
                               str(r["correct_actions"]), repr(float(r["w1"])),
                               repr(float(r["w2"])), repr(float(r["w3"]))]))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps(
        {"kind": "fourstate_sweep", "alphas": args.alphas,
         "q_step": args.q_step, "mode": args.mode}, indent=2,
        sort_keys=True) + "\n")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return EXIT_OK


def _series_csv(path: Path, res, stride: int) -> None:
    cols = ("episode,w1,w2,w3,mu_s1a0,mu_s1a1,mu_s2a0,mu_s2a1,"
            "correct_actions,greedy_return,q_abs_err")
    lines = ["# online replay-buffer simulation trace", cols]
    n = len(res.correct_actions)
    for i in range(0, n, stride):
        w = res.weights[i]
        mu = res.buffer_mu[i]
        lines.append(",".join([
            str(i), repr(float(w[0])), repr(float(w[1])), repr(float(w[2])),
            repr(float(mu[0])), repr(float(mu[1])), repr(float(mu[2])),
            repr(float(mu[3])), str(int(res.correct_actions[i])),
            repr(float(res.greedy_return[i])),
            repr(float(res.q_abs_err[i]))]))
    path.write_text("\n".join(lines) + "\n")


def _cmd_fourstate_online(args) -> int:
    from .experiments import resolve_out_dir
    from .fourstate import ReplaySpec, online_sim
    out = resolve_out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.capacities:
        specs = [(f"cap_{c if c > 0 else 'unlimited'}",
                  ReplaySpec("eps_greedy", eps=args.eps,
                             capacity=c if c > 0 else None))
                 for c in args.capacities]
    else:
        specs = [("uniform", ReplaySpec("uniform_synthetic")),
                 ("eps_1.0", ReplaySpec("eps_greedy", eps=1.0)),
                 (f"eps_{args.eps}", ReplaySpec("eps_greedy", eps=args.eps))]
    names = []
    for name, spec in specs:
        res = online_sim(spec, episodes=args.episodes, eta=args.eta,
                         seed=args.seed, alpha=args.alpha)
        _series_csv(out / f"online_{name}.csv", res, args.stride)
        names.append(f"online_{name}")
    (out / "manifest.json").write_text(json.dumps(
        {"kind": "fourstate_online", "series": sorted(names),
         "episodes": args.episodes, "alpha": args.alpha,
         "seed": args.seed}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(names)} series to {out}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from .experiments import resolve_out_dir
    if args.dirichlet:
        from .distmetrics import dirichlet_study
        rows = dirichlet_study(n_pairs=args.pairs, alphas=args.alphas,
                               n_dists=args.dists,
                               dataset_sizes=args.sizes,
                               n_peer_dists=args.peers, seed=args.seed)
        out = resolve_out_dir(args.out if args.out else "dirichlet_study")
        out.mkdir(parents=True, exist_ok=True)
        cov_cols = [f"coverage_{s}" for s in args.sizes]
        lines = ["# Dirichlet sampling-distribution study",
                 "alpha,mean_entropy,mean_chi2_to_peers," + ",".join(cov_cols)]
        for r in rows:
            lines.append(",".join(
                [repr(float(r.alpha)), repr(float(r.mean_entropy)),
                 repr(float(r.mean_chi2_to_peers))]
                + [repr(float(r.mean_coverage[s])) for s in args.sizes]))
        (out / "dirichlet_table.csv").write_text("\n".join(lines) + "\n")
        (out / "manifest.json").write_text(json.dumps(
            {"kind": "dirichlet_study", "alphas": args.alphas,
             "sizes": args.sizes, "seed": args.seed}, indent=2,
            sort_keys=True) + "\n")
        print(f"wrote {out / 'dirichlet_table.csv'}")
        return EXIT_OK
    if args.dataset is None:
        raise SystemExit_Usage("metrics needs a dataset path or --dirichlet")
    from .datasets import Dataset, dataset_metrics
    from .mdp import QTable, greedy_policy
    ds = Dataset.load(args.dataset)
    handle = _make_env(ds.spec.env)
    q_ref = _load_qref(handle, None) if handle.is_tabular else None
    if q_ref is None:
        raise ValueError("metrics for simulator envs not wired to a"
                         " reference; use tabular envs or the library API")
    pols, _ = greedy_policy(QTable(q_ref))
    met = dataset_metrics(ds, handle, optimal_policies=[p.probs for p in pols])
    payload = met.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        stem = _out_stem(args.out, "metrics")
        stem.with_suffix(".json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .figures import ReportError, report
    try:
        produced = report(args.dir)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for p in produced:
        print(f"wrote {p}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
