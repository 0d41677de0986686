"""Config-driven experiment orchestration with cached datasets.

An offline study walks a dataset grid (behavior policies x coverage
flags) over one or more environments, trains n_runs independently
seeded networks per algorithm at every grid point, and persists
everything needed to rebuild the aggregates from disk: per-run JSON/CSV
pairs, a master runs.csv, aggregate.csv, and a manifest.

Seeds are derived by hashing (seed_root, part...) so re-execution
reproduces every number; datasets are cached by spec hash and never
regenerated on a hit.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx import MlpQ, mlp_widths_for
from .datasets import (Dataset, DatasetSpec, dataset_metrics, enforce_coverage,
                       generate_dataset, reference_occupancies)
from .envs import EnvHandle, make_env
from .mdp import QTable, greedy_policy, value_iteration
from .training import (DATASET_SIZES, LEARNING_STEPS, EvalContext, TrainConfig,
                       build_eval_context, offline_cql, offline_dqn,
                       tabular_q_reference)

__all__ = ["PolicySpec", "ExperimentConfig", "desk_profile", "paper_profile",
           "run_experiment", "stable_seed", "resolve_out_dir",
           "solve_reference", "OUTPUT_ROOT_VAR", "ALGOS"]

OUTPUT_ROOT_VAR = "QDISTLAB_OUTPUT_ROOT"
ALGOS = ("dqn", "cql")
BASE_TARGET_PERIOD = 1_000
REF_EPISODES = 200  # rollouts behind r_opt / r_rand and each occupancy row


def resolve_out_dir(path_like) -> Path:
    """Output path, honoring the QDISTLAB_OUTPUT_ROOT override for
    relative paths."""
    p = Path(path_like)
    root = os.environ.get(OUTPUT_ROOT_VAR)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def stable_seed(root, *parts) -> int:
    """Pure 32-bit seed from the root and any hashable parts."""
    blob = ":".join(str(p) for p in (root, *parts))
    return int(hashlib.sha256(blob.encode("utf-8")).hexdigest()[:8], 16)


@dataclass(frozen=True)
class PolicySpec:
    kind: str    # "eps_greedy" | "boltzmann" | "uniform"
    param: float

    def __post_init__(self):
        if self.kind not in ("eps_greedy", "boltzmann", "uniform"):
            raise ValueError(f"unknown policy kind: {self.kind!r}")
        if self.kind == "eps_greedy" and not 0.0 <= self.param <= 1.0:
            raise ValueError("eps must be in [0, 1]")


@dataclass
class ExperimentConfig:
    kind: str = "offline_study"
    envs: list = field(default_factory=lambda: ["grid1"])
    policies: list = field(default_factory=lambda: [PolicySpec("eps_greedy", e)
                                                    for e in (0.0, 0.5, 1.0)])
    coverage: list = field(default_factory=lambda: [False, True])
    algos: list = field(default_factory=lambda: list(ALGOS))
    n_runs: int = 4
    n_eval_rollouts: int = 5
    seed_root: int = 0
    step_scale: float = 1.0
    dataset_scale: float = 1.0
    penalty: str = "logsumexp_minus_data"
    train_overrides: dict = field(default_factory=dict)
    reference_episodes: int = 20_000  # table Q-learning budget, non-tabular
    out_dir: str = "results"
    n_workers: int = 1
    label: str = ""

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.kind != "offline_study":
            raise ValueError(f"unknown experiment kind: {self.kind!r}")
        bad = [a for a in self.algos if a not in ALGOS]
        if bad:
            raise ValueError(f"unknown algorithms: {bad}")
        self.policies = [p if isinstance(p, PolicySpec) else PolicySpec(**p)
                         for p in self.policies]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policies"] = [dataclasses.asdict(p) for p in self.policies]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def train_config_for(self, env_id: str, gamma: float,
                         seed: int) -> TrainConfig:
        steps = max(1, round(LEARNING_STEPS.get(env_id, 100_000)
                             * self.step_scale))
        period = max(1, round(BASE_TARGET_PERIOD * self.step_scale))
        kw = {"learning_steps": steps, "target_update_period": period,
              "gamma": gamma, "seed": seed,
              "n_eval_rollouts": self.n_eval_rollouts}
        kw.update(self.train_overrides)
        kw["seed"] = seed
        return TrainConfig(**kw)

    def dataset_size_for(self, env_id: str) -> int:
        return max(1, round(DATASET_SIZES.get(env_id, 50_000)
                            * self.dataset_scale))


def desk_profile(**overrides) -> ExperimentConfig:
    """10x reduced learning steps and dataset sizes; CI-friendly."""
    kw = {"step_scale": 0.1, "dataset_scale": 0.1, "label": "desk"}
    kw.update(overrides)
    return ExperimentConfig(**kw)


def paper_profile(**overrides) -> ExperimentConfig:
    """Full-scale hyperparameters."""
    kw = {"step_scale": 1.0, "dataset_scale": 1.0, "label": "paper"}
    kw.update(overrides)
    return ExperimentConfig(**kw)


def solve_reference(handle: EnvHandle, episodes: int = 20_000,
                    seed: int = 0) -> np.ndarray:
    """Reference Q table: exact for tabular envs, table Q-learning over
    discretized cells otherwise."""
    if handle.is_tabular:
        return value_iteration(handle.mdp).values
    return tabular_q_reference(handle, n_episodes=episodes, seed=seed)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


RUN_COLUMNS = ["env", "algo", "policy_kind", "param", "coverage",
               "dataset_hash", "run_index", "seed", "final_return",
               "final_norm_return", "final_q_error", "diverged", "wall_time",
               "entropy", "coverage_frac", "d_pi_star", "error"]

AGG_COLUMNS = ["env", "algo", "policy_kind", "param", "coverage",
               "dataset_hash", "entropy", "coverage_frac", "d_pi_star",
               "mean_norm_return", "std_norm_return", "mean_return",
               "mean_q_error", "n_runs", "n_diverged"]


def _write_csv(path: Path, columns: list, rows: list) -> None:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c)
            if isinstance(v, bool):
                cells.append(str(int(v)))
            elif isinstance(v, float):
                cells.append(_fmt(v))
            elif v is None:
                cells.append("")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


@dataclass
class _RunTask:
    env_id: str
    dataset_path: str
    qref_path: str
    algo: str
    penalty: str
    cfg: dict
    net_seed: int
    out_stem: str
    row_base: dict


def _execute_task(task: _RunTask, preloaded=None) -> dict:
    """Train one run; returns its runs.csv row. `preloaded` carries
    (handle, ctx, dataset) on the serial path to skip re-reading."""
    try:
        if preloaded is None:
            handle = make_env(task.env_id)
            with np.load(task.qref_path) as z:
                q_ref = z["q"]
            ctx = build_eval_context(handle, q_ref, n_episodes=REF_EPISODES,
                                     seed=0)
            dataset = Dataset.load(task.dataset_path)
        else:
            handle, ctx, dataset = preloaded
        cfg = TrainConfig(**task.cfg)
        net = MlpQ(handle.obs_dim, mlp_widths_for(handle.is_tabular),
                   handle.n_actions, seed=task.net_seed,
                   activation=cfg.activation)
        if task.algo == "dqn":
            res = offline_dqn(dataset, net, cfg, ctx)
        else:
            res = offline_cql(dataset, net, cfg, ctx, penalty=task.penalty)
        res.save(task.out_stem)
        net.save(task.out_stem + ".ckpt")
        row = dict(task.row_base)
        row.update(final_return=res.final_return,
                   final_norm_return=res.final_norm_return,
                   final_q_error=res.final_q_error,
                   diverged=res.diverged, wall_time=res.wall_time, error="")
        return row
    except Exception as exc:  # partial failure: record, keep sweeping
        row = dict(task.row_base)
        row.update(final_return=None, final_norm_return=None,
                   final_q_error=None, diverged=False, wall_time=0.0,
                   error=type(exc).__name__ + ": " + str(exc).replace(",", ";"))
        return row


def _load_or_make_dataset(cache_dir: Path, handle: EnvHandle,
                          q_ref: np.ndarray, spec: DatasetSpec) -> Dataset:
    path = cache_dir / f"{spec.stable_hash()}.npz"
    if path.exists():
        return Dataset.load(path)
    base_spec = dataclasses.replace(spec, coverage_enforced=False)
    base_path = cache_dir / f"{base_spec.stable_hash()}.npz"
    if base_path.exists():
        ds = Dataset.load(base_path)
    else:
        ds = generate_dataset(handle, q_ref, base_spec)
        ds.save(base_path)
    if spec.coverage_enforced:
        ds = enforce_coverage(ds, handle)
        ds.save(path)
    return ds


def run_experiment(config: ExperimentConfig, out_dir=None) -> Path:
    """Execute the full grid; returns the result directory.

    Layout: config.json, manifest.json, runs.csv, aggregate.csv,
    datasets/<hash>.npz(+json), refs/<env>_qref.npz, runs/<stem>.{json,csv}.
    """
    t_start = time.time()
    out = resolve_out_dir(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "datasets").mkdir(exist_ok=True)
    (out / "refs").mkdir(exist_ok=True)
    (out / "runs").mkdir(exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    rows = []
    tasks_with_preload = []
    for env_id in config.envs:
        handle = make_env(env_id)
        q_ref = solve_reference(handle, episodes=config.reference_episodes,
                                seed=stable_seed(config.seed_root, "solve",
                                                 env_id))
        qref_path = out / "refs" / f"{env_id}_qref.npz"
        np.savez(qref_path, q=q_ref)
        ctx = build_eval_context(handle, q_ref, n_episodes=REF_EPISODES,
                                 seed=0)
        (out / "refs" / f"{env_id}_refs.json").write_text(json.dumps(
            {"env": env_id, "r_opt": ctx.r_opt, "r_rand": ctx.r_rand,
             "n_cells": handle.n_cells}, indent=2, sort_keys=True) + "\n")
        pols, _ = greedy_policy(QTable(q_ref))
        if not handle.is_tabular:
            pols = pols[:8]  # simulator rollouts are slow; cap the ref set
        occ_refs = reference_occupancies(
            handle, [p.probs for p in pols], n_rollouts=REF_EPISODES,
            seed=stable_seed(config.seed_root, "occ", env_id))

        for j, pol in enumerate(config.policies):
            for cov in config.coverage:
                spec = DatasetSpec(
                    env=env_id, policy_kind=pol.kind, param=pol.param,
                    size=config.dataset_size_for(env_id),
                    seed=stable_seed(config.seed_root, "data", env_id,
                                     pol.kind, pol.param),
                    coverage_enforced=cov)
                dataset = _load_or_make_dataset(out / "datasets", handle,
                                                q_ref, spec)
                met = dataset_metrics(dataset, handle,
                                      ref_occupancies=occ_refs)
                for algo in config.algos:
                    for i in range(config.n_runs):
                        seed = stable_seed(config.seed_root, env_id, j,
                                           int(cov), algo, i)
                        cfg = config.train_config_for(env_id, handle.gamma,
                                                      seed)
                        stem = (out / "runs" /
                                f"{env_id}_p{j}c{int(cov)}_{algo}_r{i}")
                        row_base = {
                            "env": env_id, "algo": algo,
                            "policy_kind": pol.kind, "param": pol.param,
                            "coverage": cov,
                            "dataset_hash": spec.stable_hash(),
                            "run_index": i, "seed": seed,
                            "entropy": met.entropy,
                            "coverage_frac": met.coverage,
                            "d_pi_star": met.d_pi_star,
                        }
                        task = _RunTask(
                            env_id=env_id,
                            dataset_path=str(out / "datasets" /
                                             f"{spec.stable_hash()}.npz"),
                            qref_path=str(qref_path), algo=algo,
                            penalty=config.penalty, cfg=cfg.to_dict(),
                            net_seed=seed, out_stem=str(stem),
                            row_base=row_base)
                        tasks_with_preload.append(
                            (task, (handle, ctx, dataset)))

    if config.n_workers > 1:
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            rows = list(pool.map(_execute_task,
                                 [t for t, _ in tasks_with_preload]))
    else:
        rows = [_execute_task(t, preloaded=pre)
                for t, pre in tasks_with_preload]

    _write_csv(out / "runs.csv", RUN_COLUMNS, rows)
    agg_rows = _aggregate(rows)
    _write_csv(out / "aggregate.csv", AGG_COLUMNS, agg_rows)

    any_diverged = any(r["diverged"] for r in rows)
    any_error = any(r["error"] for r in rows)
    manifest = {
        "kind": config.kind,
        "label": config.label,
        "any_diverged": any_diverged,
        "any_error": any_error,
        "n_rows": len(rows),
        "wall_time": time.time() - t_start,
        "columns": {"runs": RUN_COLUMNS, "aggregate": AGG_COLUMNS},
        "normalized_return_clip": [-0.1, 1.1],
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _aggregate(rows: list) -> list:
    """Group per-run rows by grid point; mean of per-run means."""
    groups: dict = {}
    for r in rows:
        key = (r["env"], r["algo"], r["policy_kind"], r["param"],
               r["coverage"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        g = groups[key]
        ok = [r for r in g if r["error"] == "" and not r["diverged"]]
        norm = [r["final_norm_return"] for r in ok
                if r["final_norm_return"] is not None]
        rets = [r["final_return"] for r in ok if r["final_return"] is not None]
        qerr = [r["final_q_error"] for r in ok
                if r["final_q_error"] is not None]
        out.append({
            "env": key[0], "algo": key[1], "policy_kind": key[2],
            "param": key[3], "coverage": key[4],
            "dataset_hash": g[0]["dataset_hash"],
            "entropy": g[0]["entropy"],
            "coverage_frac": g[0]["coverage_frac"],
            "d_pi_star": g[0]["d_pi_star"],
            "mean_norm_return": float(np.mean(norm)) if norm else None,
            "std_norm_return": float(np.std(norm)) if norm else None,
            "mean_return": float(np.mean(rets)) if rets else None,
            "mean_q_error": float(np.mean(qerr)) if qerr else None,
            "n_runs": len(g),
            "n_diverged": sum(1 for r in g if r["diverged"]),
        })
    return out


def read_csv_rows(path) -> list:
    """Tiny typed CSV reader for the files this package writes.
    Leading '#' comment lines are skipped."""
    lines = Path(path).read_text().strip().split("\n")
    while lines and lines[0].startswith("#"):
        lines = lines[1:]
    cols = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for c, v in zip(cols, cells):
            if v == "":
                row[c] = None
            else:
                try:
                    row[c] = int(v) if v.lstrip("-").isdigit() else float(v)
                except ValueError:
                    row[c] = v
        rows.append(row)
    return rows
