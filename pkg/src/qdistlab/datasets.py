"""Offline transition datasets: generation, coverage patching, metrics.

A dataset is a flat arrays-of-transitions record tied to the spec that
produced it. Regeneration from the same spec is bit-exact, so cached
copies on disk can be trusted by hash alone.

States are stored two ways at once: `cells` / `next_cells` hold the
discrete index every consumer (behavior policies, metrics, coverage)
works with, while `obs` / `next_obs` hold the network-facing encoding
(feature rows for tabular environments, raw observations otherwise).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import EnvHandle
from .mdp import PolicyTable, QTable, behavior_policy, sample_visitation_counts

__all__ = ["DatasetSpec", "Dataset", "generate_dataset", "enforce_coverage",
           "DatasetMetrics", "dataset_metrics", "reference_occupancies",
           "behavior_probs"]

COVERAGE_BUDGET_FACTOR = 2.0


@dataclass(frozen=True)
class DatasetSpec:
    env: str
    policy_kind: str  # "eps_greedy" | "boltzmann" | "uniform"
    param: float      # eps or temperature; ignored for uniform
    size: int
    seed: int
    coverage_enforced: bool = False

    def stable_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Dataset:
    spec: DatasetSpec
    obs: np.ndarray         # [N, obs_dim] float64
    actions: np.ndarray     # [N] int64
    rewards: np.ndarray     # [N] float64
    next_obs: np.ndarray    # [N, obs_dim] float64
    dones: np.ndarray       # [N] bool (terminal, not time-limit)
    cells: np.ndarray       # [N] int64
    next_cells: np.ndarray  # [N] int64

    @property
    def n(self) -> int:
        return len(self.actions)

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, obs=self.obs, actions=self.actions,
                 rewards=self.rewards, next_obs=self.next_obs,
                 dones=self.dones, cells=self.cells,
                 next_cells=self.next_cells)
        sidecar = {
            "spec": self.spec.to_dict(),
            "hash": self.spec.stable_hash(),
            "n": self.n,
            "n_terminal": int(self.dones.sum()),
        }
        path.with_suffix(".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        spec = DatasetSpec.from_dict(sidecar["spec"])
        with np.load(path) as z:
            return cls(spec=spec, obs=z["obs"], actions=z["actions"],
                       rewards=z["rewards"], next_obs=z["next_obs"],
                       dones=z["dones"], cells=z["cells"],
                       next_cells=z["next_cells"])


def behavior_probs(q_ref: np.ndarray, kind: str, param: float) -> np.ndarray:
    """Per-cell action distribution [n_cells, A] derived from a Q table."""
    q = QTable(np.asarray(q_ref, dtype=np.float64))
    if kind == "uniform":
        return np.full_like(q.values, 1.0 / q.values.shape[1])
    if kind == "eps_greedy":
        return behavior_policy(q, "eps_greedy", eps=param).probs
    if kind == "boltzmann":
        return behavior_policy(q, "boltzmann", t=param).probs
    raise ValueError(f"unknown behavior kind: {kind!r}")


def generate_dataset(handle: EnvHandle, q_ref: np.ndarray, spec: DatasetSpec,
                     ) -> Dataset:
    """Roll full episodes under the behavior policy; truncate to spec.size."""
    probs = behavior_probs(q_ref, spec.policy_kind, spec.param)
    cum = np.cumsum(probs, axis=1)
    rng = np.random.default_rng(spec.seed)

    obs, actions, rewards, next_obs, dones = [], [], [], [], []
    cells, next_cells = [], []
    while len(actions) < spec.size:
        state = handle.reset(rng)
        for _ in range(handle.horizon):
            cell = handle.cell_of(state)
            a = int(np.searchsorted(cum[cell], rng.random(), side="right"))
            a = min(a, handle.n_actions - 1)
            nxt, r, done = handle.step(state, a, rng)
            obs.append(handle.obs(state))
            actions.append(a)
            rewards.append(r)
            next_obs.append(handle.obs(nxt))
            dones.append(done)
            cells.append(cell)
            next_cells.append(handle.cell_of(nxt))
            state = nxt
            if done:
                break
    k = spec.size
    return Dataset(spec=spec,
                   obs=np.asarray(obs[:k], dtype=np.float64),
                   actions=np.asarray(actions[:k], dtype=np.int64),
                   rewards=np.asarray(rewards[:k], dtype=np.float64),
                   next_obs=np.asarray(next_obs[:k], dtype=np.float64),
                   dones=np.asarray(dones[:k], dtype=bool),
                   cells=np.asarray(cells[:k], dtype=np.int64),
                   next_cells=np.asarray(next_cells[:k], dtype=np.int64))


def enforce_coverage(dataset: Dataset, handle: EnvHandle,
                     budget_factor: float = COVERAGE_BUDGET_FACTOR) -> Dataset:
    """Append one synthetic transition per absent (cell, action) pair.

    Patch transitions are drawn from the environment's own dynamics at a
    representative state of the cell. The number of appended rows is
    capped at budget_factor * len(dataset); absent pairs are visited in
    index order so the patch set is deterministic.
    """
    present = set(zip(dataset.cells.tolist(), dataset.actions.tolist()))
    budget = int(budget_factor * dataset.n)
    rng = np.random.default_rng(dataset.spec.seed + 1)

    obs, actions, rewards, next_obs, dones = [], [], [], [], []
    cells, next_cells = [], []
    for cell in range(handle.n_cells):
        for a in range(handle.n_actions):
            if (cell, a) in present:
                continue
            if len(actions) >= budget:
                break
            state = handle.state_in_cell(cell, rng)
            nxt, r, done = handle.step(state, a, rng)
            obs.append(handle.obs(state))
            actions.append(a)
            rewards.append(r)
            next_obs.append(handle.obs(nxt))
            dones.append(done)
            cells.append(cell)
            next_cells.append(handle.cell_of(nxt))

    spec = dataclasses.replace(dataset.spec, coverage_enforced=True)
    if not actions:
        return dataclasses.replace(dataset, spec=spec)
    return Dataset(
        spec=spec,
        obs=np.concatenate([dataset.obs, np.asarray(obs, dtype=np.float64)]),
        actions=np.concatenate([dataset.actions,
                                np.asarray(actions, dtype=np.int64)]),
        rewards=np.concatenate([dataset.rewards,
                                np.asarray(rewards, dtype=np.float64)]),
        next_obs=np.concatenate([dataset.next_obs,
                                 np.asarray(next_obs, dtype=np.float64)]),
        dones=np.concatenate([dataset.dones, np.asarray(dones, dtype=bool)]),
        cells=np.concatenate([dataset.cells,
                              np.asarray(cells, dtype=np.int64)]),
        next_cells=np.concatenate([dataset.next_cells,
                                   np.asarray(next_cells, dtype=np.int64)]))


@dataclass(frozen=True)
class DatasetMetrics:
    entropy: float        # normalized to [0, 1] by log(n_cells * n_actions)
    raw_entropy: float
    coverage: float       # fraction of (cell, action) pairs present
    d_pi_star: float      # min TV distance to an optimal-policy occupancy
    size: int
    n_cells: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def empirical_sa_distribution(dataset: Dataset, handle: EnvHandle,
                              ) -> np.ndarray:
    """Flat empirical distribution over (cell, action), shape [cells * A]."""
    flat = dataset.cells * handle.n_actions + dataset.actions
    counts = np.bincount(flat, minlength=handle.n_cells * handle.n_actions)
    return counts / counts.sum()


def reference_occupancies(handle: EnvHandle, policies,
                          n_rollouts: int = 200, seed: int = 0) -> np.ndarray:
    """Episodic visitation distributions [K, cells * A], one per policy.

    `policies` is a sequence of per-cell action-probability tables
    [n_cells, A]. Tabular environments use the exact vectorized sampler;
    simulator-backed ones roll episodes directly.
    """
    rows = []
    for j, probs in enumerate(policies):
        probs = np.asarray(probs, dtype=np.float64)
        sub = np.random.default_rng([seed, j])
        if handle.is_tabular:
            counts = sample_visitation_counts(
                handle.mdp, PolicyTable(probs), n_rollouts=n_rollouts, rng=sub)
        else:
            counts = np.zeros((handle.n_cells, handle.n_actions))
            cum = np.cumsum(probs, axis=1)
            for _ in range(n_rollouts):
                state = handle.reset(sub)
                for _ in range(handle.horizon):
                    cell = handle.cell_of(state)
                    a = int(np.searchsorted(cum[cell], sub.random(),
                                            side="right"))
                    a = min(a, handle.n_actions - 1)
                    counts[cell, a] += 1
                    state, _, done = handle.step(state, a, sub)
                    if done:
                        break
        rows.append(counts.reshape(-1) / counts.sum())
    return np.asarray(rows)


def dataset_metrics(dataset: Dataset, handle: EnvHandle,
                    ref_occupancies: np.ndarray | None = None,
                    optimal_policies=None, n_rollouts: int = 200,
                    seed: int = 0) -> DatasetMetrics:
    """Entropy, coverage, and distance-to-optimal-occupancy for a dataset.

    d_pi_star is min over reference occupancies of the total variation
    distance to the empirical (cell, action) distribution. Pass either
    precomputed `ref_occupancies` or the `optimal_policies` to roll out.
    """
    from .distmetrics import coverage as coverage_fn
    from .distmetrics import entropy as entropy_fn

    mu = empirical_sa_distribution(dataset, handle)
    raw, norm = entropy_fn(mu)
    counts = np.bincount(dataset.cells * handle.n_actions + dataset.actions,
                         minlength=handle.n_cells * handle.n_actions)
    cov = coverage_fn(counts)

    if ref_occupancies is None:
        if optimal_policies is None:
            raise ValueError("need ref_occupancies or optimal_policies")
        ref_occupancies = reference_occupancies(
            handle, optimal_policies, n_rollouts=n_rollouts, seed=seed)
    tv = 0.5 * np.abs(ref_occupancies - mu[None, :]).sum(axis=1)
    return DatasetMetrics(entropy=float(norm), raw_entropy=float(raw),
                          coverage=float(cov), d_pi_star=float(tv.min()),
                          size=dataset.n, n_cells=handle.n_cells)
