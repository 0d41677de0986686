"""Tabular MDP primitives: models, exact solvers, policies, occupancies.

Everything here works on dense numpy arrays indexed as [state, action] or
[state, action, next_state]. All container types are frozen after
construction; the arrays they carry are marked read-only.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TabularMdp",
    "QTable",
    "PolicyTable",
    "DistributionSA",
    "value_iteration",
    "policy_q_values",
    "greedy_policy",
    "behavior_policy",
    "uniform_policy",
    "occupancy_sa",
]

BOLTZMANN_T_MIN = 1e-3
GREEDY_ENUM_CAP = 4096

_ROW_SUM_ATOL = 1e-12


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense transition tensor and per-(s,a) rewards.

    transitions: [S, A, S] row-stochastic in the last axis.
    rewards: [S, A], finite.
    initial_dist: [S] distribution over start states.
    terminal_mask: [S] bool; terminal states self-loop with reward 0.
    horizon: episode length cap used by rollouts and visitation counts.
    state_features: optional [S, d] features consumed by function
        approximators (not by the exact solvers).
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminal_mask: np.ndarray
    horizon: int
    state_features: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        p = _frozen(self.transitions)
        r = _frozen(self.rewards)
        p0 = _frozen(self.initial_dist)
        term = _frozen(self.terminal_mask, dtype=bool)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "terminal_mask", term)
        if self.state_features is not None:
            object.__setattr__(self, "state_features", _frozen(self.state_features))

        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transitions must be [S, A, S], got {p.shape}")
        n_s, n_a = p.shape[0], p.shape[1]
        if r.shape != (n_s, n_a):
            raise ValueError(f"rewards must be [S, A] = {(n_s, n_a)}, got {r.shape}")
        if p0.shape != (n_s,) or term.shape != (n_s,):
            raise ValueError("initial_dist and terminal_mask must have shape [S]")
        if not np.isfinite(r).all():
            raise ValueError("rewards must be finite")
        if (p < 0).any():
            raise ValueError("transition probabilities must be nonnegative")
        row_err = np.abs(p.sum(axis=2) - 1.0).max()
        if row_err > _ROW_SUM_ATOL:
            raise ValueError(f"transition rows must sum to 1 (max error {row_err:.3e})")
        if (p0 < 0).any() or abs(p0.sum() - 1.0) > _ROW_SUM_ATOL:
            raise ValueError("initial_dist must be a distribution")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for s in np.flatnonzero(term):
            if not (p[s, :, s] == 1.0).all() or not (r[s, :] == 0.0).all():
                raise ValueError(f"terminal state {s} must self-loop with reward 0")
        if self.gamma == 1.0:
            self._check_all_policies_proper()

    def _check_all_policies_proper(self):
        # Max probability of staying out of terminal states for k steps,
        # maximized over (non-stationary) policies; must vanish for gamma=1.
        nonterm = ~self.terminal_mask
        x = nonterm.astype(np.float64)
        for _ in range(100_000):
            x_new = np.where(nonterm, (self.transitions @ x).max(axis=1), 0.0)
            if x_new.max() < 1e-9:
                return
            if np.array_equal(x_new, x):
                break
            x = x_new
        raise ValueError(
            "gamma=1 requires every policy to reach a terminal state "
            "with probability 1"
        )

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def to_dict(self) -> dict:
        d = {
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "terminal_mask": self.terminal_mask.tolist(),
            "horizon": self.horizon,
            "name": self.name,
        }
        if self.state_features is not None:
            d["state_features"] = self.state_features.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        feats = d.get("state_features")
        return cls(
            transitions=np.array(d["transitions"]),
            rewards=np.array(d["rewards"]),
            gamma=float(d["gamma"]),
            initial_dist=np.array(d["initial_dist"]),
            terminal_mask=np.array(d["terminal_mask"], dtype=bool),
            horizon=int(d["horizon"]),
            state_features=None if feats is None else np.array(feats),
            name=d.get("name", ""),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path: str | Path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QTable:
    """Action-value table, shape [S, A]."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("QTable values must be [S, A]")
        if not np.isfinite(v).all():
            raise ValueError("QTable values must be finite")


@dataclass(frozen=True)
class PolicyTable:
    """Stochastic policy as a row-stochastic [S, A] matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("PolicyTable probs must be [S, A]")
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > _ROW_SUM_ATOL:
            raise ValueError("PolicyTable rows must be distributions")

    @classmethod
    def from_actions(cls, actions: np.ndarray, n_actions: int) -> "PolicyTable":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def actions_if_deterministic(self) -> np.ndarray:
        if not np.isin(self.probs, (0.0, 1.0)).all():
            raise ValueError("policy is not deterministic")
        return self.probs.argmax(axis=1)


@dataclass(frozen=True)
class DistributionSA:
    """Joint distribution over state-action pairs, shape [S, A]."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("DistributionSA probs must be [S, A]")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("DistributionSA must be a distribution over S x A")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "DistributionSA":
        return cls(np.full((n_states, n_actions), 1.0 / (n_states * n_actions)))

    def state_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10,
                    max_sweeps: int = 100_000) -> QTable:
    """Solve for Q* by dense Bellman optimality sweeps.

    Terminates when the sup-norm change of Q between sweeps is <= tol.
    Raises RuntimeError (naming the residual) if max_sweeps is exhausted.
    """
    n_s, n_a = mdp.n_states, mdp.n_actions
    nonterm = ~mdp.terminal_mask
    q = np.zeros((n_s, n_a))
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        q_new = mdp.rewards + mdp.gamma * (mdp.transitions @ v)
        q_new *= nonterm[:, None]
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual <= tol:
            return QTable(q)
    raise RuntimeError(
        f"value iteration did not converge: residual {residual:.3e} > {tol:.1e} "
        f"after {max_sweeps} sweeps"
    )


def policy_q_values(mdp: TabularMdp, policy: PolicyTable, tol: float = 1e-12,
                    max_sweeps: int = 100_000) -> QTable:
    """Evaluate Q^pi for a fixed policy by expectation backups."""
    nonterm = ~mdp.terminal_mask
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_sweeps):
        v = (policy.probs * q).sum(axis=1)
        q_new = mdp.rewards + mdp.gamma * (mdp.transitions @ v)
        q_new *= nonterm[:, None]
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual <= tol:
            return QTable(q)
    raise RuntimeError(f"policy evaluation did not converge (residual {residual:.3e})")


def greedy_policy(q: QTable, tie_tol: float = 1e-9,
                  max_policies: int = GREEDY_ENUM_CAP
                  ) -> tuple[list[PolicyTable], bool]:
    """Enumerate deterministic greedy policies of q, treating per-row values
    within tie_tol of the row max as tied.

    Returns (policies, truncated). At most max_policies are materialized;
    truncated=True means the full tie product was larger.
    """
    v = q.values
    n_s, n_a = v.shape
    tied_rows = [np.flatnonzero(v[s] >= v[s].max() - tie_tol) for s in range(n_s)]
    total = 1
    for row in tied_rows:
        total *= len(row)
        if total > max_policies:
            break
    truncated = total > max_policies
    policies = []
    for combo in itertools.islice(itertools.product(*tied_rows), max_policies):
        policies.append(PolicyTable.from_actions(np.array(combo), n_a))
    return policies, truncated


def behavior_policy(q: QTable, kind: str, *, eps: float | None = None,
                    t: float | None = None) -> PolicyTable:
    """Build a stochastic behavior policy from a Q-table.

    kind="eps_greedy": greedy mass (1-eps) on the single argmax action
    (ties broken toward the lowest action index, keeping eps=0 data as
    narrow as a deterministic policy's), plus eps/A on everything.
    kind="boltzmann": rows proportional to exp(Q/t); negative t flips the
    preference toward low-value actions. |t| below 1e-3 is rejected.
    """
    v = q.values
    n_s, n_a = v.shape
    if kind == "eps_greedy":
        if eps is None or not (0.0 <= eps <= 1.0):
            raise ValueError("eps_greedy requires eps in [0, 1]")
        probs = np.full((n_s, n_a), eps / n_a)
        probs[np.arange(n_s), v.argmax(axis=1)] += 1.0 - eps
        return PolicyTable(probs)
    if kind == "boltzmann":
        if t is None or abs(t) < BOLTZMANN_T_MIN:
            raise ValueError(f"boltzmann requires |t| >= {BOLTZMANN_T_MIN}")
        z = v / t
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        return PolicyTable(probs)
    raise ValueError(f"unknown behavior policy kind {kind!r}")


def uniform_policy(mdp: TabularMdp) -> PolicyTable:
    return PolicyTable(np.full((mdp.n_states, mdp.n_actions),
                               1.0 / mdp.n_actions))


def occupancy_sa(mdp: TabularMdp, policy: PolicyTable, mode: str = "discounted",
                 n_rollouts: int = 200, seed: int = 0) -> DistributionSA:
    """State-action occupancy of a policy.

    mode="discounted": gamma^t-weighted visitation probabilities, computed
    exactly by a forward recursion up to the horizon and normalized.
    mode="episodic_visitation": empirical (s,a) frequency over n_rollouts
    episodes (vectorized simulation); episodes stop at terminal states or
    at the horizon.
    """
    if mode == "discounted":
        return _occupancy_discounted(mdp, policy)
    if mode == "episodic_visitation":
        return _occupancy_episodic(mdp, policy, n_rollouts, seed)
    raise ValueError(f"unknown occupancy mode {mode!r}")


def _occupancy_discounted(mdp: TabularMdp, policy: PolicyTable) -> DistributionSA:
    d = mdp.initial_dist.copy()
    nonterm = (~mdp.terminal_mask).astype(np.float64)
    occ = np.zeros((mdp.n_states, mdp.n_actions))
    weight = 1.0
    for _ in range(mdp.horizon):
        active = d * nonterm
        if weight * active.sum() < 1e-12:
            break
        sa = active[:, None] * policy.probs
        occ += weight * sa
        d = np.einsum("sa,sap->p", sa, mdp.transitions)
        weight *= mdp.gamma
    total = occ.sum()
    if total <= 0:
        raise ValueError("occupancy has no mass (start states all terminal?)")
    return DistributionSA(occ / total)


def _occupancy_episodic(mdp: TabularMdp, policy: PolicyTable, n_rollouts: int,
                        seed: int) -> DistributionSA:
    rng = np.random.default_rng(seed)
    counts = sample_visitation_counts(mdp, policy, n_rollouts, rng)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no transitions sampled (start states all terminal?)")
    return DistributionSA(counts / total)


def sample_visitation_counts(mdp: TabularMdp, policy: PolicyTable,
                             n_rollouts: int, rng: np.random.Generator
                             ) -> np.ndarray:
    """Raw (s,a) visit counts over n_rollouts episodes, simulated with all
    episodes advanced in lockstep."""
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_p = np.cumsum(mdp.transitions, axis=2)
    states = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.initial_dist)
    alive = ~mdp.terminal_mask[states]
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(mdp.horizon):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        s = states[idx]
        u = rng.random(idx.size)
        a = (cum_pi[s] < u[:, None]).sum(axis=1)
        np.add.at(counts, (s, a), 1.0)
        u2 = rng.random(idx.size)
        ns = (cum_p[s, a] < u2[:, None]).sum(axis=1)
        states[idx] = ns
        alive[idx] = ~mdp.terminal_mask[ns]
    return counts
