"""Offline DQN, offline CQL, and a generic online Q-learning loop.

All three trainers share one gradient step: squared TD error against a
periodically synced target network, plus an optional conservatism
penalty. Networks are the heads from .approx; LinearQ consumes cell ids
directly, MlpQ consumes observation rows, and the loops dispatch on
which one they were handed.

Evaluation is greedy rollouts. Normalized return rescales raw return by
precomputed optimal/uniform baselines and clips to [-0.1, 1.1].
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .approx import Adam, LinearQ
from .datasets import Dataset
from .envs import EnvHandle
from .mdp import PolicyTable, QTable, greedy_policy

__all__ = ["TrainConfig", "ReplayBuffer", "RunResult", "EvalContext",
           "EvalResult", "offline_dqn", "offline_cql", "online_q_learning",
           "evaluate", "build_eval_context", "tabular_q_reference",
           "default_train_config", "NORM_CLIP", "PENALTIES"]

NORM_CLIP = (-0.1, 1.1)
PENALTIES = ("logsumexp_minus_data", "max_q")

# full-scale learning-step and dataset-size defaults, keyed by env id
LEARNING_STEPS = {"grid1": 100_000, "grid2": 100_000, "multipath": 100_000,
                  "pendulum": 200_000, "mountaincar": 200_000,
                  "cartpole": 500_000, "fourstate": 20_000}
DATASET_SIZES = {"grid1": 50_000, "grid2": 50_000, "multipath": 50_000,
                 "pendulum": 200_000, "mountaincar": 200_000,
                 "cartpole": 1_000_000, "fourstate": 10_000}


@dataclass
class TrainConfig:
    learning_steps: int = 100_000
    batch_size: int = 100
    target_update_period: int = 1_000
    lr: float = 1e-3
    gamma: float = 0.99
    cql_alpha: float = 1.0
    seed: int = 0
    eval_every_frac: float = 0.05
    n_eval_rollouts: int = 5
    divergence_threshold: float = 1e6
    env_steps_per_iter: int = 1    # S in the online loop
    grad_steps_per_iter: int = 1   # G in the online loop
    online_eps: float = 0.1
    replay_capacity: int | None = None
    activation: str = "relu"
    grad_clip: float | None = None  # global-norm clip; None = off

    def __post_init__(self):
        for name in ("learning_steps", "batch_size", "target_update_period",
                     "n_eval_rollouts", "env_steps_per_iter",
                     "grad_steps_per_iter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.replay_capacity is not None and self.replay_capacity <= 0:
            raise ValueError("replay_capacity must be positive or None")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_train_config(env_id: str, gamma: float, **overrides) -> TrainConfig:
    kw = {"learning_steps": LEARNING_STEPS.get(env_id, 100_000),
          "gamma": gamma}
    kw.update(overrides)
    return TrainConfig(**kw)


class ReplayBuffer:
    """FIFO transition store (ring buffer) with per-(cell, action) counts."""

    def __init__(self, capacity: int | None, n_cells: int, n_actions: int):
        if capacity is not None and capacity <= 0:
            raise ValueError("capacity must be positive or None")
        self.capacity = capacity
        self._storage: list = []
        self._pos = 0
        self.counts = np.zeros((n_cells, n_actions), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._storage)

    def add(self, x, action: int, reward: float, nx, done: bool,
            cell: int) -> None:
        t = (x, action, reward, nx, done, cell)
        if self.capacity is not None and len(self._storage) == self.capacity:
            old = self._storage[self._pos]
            self.counts[old[5], old[1]] -= 1
            self._storage[self._pos] = t
            self._pos = (self._pos + 1) % self.capacity
        else:
            self._storage.append(t)
        self.counts[cell, action] += 1

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(self._storage), batch_size)
        rows = [self._storage[i] for i in idx]
        x = np.asarray([r[0] for r in rows])
        a = np.asarray([r[1] for r in rows], dtype=np.int64)
        rew = np.asarray([r[2] for r in rows], dtype=np.float64)
        nx = np.asarray([r[3] for r in rows])
        done = np.asarray([r[4] for r in rows], dtype=np.float64)
        return x, a, rew, nx, done


class EvalResult(NamedTuple):
    mean_return: float
    norm_return: float | None
    q_error: float | None


@dataclass
class EvalContext:
    """Per-env references for normalized return and Q-error."""
    handle: EnvHandle
    r_opt: float
    r_rand: float
    q_ref: np.ndarray | None = None          # [n_cells, n_actions]
    cell_inputs: np.ndarray | None = None    # MlpQ inputs for every cell

    def normalize(self, ret: float) -> float:
        span = self.r_opt - self.r_rand
        if span == 0.0:
            raise ValueError("degenerate references: r_opt == r_rand")
        return float(np.clip((ret - self.r_rand) / span, *NORM_CLIP))


def _all_cell_inputs(handle: EnvHandle) -> np.ndarray | None:
    if handle.is_tabular:
        if handle.mdp.state_features is None:
            return None
        return np.asarray(handle.mdp.state_features, dtype=np.float64)
    centers = [handle.sim.obs(handle.disc.cell_center(c))
               for c in range(handle.n_cells)]
    return np.asarray(centers, dtype=np.float64)


def build_eval_context(handle: EnvHandle, q_ref: np.ndarray | None,
                       n_episodes: int = 200, seed: int = 0) -> EvalContext:
    """Roll the greedy-on-reference and uniform baselines (200 episodes)."""
    if q_ref is None:
        raise ValueError("q_ref required to build references")
    q_ref = np.asarray(q_ref, dtype=np.float64)
    greedy = greedy_policy(QTable(q_ref), max_policies=1)[0][0]
    rng = np.random.default_rng([seed, 101])
    r_opt = _policy_mean_return(handle, greedy.probs, n_episodes, rng)
    rng = np.random.default_rng([seed, 202])
    uni = np.full((handle.n_cells, handle.n_actions), 1.0 / handle.n_actions)
    r_rand = _policy_mean_return(handle, uni, n_episodes, rng)
    return EvalContext(handle=handle, r_opt=r_opt, r_rand=r_rand, q_ref=q_ref,
                       cell_inputs=_all_cell_inputs(handle))


def _policy_mean_return(handle: EnvHandle, probs: np.ndarray, n_episodes: int,
                        rng: np.random.Generator) -> float:
    cum = np.cumsum(probs, axis=1)
    total = 0.0
    for _ in range(n_episodes):
        state = handle.reset(rng)
        for _ in range(handle.horizon):
            cell = handle.cell_of(state)
            a = min(int(np.searchsorted(cum[cell], rng.random(), side="right")),
                    handle.n_actions - 1)
            state, r, done = handle.step(state, a, rng)
            total += r
            if done:
                break
    return total / n_episodes


def _net_act_fn(net, handle: EnvHandle):
    if isinstance(net, LinearQ):
        return lambda state: int(np.argmax(net.forward(
            np.array([handle.cell_of(state)]))[0]))
    return lambda state: int(np.argmax(net.forward(handle.obs(state))[0]))


def _net_q_error(net, ctx: EvalContext) -> float | None:
    if ctx.q_ref is None:
        return None
    if isinstance(net, LinearQ):
        q = net.forward(np.arange(ctx.handle.n_cells))
    else:
        if ctx.cell_inputs is None:
            return None
        q = net.forward(ctx.cell_inputs)
    return float(np.abs(q - ctx.q_ref).mean())


def evaluate(subject, handle: EnvHandle, n_rollouts: int, seed,
             ctx: EvalContext | None = None) -> EvalResult:
    """Greedy (or table-sampled) rollouts; undiscounted mean return.

    `subject` is a network (MlpQ / LinearQ) or a PolicyTable over cells.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(subject, PolicyTable):
        cum = np.cumsum(subject.probs, axis=1)

        def act(state):
            cell = handle.cell_of(state)
            return min(int(np.searchsorted(cum[cell], rng.random(),
                                           side="right")),
                       handle.n_actions - 1)
    else:
        act = _net_act_fn(subject, handle)

    total = 0.0
    for _ in range(n_rollouts):
        state = handle.reset(rng)
        for _ in range(handle.horizon):
            state, r, done = handle.step(state, act(state), rng)
            total += r
            if done:
                break
    mean_ret = total / n_rollouts
    norm = ctx.normalize(mean_ret) if ctx is not None else None
    q_err = None
    if ctx is not None and not isinstance(subject, PolicyTable):
        q_err = _net_q_error(subject, ctx)
    return EvalResult(mean_ret, norm, q_err)


@dataclass
class RunResult:
    algo: str
    config: dict
    eval_steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    norm_returns: list = field(default_factory=list)
    q_errors: list = field(default_factory=list)
    diverged: bool = False
    diverged_step: int | None = None
    diverged_loss: float | None = None
    diverged_max_q: float | None = None
    wall_time: float = 0.0

    @property
    def final_return(self) -> float:
        return self.returns[-1]

    @property
    def final_norm_return(self) -> float | None:
        return self.norm_returns[-1]

    @property
    def final_q_error(self) -> float | None:
        return self.q_errors[-1]

    def summary_dict(self) -> dict:
        return {
            "algo": self.algo,
            "config": self.config,
            "diverged": self.diverged,
            "diverged_step": self.diverged_step,
            "diverged_loss": self.diverged_loss,
            "diverged_max_q": self.diverged_max_q,
            "wall_time": self.wall_time,
            "final_return": self.final_return,
            "final_norm_return": self.final_norm_return,
            "final_q_error": self.final_q_error,
        }

    def save(self, stem) -> None:
        """Write <stem>.json (summary) and <stem>.csv (time series)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(
            json.dumps(self.summary_dict(), indent=2, sort_keys=True,
                       default=float) + "\n")
        lines = ["step,loss,eval_return,normalized_return,q_error"]
        for i, s in enumerate(self.eval_steps):
            norm = self.norm_returns[i]
            qe = self.q_errors[i]
            lines.append(",".join([
                str(s), _fmt(self.losses[i]), _fmt(self.returns[i]),
                _fmt(norm) if norm is not None else "",
                _fmt(qe) if qe is not None else ""]))
        stem.with_suffix(".csv").write_text("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def _td_cql_grad(net, target, x, a, rew, nx, done, cfg: TrainConfig,
                 penalty: str | None):
    """One loss/gradient evaluation. Returns (loss, max|Q|, grads, cache)."""
    b = len(a)
    tq = target.forward(nx)
    y = rew + cfg.gamma * (1.0 - done) * tq.max(axis=1)
    q, cache = net.forward_cached(x)
    rows = np.arange(b)
    qa = q[rows, a]
    diff = qa - y
    loss = float(np.mean(diff * diff))
    dout = np.zeros_like(q)
    dout[rows, a] = 2.0 * diff / b

    if penalty is not None and cfg.cql_alpha != 0.0:
        scale = cfg.cql_alpha / b
        if penalty == "logsumexp_minus_data":
            zmax = q.max(axis=1, keepdims=True)
            ez = np.exp(q - zmax)
            sez = ez.sum(axis=1)
            lse = np.log(sez) + zmax[:, 0]
            loss += cfg.cql_alpha * float(np.mean(lse - qa))
            dout += scale * (ez / sez[:, None])
            dout[rows, a] -= scale
        elif penalty == "max_q":
            amax = q.argmax(axis=1)
            loss += cfg.cql_alpha * float(np.mean(q[rows, amax]))
            dout[rows, amax] += scale
        else:
            raise ValueError(f"unknown penalty: {penalty!r}")

    max_q = float(np.abs(q).max())
    return loss, max_q, net.backward(cache, dout), q


def _clip_grads(grads: list, max_norm: float | None) -> list:
    if max_norm is None:
        return grads
    total = float(np.sqrt(sum((g * g).sum() for g in grads)))
    if total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def _run_offline(dataset: Dataset, net, cfg: TrainConfig, ctx: EvalContext,
                 penalty: str | None, algo: str) -> RunResult:
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    t0 = time.time()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.lr)
    target = net.clone()

    linear = isinstance(net, LinearQ)
    X = dataset.cells if linear else dataset.obs
    NX = dataset.next_cells if linear else dataset.next_obs
    A, R, D = dataset.actions, dataset.rewards, dataset.dones.astype(np.float64)

    result = RunResult(algo=algo, config={**cfg.to_dict(), "penalty": penalty})
    eval_every = max(1, int(round(cfg.eval_every_frac * cfg.learning_steps)))
    loss_acc, loss_n = 0.0, 0

    def record(step: int) -> None:
        nonlocal loss_acc, loss_n
        ev = evaluate(net, ctx.handle, cfg.n_eval_rollouts,
                      [cfg.seed, 7, step], ctx)
        result.eval_steps.append(step)
        result.losses.append(loss_acc / loss_n if loss_n else float("nan"))
        result.returns.append(ev.mean_return)
        result.norm_returns.append(ev.norm_return)
        result.q_errors.append(ev.q_error)
        loss_acc, loss_n = 0.0, 0

    record(0)
    for step in range(cfg.learning_steps):
        if step % cfg.target_update_period == 0:
            target = net.clone()
        idx = rng.integers(0, dataset.n, cfg.batch_size)
        loss, max_q, grads, _ = _td_cql_grad(
            net, target, X[idx], A[idx], R[idx], NX[idx], D[idx], cfg, penalty)
        if not np.isfinite(loss) or max_q > cfg.divergence_threshold:
            result.diverged = True
            result.diverged_step = step
            result.diverged_loss = loss
            result.diverged_max_q = max_q
            break
        opt.step(net.params(), _clip_grads(grads, cfg.grad_clip))
        loss_acc += loss
        loss_n += 1
        if (step + 1) % eval_every == 0 or step + 1 == cfg.learning_steps:
            record(step + 1)
    if result.diverged:
        record(result.diverged_step)
    result.wall_time = time.time() - t0
    return result


def offline_dqn(dataset: Dataset, net, cfg: TrainConfig,
                ctx: EvalContext) -> RunResult:
    return _run_offline(dataset, net, cfg, ctx, penalty=None, algo="dqn")


def offline_cql(dataset: Dataset, net, cfg: TrainConfig, ctx: EvalContext,
                penalty: str = "logsumexp_minus_data") -> RunResult:
    if penalty not in PENALTIES:
        raise ValueError(f"penalty must be one of {PENALTIES}")
    return _run_offline(dataset, net, cfg, ctx, penalty=penalty, algo="cql")


def online_q_learning(handle: EnvHandle, net, replay: ReplayBuffer,
                      cfg: TrainConfig, ctx: EvalContext,
                      eps_schedule=None) -> RunResult:
    """S environment steps then G gradient steps, repeated; FIFO replay.

    The behavior policy is eps-greedy on the live network;
    `eps_schedule` maps gradient step -> eps (default: constant
    cfg.online_eps). The first update waits until the buffer holds at
    least one batch.
    """
    if replay.capacity is not None and replay.capacity < cfg.batch_size:
        raise ValueError("replay capacity below batch size")
    if eps_schedule is None:
        eps_schedule = lambda step: cfg.online_eps
    t0 = time.time()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.lr)
    target = net.clone()
    linear = isinstance(net, LinearQ)
    act_greedy = _net_act_fn(net, handle)

    result = RunResult(algo="online", config={**cfg.to_dict(), "penalty": None})
    eval_every = max(1, int(round(cfg.eval_every_frac * cfg.learning_steps)))
    loss_acc, loss_n = 0.0, 0

    def record(step: int) -> None:
        nonlocal loss_acc, loss_n
        ev = evaluate(net, handle, cfg.n_eval_rollouts, [cfg.seed, 7, step], ctx)
        result.eval_steps.append(step)
        result.losses.append(loss_acc / loss_n if loss_n else float("nan"))
        result.returns.append(ev.mean_return)
        result.norm_returns.append(ev.norm_return)
        result.q_errors.append(ev.q_error)
        loss_acc, loss_n = 0.0, 0

    state = handle.reset(rng)
    t_in_ep = 0

    def env_step(eps: float) -> None:
        nonlocal state, t_in_ep
        cell = handle.cell_of(state)
        if rng.random() < eps:
            a = int(rng.integers(handle.n_actions))
        else:
            a = act_greedy(state)
        nxt, r, done = handle.step(state, a, rng)
        x = cell if linear else handle.obs(state)
        nx = handle.cell_of(nxt) if linear else handle.obs(nxt)
        replay.add(x, a, r, nx, done, cell)
        state = nxt
        t_in_ep += 1
        if done or t_in_ep >= handle.horizon:
            state = handle.reset(rng)
            t_in_ep = 0

    record(0)
    step = 0
    while step < cfg.learning_steps:
        if step % cfg.target_update_period == 0:
            target = net.clone()
        for _ in range(cfg.env_steps_per_iter):
            env_step(eps_schedule(step))
        while len(replay) < cfg.batch_size:
            env_step(eps_schedule(step))
        for _ in range(cfg.grad_steps_per_iter):
            x, a, rew, nx, done = replay.sample(rng, cfg.batch_size)
            loss, max_q, grads, _ = _td_cql_grad(
                net, target, x, a, rew, nx, done, cfg, None)
            if not np.isfinite(loss) or max_q > cfg.divergence_threshold:
                result.diverged = True
                result.diverged_step = step
                result.diverged_loss = loss
                result.diverged_max_q = max_q
                record(step)
                result.wall_time = time.time() - t0
                return result
            opt.step(net.params(), _clip_grads(grads, cfg.grad_clip))
            loss_acc += loss
            loss_n += 1
            step += 1
            if step % eval_every == 0 or step == cfg.learning_steps:
                record(step)
            if step >= cfg.learning_steps:
                break
    result.wall_time = time.time() - t0
    return result


def tabular_q_reference(handle: EnvHandle, n_episodes: int = 20_000,
                        lr: float = 0.1, eps_start: float = 1.0,
                        eps_end: float = 0.05, seed: int = 0) -> np.ndarray:
    """Plain table Q-learning over discretized cells.

    Reference solver for simulator-backed environments where value
    iteration is unavailable. eps anneals linearly across episodes.
    """
    rng = np.random.default_rng(seed)
    q = np.zeros((handle.n_cells, handle.n_actions))
    for ep in range(n_episodes):
        eps = eps_start + (eps_end - eps_start) * ep / max(1, n_episodes - 1)
        state = handle.reset(rng)
        for _ in range(handle.horizon):
            cell = handle.cell_of(state)
            if rng.random() < eps:
                a = int(rng.integers(handle.n_actions))
            else:
                a = int(np.argmax(q[cell]))
            nxt, r, done = handle.step(state, a, rng)
            ncell = handle.cell_of(nxt)
            boot = 0.0 if done else q[ncell].max()
            q[cell, a] += lr * (r + handle.gamma * boot - q[cell, a])
            state = nxt
            if done:
                break
    return q
