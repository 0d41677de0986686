"""A four-state diagnostic MDP with a linear approximator that ties two
states' values together through a shared weight.

States: s1 (start), s2, and two absorbing states. Two actions everywhere.
From s1, action 0 pays 100 and almost always terminates (probability 0.01
of reaching s2); action 1 pays -10 and moves to s2. From s2, action 0 pays
-35 and action 1 pays 30, both terminating. gamma = 1.

Features (3 weights, alpha in [1, 1.5)):
    Q(s1,a0) = w1    Q(s1,a1) = w2    Q(s2,a0) = alpha*w1    Q(s2,a1) = w3

Because w1 serves two pairs, the weighting of (s1,a0) against (s2,a0) in
the training distribution decides which of the two regressions wins, and
the greedy policy can be wrong at either state even though the feature
class contains perfect solutions for three of the four pairs.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mdp import TabularMdp

__all__ = [
    "Q_STAR",
    "WeightVec",
    "ReplaySpec",
    "build_four_state_mdp",
    "feature_tensor",
    "q_of_weights",
    "oracle_weights",
    "oracle_regime_bounds",
    "TdSolution",
    "td_fixed_point",
    "correct_action_count",
    "sweep_offline",
    "find_regime_boundaries",
    "online_sim",
]

# Optimal action values on the four nonterminal pairs:
# rows s1, s2; columns action 0, action 1.
Q_STAR = np.array([[100.3, 20.0], [-35.0, 30.0]])
Q_STAR.flags.writeable = False

R_S1A0, R_S1A1, R_S2A0, R_S2A1 = 100.0, -10.0, -35.0, 30.0
P_SLIP = 0.01  # P(s2 | s1, a0)


class WeightVec(NamedTuple):
    w1: float
    w2: float
    w3: float


@dataclass(frozen=True)
class ReplaySpec:
    """Replay configuration for online_sim.

    kind: "eps_greedy" (acting policy, eps-randomized greedy) or
    "uniform_synthetic" (no interaction; the buffer distribution is pinned
    at 1/4 per pair).
    capacity: max transitions retained (FIFO); None = unlimited.
    """

    kind: str = "eps_greedy"
    eps: float = 0.05
    capacity: int | None = None


def build_four_state_mdp() -> TabularMdp:
    """The diagnostic MDP as a TabularMdp (states s1, s2, term0, term1)."""
    n_s, n_a = 4, 2
    p = np.zeros((n_s, n_a, n_s))
    r = np.zeros((n_s, n_a))
    # s1, action 0: reward 100, slips into s2 with prob 0.01, else terminates
    p[0, 0, 2] = 1.0 - P_SLIP
    p[0, 0, 1] = P_SLIP
    r[0, 0] = R_S1A0
    # s1, action 1: reward -10, always to s2
    p[0, 1, 1] = 1.0
    r[0, 1] = R_S1A1
    # s2: both actions terminate
    p[1, 0, 2] = 1.0
    r[1, 0] = R_S2A0
    p[1, 1, 3] = 1.0
    r[1, 1] = R_S2A1
    # absorbing states self-loop with reward 0
    for t in (2, 3):
        p[t, :, t] = 1.0
    return TabularMdp(
        transitions=p,
        rewards=r,
        gamma=1.0,
        initial_dist=np.array([1.0, 0.0, 0.0, 0.0]),
        terminal_mask=np.array([False, False, True, True]),
        horizon=10,
        name="four-state",
    )


def feature_tensor(alpha: float) -> np.ndarray:
    """[4, 2, 3] state-action features; terminal rows are zero so any linear
    head assigns them value 0."""
    _check_alpha(alpha)
    phi = np.zeros((4, 2, 3))
    phi[0, 0] = [1.0, 0.0, 0.0]
    phi[0, 1] = [0.0, 1.0, 0.0]
    phi[1, 0] = [alpha, 0.0, 0.0]
    phi[1, 1] = [0.0, 0.0, 1.0]
    return phi


def q_of_weights(w: WeightVec, alpha: float) -> np.ndarray:
    """Q values on the four nonterminal pairs for a weight vector."""
    return np.array([[w.w1, w.w2], [alpha * w.w1, w.w3]])


def _check_alpha(alpha: float):
    if not (1.0 <= alpha < 1.5):
        raise ValueError(f"alpha must be in [1, 1.5), got {alpha}")


def _check_q_ratio(q_ratio: float):
    if not (0.0 <= q_ratio <= 1.0):
        raise ValueError(f"q_ratio must be in [0, 1], got {q_ratio}")


def oracle_weights(q_ratio: float, alpha: float, *,
                   degenerate: bool = False) -> WeightVec:
    """Least-squares regression of Q* onto the features, weighting (s1,a0)
    vs (s2,a0) as q_ratio : (1 - q_ratio).

    w2 and w3 fit their pairs exactly; w1 trades off the two pairs it
    serves. q_ratio must be strictly interior unless degenerate=True, which
    admits q in {0, 1} as a single-point regression (q=1 fits only (s1,a0),
    giving w1 = Q*(s1,a0)).
    """
    _check_alpha(alpha)
    _check_q_ratio(q_ratio)
    if q_ratio in (0.0, 1.0) and not degenerate:
        raise ValueError(
            "q_ratio in {0, 1} is a single-point regression; "
            "pass degenerate=True to allow it")
    q, a = q_ratio, alpha
    w1 = (q * Q_STAR[0, 0] + a * (1.0 - q) * Q_STAR[1, 0]) / (q + a * a * (1.0 - q))
    return WeightVec(w1, Q_STAR[0, 1], Q_STAR[1, 1])


def oracle_regime_bounds(alpha: float) -> tuple[float, float]:
    """(lower, upper) bounds on q_ratio between which the oracle weights'
    greedy policy is optimal at both states.

    Below lower, s1's action flips; above upper, s2's flips.
    """
    _check_alpha(alpha)
    a = alpha
    lower = a * (20.0 * a + 35.0) / (80.3 + 35.0 * a + 20.0 * a * a)
    upper = 65.0 * a * a / (65.0 * a * a + 100.3 * a - 30.0)
    return lower, upper


def td_expected_update(w: WeightVec, q_ratio: float, alpha: float,
                       eta: float) -> WeightVec:
    """One expected semi-gradient step. w1's two data terms are weighted
    q_ratio and (1 - q_ratio); w2 and w3 use their proportional forms."""
    q = q_ratio
    boot = max(alpha * w.w1, w.w3)
    w1 = w.w1 + eta * (q * (R_S1A0 + P_SLIP * boot - w.w1)
                       + (1.0 - q) * (R_S2A0 - alpha * w.w1) * alpha)
    w2 = w.w2 + eta * (R_S1A1 + boot - w.w2)
    w3 = w.w3 + eta * (R_S2A1 - w.w3)
    return WeightVec(w1, w2, w3)


class TdSolution(NamedTuple):
    w: WeightVec
    iterations: int
    converged: bool


def td_fixed_point(q_ratio: float, alpha: float, eta: float = 0.1,
                   tol: float = 1e-12,
                   max_iters: int = 1_000_000) -> TdSolution:
    """Iterate expected TD updates from w=0 until the sup-norm step is
    below tol. If max_iters is exhausted first, the last iterate is
    returned with converged=False."""
    _check_alpha(alpha)
    _check_q_ratio(q_ratio)
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    w = WeightVec(0.0, 0.0, 0.0)
    for i in range(max_iters):
        w_new = td_expected_update(w, q_ratio, alpha, eta)
        if max(abs(w_new.w1 - w.w1), abs(w_new.w2 - w.w2),
               abs(w_new.w3 - w.w3)) <= tol:
            return TdSolution(w_new, i + 1, True)
        w = w_new
    return TdSolution(w, max_iters, False)


def correct_action_count(w: WeightVec, alpha: float) -> int:
    """How many of the two decision states the greedy policy of Q_w gets
    right. Strict inequalities; ties count as incorrect."""
    n = 0
    if w.w1 > w.w2:
        n += 1
    if alpha * w.w1 < w.w3:
        n += 1
    return n


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    q_ratio: float
    correct_actions: int
    w1: float
    w2: float
    w3: float


def sweep_offline(alpha_grid, q_grid, mode: str = "oracle") -> list[SweepRow]:
    """Correct-action counts over an (alpha, q_ratio) grid.

    mode="oracle" uses the regression solution; mode="td" the TD fixed
    point.
    """
    if mode not in ("oracle", "td"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    rows = []
    for alpha in alpha_grid:
        for q in q_grid:
            w = (oracle_weights(q, alpha, degenerate=True)
                 if mode == "oracle" else td_fixed_point(q, alpha).w)
            rows.append(SweepRow(float(alpha), float(q),
                                 correct_action_count(w, alpha),
                                 w.w1, w.w2, w.w3))
    return rows


def find_regime_boundaries(rows: list[SweepRow]) -> list[float]:
    """Midpoints of consecutive q-grid points where the correct-action
    count changes (rows must share one alpha, ordered by q)."""
    alphas = {r.alpha for r in rows}
    if len(alphas) != 1:
        raise ValueError("boundary detection expects a single-alpha sweep")
    rows = sorted(rows, key=lambda r: r.q_ratio)
    return [
        0.5 * (a.q_ratio + b.q_ratio)
        for a, b in zip(rows, rows[1:])
        if a.correct_actions != b.correct_actions
    ]


@dataclass
class OnlineResult:
    """Per-episode traces from online_sim (arrays of length n_episodes)."""

    spec: ReplaySpec
    alpha: float
    eta: float
    seed: int
    weights: np.ndarray        # [n, 3]
    buffer_mu: np.ndarray      # [n, 4] over (s1,a0) (s1,a1) (s2,a0) (s2,a1)
    correct_actions: np.ndarray  # [n] int
    greedy_return: np.ndarray  # [n] exact expected return of greedy policy
    q_abs_err: np.ndarray      # [n] mean |Q_w - Q*| over the four pairs

    def buffer_ratio(self) -> np.ndarray:
        """mu(s1,a0) / (mu(s1,a0) + mu(s2,a0)) per episode."""
        top = self.buffer_mu[:, 0]
        bot = self.buffer_mu[:, 0] + self.buffer_mu[:, 2]
        with np.errstate(invalid="ignore"):
            return np.where(bot > 0, top / bot, np.nan)


def _greedy_return(w: WeightVec, alpha: float) -> float:
    # Exact expected return from s1 of the greedy policy (ties -> action 0).
    r_s2 = R_S2A0 if alpha * w.w1 >= w.w3 else R_S2A1
    if w.w1 >= w.w2:
        return R_S1A0 + P_SLIP * r_s2
    return R_S1A1 + r_s2


def online_sim(spec: ReplaySpec, episodes: int = 10_000, eta: float = 0.05,
               seed: int = 0, alpha: float = 1.2) -> OnlineResult:
    """Replay-buffer Q-learning on the diagnostic MDP.

    Each episode: act from s1 until termination (greedy on the current
    weights, eps-randomized), push every transition into the FIFO buffer,
    then apply one exact expected update under the buffer's empirical
    four-pair distribution. kind="uniform_synthetic" skips interaction and
    updates under the fixed uniform distribution instead.
    """
    _check_alpha(alpha)
    if spec.kind not in ("eps_greedy", "uniform_synthetic"):
        raise ValueError(f"unknown replay kind {spec.kind!r}")
    if spec.kind == "eps_greedy" and not (0.0 <= spec.eps <= 1.0):
        raise ValueError("eps must be in [0, 1]")
    if spec.capacity is not None and spec.capacity < 1:
        raise ValueError("capacity must be positive or None")

    rng = np.random.default_rng(seed)
    w = WeightVec(0.0, 0.0, 0.0)
    buf: deque[int] = deque()
    counts = np.zeros(4)
    uniform = spec.kind == "uniform_synthetic"

    weights = np.empty((episodes, 3))
    buffer_mu = np.empty((episodes, 4))
    correct = np.empty(episodes, dtype=np.int64)
    returns = np.empty(episodes)
    q_err = np.empty(episodes)

    for ep in range(episodes):
        if not uniform:
            # Act one episode; pair indices: 0=(s1,a0) 1=(s1,a1) 2=(s2,a0) 3=(s2,a1)
            state = 0
            while state in (0, 1):
                if rng.random() < spec.eps:
                    act = int(rng.integers(2))
                elif state == 0:
                    act = 0 if w.w1 >= w.w2 else 1
                else:
                    act = 0 if alpha * w.w1 >= w.w3 else 1
                pair = 2 * state + act
                buf.append(pair)
                counts[pair] += 1
                if spec.capacity is not None and len(buf) > spec.capacity:
                    counts[buf.popleft()] -= 1
                if state == 0:
                    if act == 0:
                        state = 1 if rng.random() < P_SLIP else 2
                    else:
                        state = 1
                else:
                    state = 2
            mu = counts / counts.sum()
        else:
            mu = np.full(4, 0.25)

        boot = max(alpha * w.w1, w.w3)
        w = WeightVec(
            w.w1 + eta * (mu[0] * (R_S1A0 + P_SLIP * boot - w.w1)
                          + mu[2] * (R_S2A0 - alpha * w.w1) * alpha),
            w.w2 + eta * mu[1] * (R_S1A1 + boot - w.w2),
            w.w3 + eta * mu[3] * (R_S2A1 - w.w3),
        )

        weights[ep] = w
        buffer_mu[ep] = mu
        correct[ep] = correct_action_count(w, alpha)
        returns[ep] = _greedy_return(w, alpha)
        q_err[ep] = np.abs(q_of_weights(w, alpha) - Q_STAR).mean()

    return OnlineResult(spec=spec, alpha=alpha, eta=eta, seed=seed,
                        weights=weights, buffer_mu=buffer_mu,
                        correct_actions=correct, greedy_return=returns,
                        q_abs_err=q_err)
