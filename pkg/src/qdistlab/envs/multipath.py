"""Multi-path chain MDP: k parallel corridors of length l behind a routing
state.

State 0 routes: action i enters corridor i's first cell, but with
probability p the agent is dropped at the first cell of a uniformly random
corridor instead. Inside corridor i only action i advances; any other
action falls into a zero-reward absorbing state. Corridor ends are
absorbing and pay 1 on every step taken from them. Episodes run a fixed
horizon of 10 steps; nothing is marked terminal.
"""
from __future__ import annotations

import numpy as np

from ..mdp import TabularMdp

__all__ = ["build_multipath"]

GAMMA = 0.9
HORIZON = 10
FEATURE_DIM = 4


def build_multipath(k: int = 5, l: int = 5, p: float = 0.01,
                    seed: int = 0) -> TabularMdp:
    if k < 1 or l < 1:
        raise ValueError("k and l must be >= 1")
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be in [0, 1]")
    n_s = 1 + k * l + 1
    zero_state = n_s - 1
    cell = lambda path, depth: 1 + path * l + (depth - 1)  # depth 1..l

    trans = np.zeros((n_s, k, n_s))
    rewards = np.zeros((n_s, k))
    for a in range(k):
        trans[0, a, cell(a, 1)] += 1.0 - p
        for j in range(k):
            trans[0, a, cell(j, 1)] += p / k
    for path in range(k):
        for depth in range(1, l + 1):
            s = cell(path, depth)
            if depth == l:
                trans[s, :, s] = 1.0
                rewards[s, :] = 1.0
                continue
            for a in range(k):
                trans[s, a, cell(path, depth + 1) if a == path else zero_state] = 1.0
    trans[zero_state, :, zero_state] = 1.0

    p0 = np.zeros(n_s)
    p0[0] = 1.0
    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, size=(n_s, FEATURE_DIM))
    return TabularMdp(
        transitions=trans,
        rewards=rewards,
        gamma=GAMMA,
        initial_dist=p0,
        terminal_mask=np.zeros(n_s, dtype=bool),
        horizon=HORIZON,
        state_features=features,
        name=f"multipath-k{k}-l{l}",
    )
