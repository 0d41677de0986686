"""8x8 gridworld MDPs built from plain-text maps.

Map format: one character per cell, first line is the top row.
    S  start cell        G  goal cell
    .  open cell         #  wall cell
Actions: 0 up, 1 down, 2 right, 3 left, 4 stay. Moving into a border or a
wall keeps the agent in place with probability 0.99 and otherwise drops it
on a uniformly chosen feasible (open, in-grid) adjacent cell. Reward is 1
on every step taken from the goal cell. Episodes run a fixed 50 steps.

Wall cells stay in the state space (self-looping and unreachable), so both
variants expose the same 64 x 5 state-action layout.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..mdp import TabularMdp

__all__ = ["GRID1_LAYOUT", "GRID2_LAYOUT", "build_grid", "build_grid_from_layout"]

GRID1_LAYOUT = """\
.......G
........
........
........
........
........
........
S.......
"""

# A horizontal wall across the fifth row from the bottom, gap at column 6.
GRID2_LAYOUT = """\
.......G
........
........
######.#
........
........
........
S.......
"""

GAMMA = 0.9
HORIZON = 50
FEATURE_DIM = 8
SLIP_PROB = 0.01

# (drow, dcol) per action: up, down, right, left, stay; row 0 is the top.
_MOVES = ((-1, 0), (1, 0), (0, 1), (0, -1), (0, 0))


def _parse_layout(text: str):
    rows = [list(line) for line in text.strip("\n").split("\n")]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("layout rows must have equal width")
    walls = np.zeros((len(rows), width), dtype=bool)
    start = goal = None
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch == "#":
                walls[r, c] = True
            elif ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
            elif ch != ".":
                raise ValueError(f"unknown map character {ch!r}")
    if start is None or goal is None:
        raise ValueError("layout needs exactly one S and one G")
    return walls, start, goal


def build_grid_from_layout(layout: str, seed: int = 0, name: str = "grid"
                           ) -> TabularMdp:
    """Build the grid MDP for a map string; per-state features are 8-dim
    uniform [-1, 1] draws controlled by seed."""
    walls, start, goal = _parse_layout(layout)
    h, w = walls.shape
    n_s, n_a = h * w, len(_MOVES)
    sid = lambda r, c: r * w + c

    def feasible_neighbors(r, c):
        out = []
        for dr, dc in _MOVES[:4]:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not walls[rr, cc]:
                out.append((rr, cc))
        return out

    p = np.zeros((n_s, n_a, n_s))
    rewards = np.zeros((n_s, n_a))
    for r in range(h):
        for c in range(w):
            s = sid(r, c)
            if walls[r, c]:
                p[s, :, s] = 1.0
                continue
            rewards[s, :] = 1.0 if (r, c) == goal else 0.0
            for a, (dr, dc) in enumerate(_MOVES):
                rr, cc = r + dr, c + dc
                blocked = not (0 <= rr < h and 0 <= cc < w) or walls[rr, cc]
                if (dr, dc) == (0, 0) or not blocked:
                    p[s, a, sid(rr, cc) if not blocked else s] = 1.0
                else:
                    nbrs = feasible_neighbors(r, c)
                    p[s, a, s] += 1.0 - SLIP_PROB
                    if nbrs:
                        for rr2, cc2 in nbrs:
                            p[s, a, sid(rr2, cc2)] += SLIP_PROB / len(nbrs)
                    else:
                        p[s, a, s] += SLIP_PROB

    p0 = np.zeros(n_s)
    p0[sid(*start)] = 1.0
    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, size=(n_s, FEATURE_DIM))
    return TabularMdp(
        transitions=p,
        rewards=rewards,
        gamma=GAMMA,
        initial_dist=p0,
        terminal_mask=np.zeros(n_s, dtype=bool),
        horizon=HORIZON,
        state_features=features,
        name=name,
    )


def build_grid(variant: str, seed: int = 0) -> TabularMdp:
    """variant "grid1" (open room) or "grid2" (wall with one gap), or a
    path to a map file."""
    if variant == "grid1":
        return build_grid_from_layout(GRID1_LAYOUT, seed, "grid1")
    if variant == "grid2":
        return build_grid_from_layout(GRID2_LAYOUT, seed, "grid2")
    path = Path(variant)
    if path.exists():
        return build_grid_from_layout(path.read_text(), seed, path.stem)
    raise ValueError(f"unknown grid variant {variant!r}")
