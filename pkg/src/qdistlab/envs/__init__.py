"""Environment construction and a uniform runtime handle.

EnvHandle gives dataset generation, training, and evaluation one surface
for both env families: tabular MDPs (states are ints, cells == states) and
classic-control simulators (states are float vectors, cells come from a
Discretizer).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mdp import TabularMdp
from .classic import (CartPoleEnv, ClassicControlEnv, MountainCarEnv,
                      PendulumEnv, classic_control)
from .discretize import Discretizer, discretizer_for
from .grids import GRID1_LAYOUT, GRID2_LAYOUT, build_grid, build_grid_from_layout
from .multipath import build_multipath

__all__ = [
    "EnvHandle", "make_env", "build_grid", "build_grid_from_layout",
    "build_multipath", "classic_control", "discretizer_for", "Discretizer",
    "ClassicControlEnv", "PendulumEnv", "MountainCarEnv", "CartPoleEnv",
    "GRID1_LAYOUT", "GRID2_LAYOUT",
]


@dataclass
class EnvHandle:
    """Runtime view of an environment.

    Exactly one of mdp / sim is set. For tabular envs cell_of is the state
    id itself and obs() returns the state's feature row; for continuous
    envs cells come from the discretizer and obs() is the simulator's
    observation encoding.
    """

    name: str
    mdp: TabularMdp | None = None
    sim: ClassicControlEnv | None = None
    disc: Discretizer | None = None
    _cum_p: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if (self.mdp is None) == (self.sim is None):
            raise ValueError("EnvHandle needs exactly one of mdp or sim")
        if self.sim is not None and self.disc is None:
            raise ValueError("continuous EnvHandle needs a discretizer")
        if self.mdp is not None:
            self._cum_p = np.cumsum(self.mdp.transitions, axis=2)

    @property
    def is_tabular(self) -> bool:
        return self.mdp is not None

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions if self.is_tabular else self.sim.n_actions

    @property
    def n_cells(self) -> int:
        return self.mdp.n_states if self.is_tabular else self.disc.n_cells

    @property
    def horizon(self) -> int:
        return self.mdp.horizon if self.is_tabular else self.sim.horizon

    @property
    def gamma(self) -> float:
        return self.mdp.gamma if self.is_tabular else self.sim.gamma

    @property
    def obs_dim(self) -> int:
        if self.is_tabular:
            if self.mdp.state_features is None:
                raise ValueError(f"env {self.name} has no state features")
            return self.mdp.state_features.shape[1]
        return self.sim.obs_dim

    def reset(self, rng: np.random.Generator):
        if self.is_tabular:
            return int(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))
        return self.sim.reset(rng)

    def step(self, state, action: int, rng: np.random.Generator):
        """(next_state, reward, done). done marks true termination, never
        the horizon."""
        if self.is_tabular:
            u = rng.random()
            ns = int(np.searchsorted(self._cum_p[state, action], u, side="right"))
            ns = min(ns, self.mdp.n_states - 1)
            return ns, float(self.mdp.rewards[state, action]), \
                bool(self.mdp.terminal_mask[ns])
        return self.sim.step(state, action)

    def cell_of(self, state) -> int:
        return int(state) if self.is_tabular else self.disc.cell_of(state)

    def state_in_cell(self, cell: int, rng: np.random.Generator):
        """A concrete state inside a cell (the state itself when tabular)."""
        return int(cell) if self.is_tabular else self.disc.sample_in_cell(cell, rng)

    def obs(self, state) -> np.ndarray:
        if self.is_tabular:
            if self.mdp.state_features is None:
                raise ValueError(f"env {self.name} has no state features")
            return self.mdp.state_features[int(state)]
        return self.sim.obs(state)


def make_env(env_id: str, feature_seed: int = 0) -> EnvHandle:
    """Registry: grid1, grid2, multipath, fourstate, pendulum, mountaincar,
    cartpole, or "grid:<path>" for a custom map file."""
    if env_id in ("grid1", "grid2"):
        return EnvHandle(name=env_id, mdp=build_grid(env_id, seed=feature_seed))
    if env_id.startswith("grid:"):
        mdp = build_grid(env_id[len("grid:"):], seed=feature_seed)
        return EnvHandle(name=mdp.name, mdp=mdp)
    if env_id == "multipath":
        return EnvHandle(name=env_id, mdp=build_multipath(seed=feature_seed))
    if env_id == "fourstate":
        from ..fourstate import build_four_state_mdp
        return EnvHandle(name=env_id, mdp=build_four_state_mdp())
    if env_id in ("pendulum", "mountaincar", "cartpole"):
        return EnvHandle(name=env_id, sim=classic_control(env_id),
                         disc=discretizer_for(env_id))
    raise ValueError(f"unknown env id {env_id!r}")
