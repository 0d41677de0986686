"""Uniform state-space discretization for the classic-control tasks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Discretizer", "discretizer_for"]


@dataclass(frozen=True)
class Discretizer:
    """Uniform per-dimension binning of a box.

    Dimensions flagged in wrap are angles folded into [-pi, pi) before
    binning; the rest are clamped to their bounds.
    """

    lows: tuple
    highs: tuple
    bins_per_dim: int
    wrap: tuple = ()

    def __post_init__(self):
        if len(self.lows) != len(self.highs):
            raise ValueError("lows/highs length mismatch")
        if self.bins_per_dim < 1:
            raise ValueError("bins_per_dim must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.lows)

    @property
    def n_cells(self) -> int:
        return self.bins_per_dim ** self.dim

    def cell_of(self, state: np.ndarray) -> int:
        """Flat cell index of one internal state vector."""
        idx = 0
        for i in range(self.dim):
            x = float(state[i])
            lo, hi = self.lows[i], self.highs[i]
            if i in self.wrap:
                x = ((x + math.pi) % (2.0 * math.pi)) - math.pi
            k = int((x - lo) / (hi - lo) * self.bins_per_dim)
            k = min(max(k, 0), self.bins_per_dim - 1)
            idx = idx * self.bins_per_dim + k
        return idx

    def cell_center(self, cell: int) -> np.ndarray:
        """Center of a flat cell index (inverse of cell_of up to binning)."""
        ks = []
        for _ in range(self.dim):
            ks.append(cell % self.bins_per_dim)
            cell //= self.bins_per_dim
        ks.reverse()
        out = np.empty(self.dim)
        for i, k in enumerate(ks):
            width = (self.highs[i] - self.lows[i]) / self.bins_per_dim
            out[i] = self.lows[i] + (k + 0.5) * width
        return out

    def sample_in_cell(self, cell: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from a cell's box."""
        center = self.cell_center(cell)
        widths = (np.asarray(self.highs) - np.asarray(self.lows)) / self.bins_per_dim
        return center + (rng.random(self.dim) - 0.5) * widths


def discretizer_for(kind: str) -> Discretizer:
    """Reference discretizations: 50 bins/dim for the 2-d tasks, 20 for
    cartpole's 4 dims (160,000 cells). Velocity bounds on cartpole are not
    part of the dynamics; the values here are the documented clamps."""
    if kind == "pendulum":
        return Discretizer(lows=(-math.pi, -8.0), highs=(math.pi, 8.0),
                           bins_per_dim=50, wrap=(0,))
    if kind == "mountaincar":
        return Discretizer(lows=(-1.2, -0.07), highs=(0.6, 0.07),
                           bins_per_dim=50)
    if kind == "cartpole":
        return Discretizer(
            lows=(-2.4, -3.0, -12.0 * math.pi / 180.0, -3.5),
            highs=(2.4, 3.0, 12.0 * math.pi / 180.0, 3.5),
            bins_per_dim=20)
    raise ValueError(f"no discretizer for kind {kind!r}")
