"""Classic-control simulators with discrete action sets.

Each environment is a pure step function over an internal state vector
plus a reset distribution; randomness enters only through the generator
passed to reset. obs() maps internal state to the network input (identity
except for the pendulum's (cos, sin, thetadot) encoding).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ClassicControlEnv", "PendulumEnv", "MountainCarEnv",
           "CartPoleEnv", "classic_control"]

GAMMA = 0.99


@dataclass(frozen=True)
class ClassicControlEnv:
    name: str
    n_actions: int
    obs_dim: int
    horizon: int
    gamma: float = GAMMA

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: int):
        """(next_state, reward, done); pure in (state, action)."""
        raise NotImplementedError

    def obs(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)


@dataclass(frozen=True)
class PendulumEnv(ClassicControlEnv):
    """Torque-controlled pendulum; internal state (theta, thetadot).

    Five torques {-2, -1, 0, 1, 2}; cost penalizes angle from upright,
    velocity, and effort; no termination.
    """

    name: str = "pendulum"
    n_actions: int = 5
    obs_dim: int = 3
    horizon: int = 200

    g: float = 10.0
    m: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_speed: float = 8.0
    torques = (-2.0, -1.0, 0.0, 1.0, 2.0)

    def reset(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def step(self, state, action):
        th, thdot = float(state[0]), float(state[1])
        u = self.torques[action]
        th_norm = ((th + math.pi) % (2.0 * math.pi)) - math.pi
        cost = th_norm ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        thdot_new = thdot + (3.0 * self.g / (2.0 * self.length) * math.sin(th)
                             + 3.0 / (self.m * self.length ** 2) * u) * self.dt
        thdot_new = min(max(thdot_new, -self.max_speed), self.max_speed)
        th_new = th + thdot_new * self.dt
        return np.array([th_new, thdot_new]), -cost, False

    def obs(self, state):
        th, thdot = float(state[0]), float(state[1])
        return np.array([math.cos(th), math.sin(th), thdot])


@dataclass(frozen=True)
class MountainCarEnv(ClassicControlEnv):
    """Underpowered car in a valley; internal state (position, velocity).

    Three thrusts (back, none, forward); -1 per step; done at the goal
    position 0.5.
    """

    name: str = "mountaincar"
    n_actions: int = 3
    obs_dim: int = 2
    horizon: int = 200

    min_pos: float = -1.2
    max_pos: float = 0.6
    max_speed: float = 0.07
    goal_pos: float = 0.5
    force: float = 0.001
    gravity: float = 0.0025

    def reset(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def step(self, state, action):
        pos, vel = float(state[0]), float(state[1])
        vel += (action - 1) * self.force + math.cos(3.0 * pos) * (-self.gravity)
        vel = min(max(vel, -self.max_speed), self.max_speed)
        pos += vel
        pos = min(max(pos, self.min_pos), self.max_pos)
        if pos <= self.min_pos and vel < 0.0:
            vel = 0.0
        done = pos >= self.goal_pos
        return np.array([pos, vel]), -1.0, done


@dataclass(frozen=True)
class CartPoleEnv(ClassicControlEnv):
    """Pole balancing on a cart; state (x, xdot, theta, thetadot).

    Two actions (push left/right with force 10); +1 per step; done when
    |x| > 2.4 or |theta| > 12 degrees. Euler integration with dt = 0.02.
    """

    name: str = "cartpole"
    n_actions: int = 2
    obs_dim: int = 4
    horizon: int = 500

    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12.0 * math.pi / 180.0

    def reset(self, rng):
        return rng.uniform(-0.05, 0.05, size=4)

    def step(self, state, action):
        x, xdot, th, thdot = (float(v) for v in state)
        force = self.force_mag if action == 1 else -self.force_mag
        costh, sinth = math.cos(th), math.sin(th)
        total_mass = self.masscart + self.masspole
        polemass_length = self.masspole * self.half_length
        temp = (force + polemass_length * thdot ** 2 * sinth) / total_mass
        thacc = (self.gravity * sinth - costh * temp) / (
            self.half_length * (4.0 / 3.0 - self.masspole * costh ** 2 / total_mass))
        xacc = temp - polemass_length * thacc * costh / total_mass
        x += self.dt * xdot
        xdot += self.dt * xacc
        th += self.dt * thdot
        thdot += self.dt * thacc
        done = abs(x) > self.x_threshold or abs(th) > self.theta_threshold
        return np.array([x, xdot, th, thdot]), 1.0, done


def classic_control(kind: str) -> ClassicControlEnv:
    envs = {"pendulum": PendulumEnv, "mountaincar": MountainCarEnv,
            "cartpole": CartPoleEnv}
    if kind not in envs:
        raise ValueError(f"unknown classic-control kind {kind!r}")
    return envs[kind]()
