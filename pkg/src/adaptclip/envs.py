"""Reference environments: dense discrete (CartPole), sparse discrete
(SparseChain) and dense continuous (PointMass).

Every environment owns its RNG stream; ``reset(seed)`` reseeds it, ``reset()``
without a seed continues the existing stream. Given the same seed and action
sequence the observation/reward/flag sequence is bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EnvError(RuntimeError):
    """Invalid use of an environment (bad action, step before reset, ...)."""


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"Discrete action space needs n >= 2, got {self.n}")


@dataclass(frozen=True)
class Continuous:
    dim: int
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        if self.dim < 1 or len(self.low) != self.dim or len(self.high) != self.dim:
            raise ValueError("Continuous bounds must have one entry per dimension")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("Continuous bounds need low < high in every dimension")


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_space: Discrete | Continuous
    max_episode_steps: int
    reward_range: tuple[float, float]
    success_threshold: float
    # Largest attainable episodic return, used to scale the reward-delta temperature.
    max_return: float

    def __post_init__(self):
        if self.observation_dim < 1:
            raise ValueError("observation_dim must be >= 1")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, Discrete)


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


class Env:
    """Base class. Subclasses implement ``_reset_state`` and ``_advance``."""

    spec: EnvSpec

    def __init__(self, clamp_actions: bool = False):
        self.clamp_actions = clamp_actions
        self._rng = np.random.default_rng(0)
        self._steps = 0
        self._needs_reset = True

    def env_spec(self) -> EnvSpec:
        return self.spec

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._steps = 0
        self._needs_reset = False
        return self._reset_state()

    def step(self, action) -> StepResult:
        if self._needs_reset:
            raise EnvError("step() called before reset() or after the episode ended")
        action = self._validate_action(action)
        obs, reward, terminated = self._advance(action)
        self._steps += 1
        truncated = not terminated and self._steps >= self.spec.max_episode_steps
        if terminated or truncated:
            self._needs_reset = True
        return StepResult(obs, reward, terminated, truncated)

    def _validate_action(self, action):
        space = self.spec.action_space
        if isinstance(space, Discrete):
            if isinstance(action, np.ndarray):
                if action.size != 1:
                    raise EnvError(f"expected a scalar action index, got shape {action.shape}")
                action = action.item()
            if isinstance(action, (bool, np.bool_)) or int(action) != action:
                raise EnvError(f"action must be an integer index, got {action!r}")
            action = int(action)
            if not 0 <= action < space.n:
                raise EnvError(f"action {action} out of range for Discrete({space.n})")
            return action
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (space.dim,):
            raise EnvError(f"expected action of length {space.dim}, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise EnvError(f"non-finite continuous action {a}")
        low, high = np.array(space.low), np.array(space.high)
        if np.any(a < low) or np.any(a > high):
            if not self.clamp_actions:
                raise EnvError(
                    f"action {a} outside bounds [{space.low}, {space.high}]; "
                    "set clamp_actions to clip instead"
                )
            a = np.clip(a, low, high)
        return a

    def _reset_state(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class CartPole(Env):
    """Classic cart-pole balancing with explicit Euler integration.

    Angle is positive when the pole leans toward +x. Pushing the cart toward +x
    therefore tips the pole toward negative angles.
    """

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4

    def __init__(self, max_episode_steps: int = 500, clamp_actions: bool = False):
        super().__init__(clamp_actions)
        self.spec = EnvSpec(
            observation_dim=4,
            action_space=Discrete(2),
            max_episode_steps=max_episode_steps,
            reward_range=(0.0, 1.0),
            success_threshold=195.0,
            max_return=float(max_episode_steps),
        )
        self.state = np.zeros(4)

    def _reset_state(self):
        self.state = self._rng.uniform(-0.05, 0.05, size=4)
        return self.state.copy()

    def _advance(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = self.force_mag if action == 1 else -self.force_mag
        total_mass = self.masspole + self.masscart
        polemass_length = self.masspole * self.length
        costheta, sintheta = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sintheta) / total_mass
        thetaacc = (self.gravity * sintheta - costheta * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * costheta**2 / total_mass)
        )
        xacc = temp - polemass_length * thetaacc * costheta / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * xacc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * thetaacc
        self.state = np.array([x, x_dot, theta, theta_dot])
        terminated = bool(
            x < -self.x_threshold
            or x > self.x_threshold
            or theta < -self.theta_threshold
            or theta > self.theta_threshold
        )
        return self.state.copy(), 1.0, terminated


class SparseChain(Env):
    """Corridor of ``length`` cells. Start in cell 0; action 0 moves left, 1 right.
    Reward 1 only on entering the last cell, which ends the episode."""

    def __init__(self, length: int = 40, max_episode_steps: int | None = None,
                 clamp_actions: bool = False):
        super().__init__(clamp_actions)
        if length < 2:
            raise ValueError("chain length must be >= 2")
        self.length = length
        self.spec = EnvSpec(
            observation_dim=length,
            action_space=Discrete(2),
            max_episode_steps=max_episode_steps or 3 * length,
            reward_range=(0.0, 1.0),
            success_threshold=0.9,
            max_return=1.0,
        )
        self.position = 0

    def _obs(self):
        obs = np.zeros(self.length)
        obs[self.position] = 1.0
        return obs

    def _reset_state(self):
        self.position = 0
        return self._obs()

    def _advance(self, action):
        if action == 1:
            self.position = min(self.position + 1, self.length - 1)
        else:
            self.position = max(self.position - 1, 0)
        at_goal = self.position == self.length - 1
        return self._obs(), (1.0 if at_goal else 0.0), at_goal


class PointMass(Env):
    """2-D point mass pushed by a bounded force toward ``goal``.

    Observation is (x, y, vx, vy). Positions are confined to a square of
    half-width ``bound``; hitting a wall zeroes that velocity component.
    """

    dt = 0.1

    def __init__(self, goal=(0.0, 0.0), bound: float = 2.0, max_episode_steps: int = 200,
                 clamp_actions: bool = False):
        super().__init__(clamp_actions)
        self.goal = np.asarray(goal, dtype=np.float64)
        if self.goal.shape != (2,) or np.any(np.abs(self.goal) > bound):
            raise ValueError(f"goal must be a 2-vector inside the arena, got {goal!r}")
        self.bound = float(bound)
        far = float(np.max(np.linalg.norm(
            np.array([[s1 * bound, s2 * bound] for s1 in (-1, 1) for s2 in (-1, 1)]) - self.goal,
            axis=1)))
        self.spec = EnvSpec(
            observation_dim=4,
            action_space=Continuous(2, (-1.0, -1.0), (1.0, 1.0)),
            max_episode_steps=max_episode_steps,
            reward_range=(-far, 0.0),
            success_threshold=-0.1 * max_episode_steps,
            max_return=0.0,
        )
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _reset_state(self):
        self.pos = self._rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)
        return np.concatenate([self.pos, self.vel])

    def _advance(self, action):
        vel = self.vel + self.dt * action
        pos = self.pos + self.dt * vel
        hit = np.abs(pos) > self.bound
        pos = np.clip(pos, -self.bound, self.bound)
        vel = np.where(hit, 0.0, vel)
        self.pos, self.vel = pos, vel
        reward = -float(np.linalg.norm(pos - self.goal))
        return np.concatenate([pos, vel]), reward, False


ENV_IDS = ("cartpole", "sparse-chain", "point-mass")


def make_env(env_id: str, clamp_actions: bool = False, **params) -> Env:
    """Build an environment from its string id and constructor parameters."""
    if env_id == "cartpole":
        return CartPole(clamp_actions=clamp_actions, **params)
    if env_id == "sparse-chain":
        return SparseChain(clamp_actions=clamp_actions, **params)
    if env_id == "point-mass":
        return PointMass(clamp_actions=clamp_actions, **params)
    raise ValueError(f"unknown env id {env_id!r}; valid ids: {', '.join(ENV_IDS)}")
