"""Trajectory collection and generalized advantage estimation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env
from .policy import forward_policy, forward_value, sample_action


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,) int or (T, action_dim) float
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,) under the behaviour policy
    values: np.ndarray  # (T,) V(s_t) under the behaviour critic
    terminated: np.ndarray  # (T,) bool
    truncated: np.ndarray  # (T,) bool
    # Observations to bootstrap from: at every truncated step, and at the last
    # step if the episode is still running when collection stops.
    bootstrap_obs: dict = field(default_factory=dict)
    # Return / length already accumulated by the episode open at step 0.
    carry_return: float = 0.0
    carry_length: int = 0
    step_offset: int = 0  # global env-step count before step 0

    def __len__(self):
        return len(self.rewards)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("observations", "actions", "log_probs", "values", "terminated", "truncated"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trajectory field {name} has length {len(getattr(self, name))} != {n}")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("trajectory contains non-finite log-probabilities")


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray
    gamma: float
    lambda_gae: float


@dataclass
class EpisodeCursor:
    """State of the episode that spans rollout boundaries."""
    observation: np.ndarray
    episode_return: float = 0.0
    episode_length: int = 0
    total_steps: int = 0


def start(env: Env, seed: int) -> EpisodeCursor:
    return EpisodeCursor(env.reset(seed))


def collect(env: Env, params, n_steps: int, rng: np.random.Generator,
            cursor: EpisodeCursor | None = None, seed: int = 0) -> tuple[Trajectory, EpisodeCursor]:
    """Run the current policy for exactly ``n_steps`` transitions.

    Episodes that end are reset in place and collection continues. Pass the
    returned cursor back in to continue the open episode next time; without a
    cursor the env is reset with ``seed``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if cursor is None:
        cursor = start(env, seed)
    spec = env.env_spec()
    obs_buf = np.empty((n_steps, spec.observation_dim))
    if spec.discrete:
        act_buf = np.empty(n_steps, dtype=np.int64)
    else:
        act_buf = np.empty((n_steps, spec.action_space.dim))
    rew = np.empty(n_steps)
    logp = np.empty(n_steps)
    term = np.zeros(n_steps, dtype=bool)
    trunc = np.zeros(n_steps, dtype=bool)
    bootstrap = {}
    carry_return, carry_length, offset = cursor.episode_return, cursor.episode_length, cursor.total_steps

    obs = cursor.observation
    ep_ret, ep_len = cursor.episode_return, cursor.episode_length
    for t in range(n_steps):
        obs_buf[t] = obs
        action, lp = sample_action(forward_policy(params, obs), rng)
        act_buf[t] = action
        logp[t] = lp
        res = env.step(action)
        rew[t] = res.reward
        term[t], trunc[t] = res.terminated, res.truncated
        ep_ret += res.reward
        ep_len += 1
        if res.terminated or res.truncated:
            if res.truncated:
                bootstrap[t] = res.observation
            obs = env.reset()
            ep_ret, ep_len = 0.0, 0
        else:
            obs = res.observation
    if not (term[-1] or trunc[-1]):
        bootstrap[n_steps - 1] = obs

    traj = Trajectory(
        observations=obs_buf, actions=act_buf, rewards=rew, log_probs=logp,
        values=forward_value(params, obs_buf), terminated=term, truncated=trunc,
        bootstrap_obs=bootstrap,
        carry_return=carry_return, carry_length=carry_length, step_offset=offset,
    )
    return traj, EpisodeCursor(obs, ep_ret, ep_len, offset + n_steps)


def compute_gae(traj: Trajectory, value_fn, gamma: float = 0.99,
                lambda_gae: float = 0.95) -> AdvantageBatch:
    """A_t = sum_l (gamma*lambda)^l delta_{t+l} by backward recursion.

    Terminated steps bootstrap with 0; truncated steps and the trailing
    unfinished step bootstrap with ``value_fn`` on the stored observation.
    """
    if not 0.0 <= gamma <= 1.0 or not 0.0 <= lambda_gae <= 1.0:
        raise ValueError("gamma and lambda_gae must lie in [0, 1]")
    T = len(traj)
    values = traj.values
    next_values = np.empty(T)
    next_values[:-1] = values[1:]
    next_values[-1] = 0.0
    next_values[traj.terminated] = 0.0
    if traj.bootstrap_obs:
        idx = sorted(traj.bootstrap_obs)
        boot = np.atleast_1d(value_fn(np.stack([traj.bootstrap_obs[i] for i in idx])))
        next_values[idx] = boot
    cut = traj.terminated | traj.truncated
    cut[-1] = True
    deltas = traj.rewards + gamma * next_values - values
    adv = np.empty(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        if cut[t]:
            running = 0.0
        running = deltas[t] + gamma * lambda_gae * running
        adv[t] = running
    return AdvantageBatch(adv, adv + values, gamma, lambda_gae)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8) if std > 0 else adv - adv.mean()


def episodic_returns(traj: Trajectory) -> list[float]:
    """Undiscounted returns of the episodes that finish inside ``traj``, in
    completion order (includes reward collected before the trajectory began)."""
    return [r for r, _, _ in completed_episodes(traj)]


def completed_episodes(traj: Trajectory) -> list[tuple[float, int, int]]:
    """(return, length, global env step at completion) per finished episode."""
    out = []
    ret, length = traj.carry_return, traj.carry_length
    for t in range(len(traj)):
        ret += float(traj.rewards[t])
        length += 1
        if traj.terminated[t] or traj.truncated[t]:
            out.append((ret, length, traj.step_offset + t + 1))
            ret, length = 0.0, 0
    return out
