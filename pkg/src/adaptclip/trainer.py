"""PPO training loop with a per-iteration adaptive clipping threshold.

One iteration: collect a rollout, measure entropy and reward progress, fix
eps_t for the whole iteration, then run several epochs of minibatch Adam
updates on the clipped surrogate (actor) and MSE (critic).
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import clipping
from .clipping import ClipConfig, ClipSignals, ConfigError, RewardTracker
from .envs import ENV_IDS, EnvSpec, make_env
from .policy import (
    ACTOR_KEYS, CRITIC_KEYS, AdamState, NonFiniteError, adam_step, backward, clip_grad_norm, entropy,
    forward_policy, forward_value, init_params, log_prob_of, max_entropy,
)
from .rollout import collect, completed_episodes, compute_gae, normalize_advantages
from .stats import reward_variance


# Temperature of the reward-delta normaliser per env: 10% of the best episodic
# return where that is known, a hand-picked scale for PointMass.
DEFAULT_TAU = {"cartpole": 50.0, "sparse-chain": 0.1, "point-mass": 10.0}


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


# --------------------------------------------------------------------------- losses

def ppo_clip_loss(ratios, advantages, epsilon_t: float):
    """Negated clipped surrogate. Returns (loss, per-sample terms)."""
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    if r.shape != a.shape:
        raise ValueError("ratios and advantages must have the same shape")
    if not np.all(np.isfinite(r)):
        raise NonFiniteError("non-finite probability ratio (log-probabilities diverged)")
    terms = np.minimum(r * a, np.clip(r, 1.0 - epsilon_t, 1.0 + epsilon_t) * a)
    return -float(terms.mean()), terms


def ppo_clip_grad(ratios, advantages, epsilon_t: float) -> np.ndarray:
    """d loss / d log pi(a|s) per sample for :func:`ppo_clip_loss`.

    A sample contributes nothing when the clip binds and the min picks the
    clipped (constant) branch.
    """
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    inside = (r >= 1.0 - epsilon_t) & (r <= 1.0 + epsilon_t)
    unclipped_selected = r * a <= np.clip(r, 1.0 - epsilon_t, 1.0 + epsilon_t) * a
    active = inside | unclipped_selected
    return np.where(active, -r * a, 0.0) / len(r)


def value_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("predictions and targets must have the same shape")
    return float(np.mean((p - t) ** 2))


def approx_kl(ratios, log_ratio=None) -> float:
    """mean((r - 1) - log r), a non-negative estimator of KL(old || new)."""
    r = np.asarray(ratios, dtype=np.float64)
    lr = np.log(r) if log_ratio is None else np.asarray(log_ratio, dtype=np.float64)
    return float(np.mean((r - 1.0) - lr))


def kl_penalty_loss(ratios, advantages, log_ratio, kl_coefficient: float) -> float:
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    return -float(np.mean(r * a)) + kl_coefficient * approx_kl(r, log_ratio)


def kl_penalty_grad(ratios, advantages, kl_coefficient: float) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    return (-r * a + kl_coefficient * (r - 1.0)) / len(r)


# --------------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    env: str = "cartpole"
    env_params: dict = field(default_factory=dict)
    rollout_steps: int = 2048
    epochs_per_iter: int = 4
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    total_iterations: int = 10
    seed: int = 0
    # ClipConfig fields to override; tau and h_max otherwise follow the env.
    clip: dict = field(default_factory=dict)
    kl_coefficient: float = 1.0
    advantage_normalization: bool = True
    clamp_actions: bool = True
    max_grad_norm: float = 0.5
    hidden: int = 64
    success_threshold: float | None = None
    convergence_window: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.env not in ENV_IDS:
            raise ConfigError("env", f"unknown env {self.env!r}; valid ids: {', '.join(ENV_IDS)}")
        for key in ("rollout_steps", "epochs_per_iter", "minibatch_size", "hidden", "convergence_window"):
            v = getattr(self, key)
            if int(v) != v or v < 1:
                raise ConfigError(key, "must be a positive integer")
        for key in ("total_iterations", "checkpoint_every"):
            v = getattr(self, key)
            if int(v) != v or v < 0:
                raise ConfigError(key, "must be a non-negative integer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        for key in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(key, "must lie in [0, 1]")
        if not self.kl_coefficient >= 0:
            raise ConfigError("kl_coefficient", "must be >= 0")
        if not self.max_grad_norm >= 0:
            raise ConfigError("max_grad_norm", "must be >= 0")
        bad = set(self.clip) - set(ClipConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(sorted(bad)[0], "not a clipping parameter")
        self.resolved_clip(self.env_spec())  # validate eagerly

    @property
    def variant(self) -> str:
        return self.clip.get("variant", "ppo_br")

    def env_spec(self) -> EnvSpec:
        try:
            return make_env(self.env, **self.env_params).env_spec()
        except TypeError as exc:
            raise ConfigError("env_params", str(exc)) from None

    def resolved_clip(self, spec: EnvSpec) -> ClipConfig:
        base = {
            "tau": DEFAULT_TAU[self.env],
            "h_max": max_entropy(spec),
            "r_max": float(spec.max_episode_steps * (spec.reward_range[1] - spec.reward_range[0])),
        }
        base.update(self.clip)
        return ClipConfig(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------- records

SERIES_FIELDS = (
    "iteration", "env_steps", "episodes", "mean_return", "max_return", "min_return",
    "return_variance", "trailing_return", "h_t", "delta_r_t", "phi_h", "psi_dr",
    "epsilon_raw", "epsilon_t", "policy_loss", "value_loss", "approx_kl", "clip_fraction",
)


@dataclass
class RunRecord:
    env: str
    variant: str
    seed: int
    config_hash: str
    series: dict = field(default_factory=lambda: {k: [] for k in SERIES_FIELDS})
    timing: dict = field(default_factory=lambda: {"epsilon_ns": [], "update_ns": [], "iteration_ns": []})
    episode_returns: list = field(default_factory=list)
    episode_end_steps: list = field(default_factory=list)
    convergence_iteration: int | None = None
    convergence_step: int | None = None
    first_success_step: int | None = None
    total_env_steps: int = 0

    @property
    def iterations(self) -> int:
        return len(self.series["iteration"])

    @property
    def final_return(self) -> float | None:
        if not self.episode_returns:
            return None
        tail = self.episode_returns[-100:]
        return float(sum(tail) / len(tail))

    @property
    def final_variance(self) -> float | None:
        return reward_variance(self.episode_returns, 100)

    def rows(self) -> list[dict]:
        return [{k: self.series[k][i] for k in SERIES_FIELDS} for i in range(self.iterations)]

    def summary_row(self) -> dict:
        return {
            "seed": self.seed, "variant": self.variant, "env": self.env,
            "final_return": self.final_return, "return_variance": self.final_variance,
            "convergence_step": self.convergence_step,
            "convergence_iteration": self.convergence_iteration,
            "first_success_step": self.first_success_step,
            "total_env_steps": self.total_env_steps, "config_hash": self.config_hash,
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


# --------------------------------------------------------------------------- trainer

class Trainer:
    """Owns parameters, optimiser, reward tracker and RNG streams of one run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.env = make_env(config.env, clamp_actions=config.clamp_actions, **config.env_params)
        self.spec = self.env.env_spec()
        self.clip_cfg = config.resolved_clip(self.spec)
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.params = init_params(self.spec, np.random.default_rng(seeds[0]), config.hidden)
        self.env_seed = int(seeds[1].generate_state(1, dtype=np.uint64)[0])
        self.action_rng = np.random.default_rng(seeds[2])
        self.shuffle_rng = np.random.default_rng(seeds[3])
        self.adam = AdamState(lr=config.learning_rate)
        self.tracker = RewardTracker(self.clip_cfg.window_k)
        self.cursor = None
        self.threshold = (config.success_threshold if config.success_threshold is not None
                          else self.spec.success_threshold)
        self._window = deque(maxlen=config.convergence_window)
        self.record = RunRecord(config.env, self.clip_cfg.variant, config.seed, config.config_hash())
        self.signals_log: list[ClipSignals] = []
        self.epsilons_used: list[set] = []

    @property
    def iteration(self) -> int:
        return self.record.iterations

    def _signals(self, h_t, returns):
        cfg = self.clip_cfg
        return clipping.update_signals(self.tracker, h_t, returns, cfg, self.iteration,
                                       self.config.total_iterations)

    def _batch_entropy(self, observations) -> float:
        return float(np.mean(entropy(forward_policy(self.params, observations))))

    def _track_episodes(self, traj):
        rec = self.record
        finished = completed_episodes(traj)
        for ret, _length, end_step in finished:
            rec.episode_returns.append(ret)
            rec.episode_end_steps.append(end_step)
            self._window.append(ret)
            if rec.first_success_step is None and ret >= self.threshold:
                rec.first_success_step = end_step
            if (rec.convergence_step is None and len(self._window) == self._window.maxlen
                    and sum(self._window) / len(self._window) >= self.threshold):
                rec.convergence_step = end_step
                rec.convergence_iteration = self.iteration
        return [r for r, _, _ in finished]

    def train_iteration(self) -> dict:
        cfg, clip_cfg = self.config, self.clip_cfg
        t_iter = time.perf_counter_ns()
        traj, self.cursor = collect(self.env, self.params, cfg.rollout_steps, self.action_rng,
                                    self.cursor, seed=self.env_seed)
        returns = self._track_episodes(traj)

        t_update = time.perf_counter_ns()
        if clip_cfg.variant in clipping.ADAPTIVE_VARIANTS:
            h_t = self._batch_entropy(traj.observations)
            signals = self._signals(h_t, returns)
            eps = signals.epsilon_t
            t_eps = time.perf_counter_ns() - t_update
        else:
            _, eps = clipping.threshold(clip_cfg, 0.0, 0.0, self.iteration, cfg.total_iterations)
            t_eps = time.perf_counter_ns() - t_update
            # Signals are still tracked for the log, outside the timed path.
            t_log = time.perf_counter_ns()
            signals = self._signals(self._batch_entropy(traj.observations), returns)
            t_update += time.perf_counter_ns() - t_log
        clipping.check_bounds(clip_cfg, signals)
        self.signals_log.append(signals)

        batch = compute_gae(traj, lambda o: forward_value(self.params, o), cfg.gamma, cfg.gae_lambda)
        adv = normalize_advantages(batch.advantages) if cfg.advantage_normalization else batch.advantages
        targets = batch.returns
        obs, actions, old_logp = traj.observations, traj.actions, traj.log_probs

        n = len(traj)
        policy_losses, value_losses, used = [], [], set()
        kl_variant = clip_cfg.variant == "kl_penalty"
        for _ in range(cfg.epochs_per_iter):
            perm = self.shuffle_rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                b = perm[start:start + cfg.minibatch_size]
                logp = log_prob_of(forward_policy(self.params, obs[b]), actions[b])
                log_ratio = logp - old_logp[b]
                ratio = np.exp(log_ratio)
                if kl_variant:
                    pl = kl_penalty_loss(ratio, adv[b], log_ratio, cfg.kl_coefficient)
                    dlogp = kl_penalty_grad(ratio, adv[b], cfg.kl_coefficient)
                else:
                    pl, _ = ppo_clip_loss(ratio, adv[b], eps)
                    dlogp = ppo_clip_grad(ratio, adv[b], eps)
                    used.add(eps)
                v = forward_value(self.params, obs[b])
                vl = value_loss(v, targets[b])
                if not (math.isfinite(pl) and math.isfinite(vl)):
                    raise NonFiniteError(f"non-finite loss (policy={pl}, value={vl})")
                grads = backward(self.params, obs[b], actions[b], dlogp, 2.0 * (v - targets[b]) / len(b))
                clip_grad_norm(grads, ACTOR_KEYS, cfg.max_grad_norm)
                clip_grad_norm(grads, CRITIC_KEYS, cfg.max_grad_norm)
                self.params = adam_step(self.params, grads, self.adam)
                policy_losses.append(pl)
                value_losses.append(vl)
        update_ns = time.perf_counter_ns() - t_update
        self.epsilons_used.append(used)

        logp = log_prob_of(forward_policy(self.params, obs), actions)
        log_ratio = logp - old_logp
        ratio = np.exp(log_ratio)
        rec = self.record
        rec.total_env_steps = self.cursor.total_steps
        rets = np.asarray(returns) if returns else None
        row = {
            "iteration": self.iteration,
            "env_steps": self.cursor.total_steps,
            "episodes": len(returns),
            "mean_return": _num(rets.mean()) if rets is not None else None,
            "max_return": _num(rets.max()) if rets is not None else None,
            "min_return": _num(rets.min()) if rets is not None else None,
            "return_variance": _num(reward_variance(rec.episode_returns, cfg.convergence_window)),
            "trailing_return": _num(np.mean(self._window)) if self._window else None,
            "h_t": signals.h_t,
            "delta_r_t": signals.delta_r_t,
            "phi_h": signals.phi_h,
            "psi_dr": signals.psi_dr,
            "epsilon_raw": signals.epsilon_raw,
            "epsilon_t": eps,
            "policy_loss": float(np.mean(policy_losses)),
            "value_loss": float(np.mean(value_losses)),
            "approx_kl": approx_kl(ratio, log_ratio),
            "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        }
        for k in SERIES_FIELDS:
            rec.series[k].append(row[k])
        rec.timing["epsilon_ns"].append(t_eps)
        rec.timing["update_ns"].append(update_ns)
        rec.timing["iteration_ns"].append(time.perf_counter_ns() - t_iter)
        return row


# --------------------------------------------------------------------------- driver

def signals_record(s: ClipSignals) -> dict:
    """Clipping-signal fields as written to run.jsonl."""
    return {k: s.to_dict()[k] for k in
            ("iteration", "h_t", "delta_r_t", "phi_h", "psi_dr", "epsilon_raw", "epsilon_t", "variant")}


def train(config: TrainConfig, out_dir=None, trainer: Trainer | None = None) -> RunRecord:
    """Run ``config.total_iterations`` iterations.

    With ``out_dir`` the run writes ``config.json``, ``run.jsonl`` (one line
    per iteration, flushed as it goes), ``timing.jsonl``, ``summary.csv`` and
    ``checkpoint.npz``. A non-finite loss or parameter raises TrainingAborted
    after writing ``abort.json``; the partial logs stay on disk.
    """
    from .artifacts import RunWriter

    trainer = trainer or Trainer(config)
    writer = RunWriter(out_dir, config) if out_dir is not None else None
    try:
        for _ in range(config.total_iterations):
            try:
                row = trainer.train_iteration()
            except (NonFiniteError, FloatingPointError) as exc:
                diag = {"iteration": trainer.iteration, "error": str(exc),
                        "config_hash": config.config_hash()}
                if writer:
                    writer.abort(diag)
                raise TrainingAborted(str(exc), diag) from exc
            if writer:
                writer.iteration(row, signals_record(trainer.signals_log[-1]), trainer)
        if writer:
            writer.finish(trainer)
    finally:
        if writer:
            writer.close()
    return trainer.record
