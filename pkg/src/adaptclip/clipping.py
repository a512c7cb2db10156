"""Adaptive clipping thresholds.

The dual-signal rule widens the PPO trust region while the policy is
uncertain and narrows it as returns improve:

    eps_raw = eps0 * (1 + lambda_1 * tanh(phi(H)) - lambda_2 * tanh(psi(dR)))
    eps_t   = clip(eps_raw, eps_min, eps_max)

with phi(H) = min(H / H_max, 1) and psi(x) = 1 - exp(-max(x, 0) / tau).
Single-signal ablations, a linear annealing schedule and the fixed threshold
are provided alongside so every baseline goes through the same code path.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

VARIANTS = ("fixed", "ppo_br", "entropy_only", "reward_only", "annealed", "kl_penalty")
REWARD_TERM_SIGNS = ("eq6_minus", "eq5_plus")
# Variants whose threshold depends on the behavioural signals.
ADAPTIVE_VARIANTS = ("ppo_br", "entropy_only", "reward_only")

TANH_1 = math.tanh(1.0)


class ConfigError(ValueError):
    """Invalid hyperparameter; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ClipConfig:
    epsilon_0: float = 0.2
    lambda_1: float = 0.5
    lambda_2: float = 0.3
    # Standalone weights of the single-signal ablations; None means "same as
    # lambda_1 / lambda_2" so ablations stay comparable with the unified rule.
    alpha: float | None = None
    beta: float | None = None
    epsilon_min: float = 0.05
    epsilon_max: float = 0.4
    tau: float = 50.0
    window_k: int = 10
    h_max: float = math.log(2)
    r_max: float = 500.0
    variant: str = "ppo_br"
    reward_term_sign: str = "eq6_minus"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        if self.reward_term_sign not in REWARD_TERM_SIGNS:
            raise ConfigError("reward_term_sign", f"must be one of {', '.join(REWARD_TERM_SIGNS)}")
        for key in ("lambda_1", "lambda_2"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("alpha", "beta"):
            v = getattr(self, key)
            if v is not None and not v >= 0:
                raise ConfigError(key, "must be >= 0")
        if not self.lambda_2 < 1:
            raise ConfigError("lambda_2", "must be < 1 so the lower bound stays positive")
        if not 0 < self.epsilon_min <= self.epsilon_0 <= self.epsilon_max:
            raise ConfigError("epsilon_0", "need 0 < epsilon_min <= epsilon_0 <= epsilon_max")
        if not self.tau > 0:
            raise ConfigError("tau", "must be > 0")
        if not self.h_max > 0:
            raise ConfigError("h_max", "must be > 0")
        if not self.r_max > 0:
            raise ConfigError("r_max", "must be > 0")
        if int(self.window_k) != self.window_k or self.window_k < 1:
            raise ConfigError("window_k", "must be a positive integer")
        for key in ("epsilon_0", "lambda_1", "lambda_2", "epsilon_min", "epsilon_max"):
            if not math.isfinite(getattr(self, key)):
                raise ConfigError(key, "must be finite")

    @property
    def entropy_weight(self) -> float:
        return self.lambda_1 if self.alpha is None else self.alpha

    @property
    def reward_weight(self) -> float:
        return self.lambda_2 if self.beta is None else self.beta

    @property
    def reward_sign(self) -> float:
        return -1.0 if self.reward_term_sign == "eq6_minus" else 1.0

    def replace(self, **changes) -> "ClipConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClipSignals:
    iteration: int
    h_t: float
    delta_r_t: float
    phi_h: float
    psi_dr: float
    epsilon_raw: float
    epsilon_t: float
    variant: str

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- normalisers

def phi(h: float, h_max: float) -> float:
    """Entropy mapped onto [0, 1]: min(h / h_max, 1)."""
    if not h_max > 0:
        raise ConfigError("h_max", "must be > 0")
    return min(max(h, 0.0) / h_max, 1.0)


def psi(x: float, tau: float) -> float:
    """Reward delta mapped onto [0, 1): 1 - exp(-max(x, 0) / tau)."""
    if not tau > 0:
        raise ConfigError("tau", "must be > 0")
    return -math.expm1(-max(x, 0.0) / tau)


# --------------------------------------------------------------------------- thresholds

def clamp(eps: float, cfg: ClipConfig) -> float:
    return min(max(eps, cfg.epsilon_min), cfg.epsilon_max)


def epsilon_entropy(cfg: ClipConfig, phi_h: float) -> float:
    """Entropy-only expansion eps0 * (1 + alpha * tanh(phi_h)), unclamped."""
    return cfg.epsilon_0 * (1.0 + cfg.entropy_weight * math.tanh(phi_h))


def epsilon_reward(cfg: ClipConfig, psi_dr: float) -> float:
    """Reward-only term eps0 * (1 -/+ beta * tanh(psi_dr)), unclamped.

    Contracts by default; ``reward_term_sign="eq5_plus"`` flips it to expansion.
    """
    return cfg.epsilon_0 * (1.0 + cfg.reward_sign * cfg.reward_weight * math.tanh(psi_dr))


def epsilon_unified_raw(cfg: ClipConfig, phi_h: float, psi_dr: float) -> float:
    return cfg.epsilon_0 * (
        1.0 + cfg.lambda_1 * math.tanh(phi_h) + cfg.reward_sign * cfg.lambda_2 * math.tanh(psi_dr)
    )


def epsilon_unified(cfg: ClipConfig, signals) -> float:
    """Clamped dual-signal threshold. ``signals`` needs ``phi_h`` and ``psi_dr``."""
    return clamp(epsilon_unified_raw(cfg, signals.phi_h, signals.psi_dr), cfg)


def epsilon_annealed(cfg: ClipConfig, iteration: int, total_iterations: int) -> float:
    """Linear decay from epsilon_0 at iteration 0 to epsilon_min at the last one."""
    if total_iterations <= 0:
        return cfg.epsilon_0
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    frac = iteration / total_iterations
    return cfg.epsilon_0 + (cfg.epsilon_min - cfg.epsilon_0) * frac


def guaranteed_band(cfg: ClipConfig) -> tuple[float, float]:
    """Loose band [eps0 (1 - lambda_2), eps0 (1 + lambda_1)] on the raw unified
    threshold (for the expansion-sign flag the reward term adds instead)."""
    if cfg.reward_sign < 0:
        return cfg.epsilon_0 * (1 - cfg.lambda_2), cfg.epsilon_0 * (1 + cfg.lambda_1)
    return cfg.epsilon_0, cfg.epsilon_0 * (1 + cfg.lambda_1 + cfg.lambda_2)


def tight_band(cfg: ClipConfig) -> tuple[float, float]:
    """Attainable band when phi, psi lie in [0, 1]: tanh caps each term at tanh(1)."""
    if cfg.reward_sign < 0:
        return (cfg.epsilon_0 * (1 - cfg.lambda_2 * TANH_1),
                cfg.epsilon_0 * (1 + cfg.lambda_1 * TANH_1))
    return cfg.epsilon_0, cfg.epsilon_0 * (1 + (cfg.lambda_1 + cfg.lambda_2) * TANH_1)


def check_bounds(cfg: ClipConfig, signals: ClipSignals, tol: float = 1e-12) -> None:
    """Raise AssertionError if a ppo_br threshold leaves either band or the clamp."""
    if not cfg.epsilon_min - tol <= signals.epsilon_t <= cfg.epsilon_max + tol:
        raise AssertionError(f"epsilon_t={signals.epsilon_t} outside [{cfg.epsilon_min}, {cfg.epsilon_max}]")
    if cfg.variant != "ppo_br":
        return
    for lo, hi in (tight_band(cfg), guaranteed_band(cfg)):
        if not lo - tol <= signals.epsilon_raw <= hi + tol:
            raise AssertionError(f"raw epsilon {signals.epsilon_raw} outside [{lo}, {hi}]")


# --------------------------------------------------------------------------- signal tracking

@dataclass
class RewardTracker:
    """Per-iteration mean episodic returns; keeps the last 2k entries.

    The smoothed return is a k-entry moving average; the reward delta compares
    the newest smoothed value with the one k iterations earlier and is 0 until
    k + 1 entries have been seen.
    """
    window_k: int = 10
    history: deque = field(default_factory=deque)
    seen: int = 0

    def push(self, value: float) -> None:
        self.history.append(float(value))
        self.seen += 1
        while len(self.history) > 2 * self.window_k:
            self.history.popleft()

    @property
    def last(self) -> float | None:
        return self.history[-1] if self.history else None

    def smoothed(self, lag: int = 0) -> float:
        buf = list(self.history)
        end = len(buf) - lag
        lo = max(0, end - self.window_k)
        return sum(buf[lo:end]) / (end - lo)

    def delta(self) -> float:
        if self.seen < self.window_k + 1:
            return 0.0
        return self.smoothed(0) - self.smoothed(self.window_k)


def threshold(cfg: ClipConfig, phi_h: float, psi_dr: float, iteration: int = 0,
              total_iterations: int = 0) -> tuple[float, float]:
    """(raw, clamped) threshold for the configured variant."""
    v = cfg.variant
    if v == "ppo_br":
        raw = epsilon_unified_raw(cfg, phi_h, psi_dr)
    elif v == "entropy_only":
        raw = epsilon_entropy(cfg, phi_h)
    elif v == "reward_only":
        raw = epsilon_reward(cfg, psi_dr)
    elif v == "annealed":
        raw = epsilon_annealed(cfg, iteration, total_iterations)
    else:
        raw = cfg.epsilon_0
    return raw, clamp(raw, cfg)


def update_signals(tracker: RewardTracker, batch_entropy: float, new_episode_returns,
                   cfg: ClipConfig, iteration: int = 0, total_iterations: int = 0) -> ClipSignals:
    """Fold one iteration's measurements into the tracker and derive eps_t.

    With no completed episodes this iteration the previous mean is repeated,
    so the tracker advances exactly once per iteration.
    """
    if batch_entropy < 0:
        raise ValueError(f"batch entropy must be >= 0, got {batch_entropy}")
    returns = list(new_episode_returns)
    if returns:
        tracker.push(sum(returns) / len(returns))
    else:
        tracker.push(tracker.last if tracker.last is not None else 0.0)
    delta_r = tracker.delta()
    phi_h = phi(batch_entropy, cfg.h_max)
    psi_dr = psi(delta_r, cfg.tau)
    raw, eps = threshold(cfg, phi_h, psi_dr, iteration, total_iterations)
    return ClipSignals(iteration, float(batch_entropy), delta_r, phi_h, psi_dr, raw, eps, cfg.variant)
