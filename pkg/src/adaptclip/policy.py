"""Two-layer MLP actor-critic on numpy with hand-derived backprop.

Parameters live in a flat ``dict[str, ndarray]``:

    pi_W1 (hidden, obs_dim)   pi_b1 (hidden,)
    pi_W2 (head, hidden)      pi_b2 (head,)
    v_W1  (hidden, obs_dim)   v_b1  (hidden,)
    v_W2  (1, hidden)         v_b2  (1,)
    log_std (action_dim,)     -- Gaussian heads only

Actor and critic are separate networks. All arrays are float64.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .envs import Continuous, Discrete, EnvSpec

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)

ACTOR_KEYS = ("pi_W1", "pi_b1", "pi_W2", "pi_b2", "log_std")
CRITIC_KEYS = ("v_W1", "v_b1", "v_W2", "v_b2")


class NonFiniteError(FloatingPointError):
    """A parameter, gradient or loss became NaN/inf."""


Params = dict  # str -> np.ndarray


def _uniform(rng, shape, fan_in, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: EnvSpec, rng: np.random.Generator, hidden: int = 64) -> Params:
    """Fan-in scaled uniform init: gain sqrt(2) on hidden layers, 0.01 on the
    policy head (near-maximal initial entropy), 1.0 on the value head."""
    obs_dim = spec.observation_dim
    space = spec.action_space
    head = space.n if isinstance(space, Discrete) else space.dim
    g = math.sqrt(2.0)
    p = {
        "pi_W1": _uniform(rng, (hidden, obs_dim), obs_dim, g),
        "pi_b1": np.zeros(hidden),
        "pi_W2": _uniform(rng, (head, hidden), hidden, 0.01),
        "pi_b2": np.zeros(head),
        "v_W1": _uniform(rng, (hidden, obs_dim), obs_dim, g),
        "v_b1": np.zeros(hidden),
        "v_W2": _uniform(rng, (1, hidden), hidden, 1.0),
        "v_b2": np.zeros(1),
    }
    if isinstance(space, Continuous):
        p["log_std"] = np.zeros(space.dim)
    return p


def check_shapes(params: Params, spec: EnvSpec) -> None:
    hidden = params["pi_b1"].shape[0]
    space = spec.action_space
    head = space.n if isinstance(space, Discrete) else space.dim
    expected = {
        "pi_W1": (hidden, spec.observation_dim), "pi_b1": (hidden,),
        "pi_W2": (head, hidden), "pi_b2": (head,),
        "v_W1": (hidden, spec.observation_dim), "v_b1": (hidden,),
        "v_W2": (1, hidden), "v_b2": (1,),
    }
    if isinstance(space, Continuous):
        expected["log_std"] = (space.dim,)
    if set(params) != set(expected):
        raise ValueError(f"parameter blocks {sorted(params)} != {sorted(expected)}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValueError(f"{k} has shape {params[k].shape}, expected {shape}")


# --------------------------------------------------------------------------- distributions

@dataclass
class Categorical:
    logits: np.ndarray  # (..., n)

    def __post_init__(self):
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        self.log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class DiagonalGaussian:
    mean: np.ndarray  # (..., d)
    log_std: np.ndarray  # (d,), already clamped

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


PolicyDistribution = Categorical | DiagonalGaussian


def _mlp(W1, b1, W2, b2, x):
    pre = x @ W1.T + b1
    h = np.maximum(pre, 0.0)
    return h @ W2.T + b2, (x, pre, h)


def _mlp_backward(W2, cache, d_out):
    x, pre, h = cache
    dW2 = d_out.T @ h
    db2 = d_out.sum(axis=0)
    d_pre = (d_out @ W2) * (pre > 0)
    dW1 = d_pre.T @ x
    db1 = d_pre.sum(axis=0)
    return dW1, db1, dW2, db2


def _check_obs(params, observation):
    obs = np.asarray(observation, dtype=np.float64)
    obs_dim = params["pi_W1"].shape[1]
    if obs.shape[-1:] != (obs_dim,):
        raise ValueError(f"observation has shape {obs.shape}, expected trailing dim {obs_dim}")
    return obs


def forward_policy(params: Params, observation) -> PolicyDistribution:
    """Policy distribution for one observation (obs_dim,) or a batch (B, obs_dim)."""
    obs = _check_obs(params, observation)
    out, _ = _mlp(params["pi_W1"], params["pi_b1"], params["pi_W2"], params["pi_b2"], obs)
    if "log_std" in params:
        return DiagonalGaussian(out, np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX))
    return Categorical(out)


def forward_value(params: Params, observation) -> np.ndarray:
    obs = _check_obs(params, observation)
    out, _ = _mlp(params["v_W1"], params["v_b1"], params["v_W2"], params["v_b2"], obs)
    return out[..., 0]


def log_prob_of(dist: PolicyDistribution, action) -> np.ndarray | float:
    if isinstance(dist, Categorical):
        a = np.asarray(action, dtype=np.int64)
        lp = np.take_along_axis(dist.log_probs, a[..., None], axis=-1)[..., 0]
    else:
        a = np.asarray(action, dtype=np.float64)
        z = (a - dist.mean) / dist.std
        lp = (-0.5 * z * z - dist.log_std - HALF_LOG_2PI).sum(axis=-1)
    return float(lp) if np.ndim(lp) == 0 else lp


def entropy(dist: PolicyDistribution) -> np.ndarray | float:
    """Exact entropy in nats."""
    if isinstance(dist, Categorical):
        p = dist.probs
        h = -(p * dist.log_probs).sum(axis=-1)
    else:
        per_row = float((HALF_LOG_2PIE + dist.log_std).sum())
        h = np.full(dist.mean.shape[:-1], per_row)
    return float(h) if np.ndim(h) == 0 else h


def sample_action(dist: PolicyDistribution, rng: np.random.Generator):
    """Draw one action from an unbatched distribution; returns (action, log_prob)."""
    if isinstance(dist, Categorical):
        cdf = np.cumsum(dist.probs)
        action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        action = min(action, len(cdf) - 1)
    else:
        action = dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
    return action, log_prob_of(dist, action)


def max_entropy(spec: EnvSpec) -> float:
    """Entropy ceiling used to normalise H_t: ln(n) for categorical heads, the
    initial (log_std = 0) entropy for Gaussian heads."""
    space = spec.action_space
    if isinstance(space, Discrete):
        return math.log(space.n)
    return space.dim * HALF_LOG_2PIE


# --------------------------------------------------------------------------- gradients

def backward(params: Params, observations, actions=None, dloss_dlogp=None,
             dloss_dvalue=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter block.

    The loss is given through its partial derivatives w.r.t. the per-sample
    log-probabilities of ``actions`` (actor path) and/or the per-sample value
    predictions (critic path). Blocks not reached get zero gradients.
    """
    obs = np.atleast_2d(_check_obs(params, observations))
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if dloss_dlogp is not None:
        g = np.asarray(dloss_dlogp, dtype=np.float64)
        out, cache = _mlp(params["pi_W1"], params["pi_b1"], params["pi_W2"], params["pi_b2"], obs)
        if "log_std" in params:
            raw = params["log_std"]
            log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
            a = np.asarray(actions, dtype=np.float64).reshape(out.shape)
            z = (a - out) / np.exp(log_std)
            d_out = g[:, None] * z / np.exp(log_std)
            d_log_std = (g[:, None] * (z * z - 1.0)).sum(axis=0)
            inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
            grads["log_std"] = np.where(inside, d_log_std, 0.0)
        else:
            dist = Categorical(out)
            onehot = np.zeros_like(out)
            onehot[np.arange(len(out)), np.asarray(actions, dtype=np.int64)] = 1.0
            d_out = g[:, None] * (onehot - dist.probs)
        dW1, db1, dW2, db2 = _mlp_backward(params["pi_W2"], cache, d_out)
        grads.update(pi_W1=dW1, pi_b1=db1, pi_W2=dW2, pi_b2=db2)
    if dloss_dvalue is not None:
        g = np.asarray(dloss_dvalue, dtype=np.float64)
        _, cache = _mlp(params["v_W1"], params["v_b1"], params["v_W2"], params["v_b2"], obs)
        dW1, db1, dW2, db2 = _mlp_backward(params["v_W2"], cache, g[:, None])
        grads.update(v_W1=dW1, v_b1=db1, v_W2=dW2, v_b2=db2)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite gradient in parameter block {k!r}")
    return grads


def clip_grad_norm(grads: dict, keys, max_norm: float) -> float:
    """Rescale the listed blocks in place so their joint L2 norm is <= max_norm.
    Returns the norm before clipping."""
    keys = [k for k in keys if k in grads]
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in keys:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Params, grads: dict, state: AdamState) -> Params:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state``
    is advanced in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        new[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
        if not np.all(np.isfinite(new[k])):
            raise NonFiniteError(f"non-finite value in parameter block {k!r} after update")
    return new


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "adaptclip-checkpoint-v1"


def save_checkpoint(path, params: Params, config_hash: str = "") -> None:
    """Write params as an uncompressed .npz archive.

    Members: ``__format__`` and ``__config_hash__`` (0-d unicode arrays), then
    one float64 array per parameter block under its own name. Loading returns
    the exact bytes that were saved.
    """
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(CHECKPOINT_FORMAT),
                 __config_hash__=np.array(config_hash), **arrays)


def load_checkpoint(path) -> tuple[Params, str]:
    with np.load(path, allow_pickle=False) as data:
        if str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
        config_hash = str(data["__config_hash__"])
        params = {k: data[k].copy() for k in data.files if not k.startswith("__")}
    return params, config_hash


def params_digest(params: Params) -> str:
    """sha256 over the raw bytes of every block, in sorted key order."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()
