"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from adaptclip.envs import Continuous, Discrete, EnvSpec
from adaptclip.policy import backward, forward_policy, forward_value, init_params, log_prob_of
from adaptclip.trainer import (
    kl_penalty_grad, kl_penalty_loss, ppo_clip_grad, ppo_clip_loss, value_loss,
)


def random_problem(rng, discrete=None, kl=False):
    """A random small actor-critic, batch and loss; returns (params, loss_fn, grad_fn)."""
    obs_dim = int(rng.integers(1, 6))
    hidden = int(rng.choice([3, 8, 16]))
    batch = int(rng.integers(2, 9))
    discrete = bool(rng.integers(2)) if discrete is None else discrete
    if discrete:
        space = Discrete(int(rng.integers(2, 5)))
    else:
        d = int(rng.integers(1, 4))
        space = Continuous(d, (-1.0,) * d, (1.0,) * d)
    spec = EnvSpec(obs_dim, space, 10, (0.0, 1.0), 1.0, 1.0)
    params = init_params(spec, rng, hidden)
    # Move away from the tiny-head init so every path carries signal.
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.5, params[k].shape)
    if "log_std" in params:
        params["log_std"] = rng.uniform(-1.0, 1.0, params["log_std"].shape)
    obs = rng.normal(0, 1, (batch, obs_dim))
    dist = forward_policy(params, obs)
    if discrete:
        actions = rng.integers(0, space.n, batch)
    else:
        actions = dist.mean + dist.std * rng.normal(size=dist.mean.shape)
    old_logp = log_prob_of(dist, actions) + rng.normal(0, 0.3, batch)
    adv = rng.normal(0, 1, batch)
    targets = rng.normal(0, 1, batch)
    eps = float(rng.uniform(0.1, 0.3))
    coef = float(rng.uniform(0.0, 2.0))

    def loss_fn(p):
        logp = log_prob_of(forward_policy(p, obs), actions)
        log_ratio = logp - old_logp
        ratio = np.exp(log_ratio)
        if kl:
            pl = kl_penalty_loss(ratio, adv, log_ratio, coef)
        else:
            pl = ppo_clip_loss(ratio, adv, eps)[0]
        return pl + value_loss(forward_value(p, obs), targets)

    def grad_fn(p):
        ratio = np.exp(log_prob_of(forward_policy(p, obs), actions) - old_logp)
        dlogp = kl_penalty_grad(ratio, adv, coef) if kl else ppo_clip_grad(ratio, adv, eps)
        v = forward_value(p, obs)
        return backward(p, obs, actions, dlogp, 2.0 * (v - targets) / batch)

    return params, loss_fn, grad_fn


def finite_difference(loss_fn, params, h=1e-5):
    grads = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in params.items()}
            minus = {kk: vv.copy() for kk, vv in params.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
        grads[k] = g
    return grads


def gradients_agree(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Every component within rtol (relative) or atol (absolute)."""
    for k in numeric:
        a, n = analytic[k], numeric[k]
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        ok = (diff <= atol) | (diff <= rtol * scale)
        if not np.all(ok):
            return False, k, float(diff.max())
    return True, None, 0.0
