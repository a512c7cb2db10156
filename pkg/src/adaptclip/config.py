"""Plain-text experiment configuration.

Grammar (INI, read with :mod:`configparser`; ``#`` and ``;`` start comments)::

    [plan]                  envs, variants, seeds, out, jobs
    [envcore]               env parameters: length, max_episode_steps, bound, goal ...
    [rollout]               rollout_steps, gamma, gae_lambda, advantage_normalization, clamp_actions
    [nnpolicy]              hidden, learning_rate, max_grad_norm
    [trainer]               epochs_per_iter, minibatch_size, total_iterations, seed,
                            kl_coefficient, success_threshold, convergence_window, checkpoint_every
    [adaptclip]             any clipping field: variant, epsilon_0, lambda_1, lambda_2, alpha, beta,
                            epsilon_min, epsilon_max, tau, window_k, h_max, r_max, reward_term_sign

A section may be scoped to one env, one variant or both::

    [adaptclip@sparse-chain]        lambda_1 = 0.7
    [trainer@cartpole/ppo_br]       total_iterations = 74

Scoped sections apply after the unscoped one, env before variant before
env/variant. Lists are comma separated; seeds also accept ranges (``0-4``).
Values parse as int, float, bool (true/false) or, failing those, string;
``none`` gives None. Every error names the offending key.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .clipping import VARIANTS, ClipConfig, ConfigError
from .envs import ENV_IDS
from .trainer import TrainConfig

SECTION_KEYS = {
    "rollout": ("rollout_steps", "gamma", "gae_lambda", "advantage_normalization", "clamp_actions"),
    "nnpolicy": ("hidden", "learning_rate", "max_grad_norm"),
    "trainer": ("epochs_per_iter", "minibatch_size", "total_iterations", "seed", "kl_coefficient",
                "success_threshold", "convergence_window", "checkpoint_every"),
    "adaptclip": tuple(ClipConfig.__dataclass_fields__),
}
ENV_PARAM_KEYS = ("length", "max_episode_steps", "bound", "goal")
PLAN_KEYS = ("envs", "variants", "seeds", "out", "jobs")
MODULE_SECTIONS = ("envcore",) + tuple(SECTION_KEYS)
OVERRIDE_KEYS = ENV_PARAM_KEYS + tuple(k for keys in SECTION_KEYS.values() for k in keys)


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return tuple(parse_value(p) for p in t.split(","))
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(x).strip() for x in text]
    return [p.strip() for p in str(text).split(",") if p.strip()]


def parse_seeds(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    seeds = []
    for part in parse_list(text):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError("seeds", f"cannot parse {part!r}") from None
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seed")
    return seeds


@dataclass
class ConfigFile:
    """Parsed sections: ``sections[(module, scope)] = {key: value}``."""
    sections: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    source: str = "<flags>"

    @classmethod
    def read(cls, path) -> "ConfigFile":
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        return cls.parse(path.read_text(), str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ConfigFile":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError("config", str(exc).splitlines()[0]) from None
        out = cls(source=source)
        for name in cp.sections():
            module, _, scope = name.partition("@")
            items = dict(cp.items(name))
            if module == "plan":
                if scope:
                    raise ConfigError(name, "the plan section cannot be scoped")
                for k in items:
                    if k not in PLAN_KEYS:
                        raise ConfigError(k, f"unknown key in [plan]; valid keys: {', '.join(PLAN_KEYS)}")
                out.plan = items
                continue
            if module not in MODULE_SECTIONS:
                raise ConfigError(name, f"unknown section; valid sections: plan, {', '.join(MODULE_SECTIONS)}")
            _check_scope(name, scope)
            valid = ENV_PARAM_KEYS if module == "envcore" else SECTION_KEYS[module]
            parsed = {}
            for k, v in items.items():
                if module == "envcore" and k == "env":
                    raise ConfigError(k, "choose envs in [plan] (envs = ...) or with --env")
                if k not in valid:
                    raise ConfigError(k, f"unknown key in [{name}]; valid keys: {', '.join(valid)}")
                parsed[k] = parse_value(v)
            out.sections[(module, scope)] = parsed
        return out

    def resolve(self, env: str, variant: str, seed: int | None = None,
                overrides: dict | None = None, strict_env: bool = True) -> TrainConfig:
        """Merge unscoped, env-, variant- and env/variant-scoped sections, then flag overrides.

        An explicit ``seed`` beats any ``seed`` key in the file. With
        ``strict_env=False`` env-parameter overrides that ``env`` does not
        take are skipped (multi-env plans).
        """
        kwargs: dict = {"env": env}
        env_params: dict = {}
        clip: dict = {}
        for scope in ("", env, variant, f"{env}/{variant}"):
            for module in MODULE_SECTIONS:
                values = self.sections.get((module, scope))
                if not values:
                    continue
                if module == "envcore":
                    if env in ENV_IDS and scope in ("", variant):
                        # Unscoped env params only make sense when they fit this env.
                        env_params.update(_env_params_for(env, values, strict=False))
                    else:
                        env_params.update(_env_params_for(env, values, strict=True))
                elif module == "adaptclip":
                    clip.update(values)
                else:
                    kwargs.update(values)
        for k, v in (overrides or {}).items():
            if k not in OVERRIDE_KEYS:
                raise ConfigError(k, "unknown key; valid keys: " + ", ".join(OVERRIDE_KEYS))
            if v is None:
                continue
            if k in SECTION_KEYS["adaptclip"]:
                clip[k] = v
            elif k in ENV_PARAM_KEYS:
                if k in ENV_ACCEPTS[env]:
                    env_params[k] = v
                elif strict_env:
                    raise ConfigError(k, f"not a parameter of {env}; valid: {', '.join(ENV_ACCEPTS[env])}")
            else:
                kwargs[k] = v
        if seed is not None:
            kwargs["seed"] = seed
        clip["variant"] = variant
        if "goal" in env_params:
            env_params["goal"] = tuple(float(g) for g in env_params["goal"])
        return TrainConfig(env_params=env_params, clip=clip, **kwargs)


ENV_ACCEPTS = {
    "cartpole": ("max_episode_steps",),
    "sparse-chain": ("length", "max_episode_steps"),
    "point-mass": ("max_episode_steps", "bound", "goal"),
}


def _env_params_for(env: str, values: dict, strict: bool) -> dict:
    out = {}
    for k, v in values.items():
        if k in ENV_ACCEPTS[env]:
            out[k] = v
        elif strict:
            raise ConfigError(k, f"not a parameter of {env}; valid: {', '.join(ENV_ACCEPTS[env])}")
    return out


def _check_scope(name: str, scope: str) -> None:
    if not scope:
        return
    parts = scope.split("/")
    if len(parts) == 2:
        env, variant = parts
        if env not in ENV_IDS:
            raise ConfigError(name, f"unknown env {env!r}; valid ids: {', '.join(ENV_IDS)}")
        if variant not in VARIANTS:
            raise ConfigError(name, f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}")
    elif len(parts) == 1 and (scope in ENV_IDS or scope in VARIANTS):
        return
    else:
        raise ConfigError(name, f"scope must be an env ({', '.join(ENV_IDS)}), a variant "
                                f"({', '.join(VARIANTS)}) or env/variant")
