import json
import math

import numpy as np
import pytest

from adaptclip.artifacts import read_jsonl
from adaptclip.clipping import ConfigError
from adaptclip.policy import params_digest
from adaptclip.trainer import (
    TrainConfig, Trainer, TrainingAborted, approx_kl, kl_penalty_loss, ppo_clip_grad,
    ppo_clip_loss, train, value_loss,
)


def small(**kw):
    base = dict(env="cartpole", rollout_steps=256, minibatch_size=64, total_iterations=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_clip_loss_reference_cases():
    loss, terms = ppo_clip_loss(np.array([1.5]), np.array([1.0]), 0.2)
    assert terms[0] == pytest.approx(1.2, abs=1e-12) and loss == pytest.approx(-1.2)
    _, terms = ppo_clip_loss(np.array([0.5]), np.array([-1.0]), 0.2)
    assert terms[0] == pytest.approx(-0.8, abs=1e-12)
    _, terms = ppo_clip_loss(np.array([1.1]), np.array([2.0]), 0.2)
    assert terms[0] == pytest.approx(2.2, abs=1e-12)


def test_clip_loss_is_pessimistic_bound():
    rng = np.random.default_rng(0)
    r = np.exp(rng.normal(0, 0.5, 10_000))
    a = rng.normal(size=10_000)
    _, terms = ppo_clip_loss(r, a, 0.2)
    assert np.all(terms <= r * a + 1e-15)
    assert np.all(terms <= np.clip(r, 0.8, 1.2) * a + 1e-15)


def test_clip_grad_vanishes_on_clipped_branch():
    g = ppo_clip_grad(np.array([1.5, 0.5, 1.5, 0.5, 1.0]), np.array([1.0, -1.0, -1.0, 1.0, 1.0]), 0.2)
    assert g[0] == 0.0 and g[1] == 0.0
    assert g[2] != 0.0 and g[3] != 0.0 and g[4] == pytest.approx(-1.0 / 5)


def test_value_loss_cases():
    assert value_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert value_loss(np.array([0.0, 0.0]), np.array([1.0, -3.0])) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        value_loss(np.zeros(2), np.zeros(3))


def test_approx_kl_reference():
    assert approx_kl(np.array([math.e])) == pytest.approx(0.718282, abs=1e-6)
    assert approx_kl(np.ones(4)) == 0.0
    r = np.exp(np.random.default_rng(1).normal(size=100))
    assert approx_kl(r) >= 0.0
    assert kl_penalty_loss(np.ones(3), np.ones(3), np.zeros(3), 5.0) == pytest.approx(-1.0)


def test_first_iteration_threshold_is_entropy_driven():
    tr = Trainer(small(total_iterations=1))
    row = tr.train_iteration()
    # Near-uniform initial policy and no reward history yet.
    assert row["delta_r_t"] == 0.0
    assert abs(row["epsilon_t"] - 0.276) < 0.002


@pytest.mark.parametrize("variant", ["ppo_br", "fixed", "annealed", "entropy_only", "reward_only"])
def test_threshold_constant_within_iteration(variant):
    tr = Trainer(small(total_iterations=3, clip={"variant": variant}))
    for _ in range(3):
        row = tr.train_iteration()
        assert tr.epsilons_used[-1] == {row["epsilon_t"]}


def test_annealed_threshold_decreases():
    tr = Trainer(small(total_iterations=4, clip={"variant": "annealed"}))
    eps = [tr.train_iteration()["epsilon_t"] for _ in range(4)]
    assert eps == pytest.approx([0.2, 0.1625, 0.125, 0.0875])


def test_kl_variant_runs_without_clipping():
    tr = Trainer(small(clip={"variant": "kl_penalty"}))
    tr.train_iteration()
    assert tr.epsilons_used[-1] == set()


def test_zero_advantage_leaves_actor_unchanged(monkeypatch):
    import adaptclip.trainer as mod
    tr = Trainer(small(advantage_normalization=False))
    before = {k: v.copy() for k, v in tr.params.items()}

    real = mod.compute_gae

    def zero_gae(traj, value_fn, gamma, lam):
        batch = real(traj, value_fn, gamma, lam)
        batch.advantages[:] = 0.0
        return batch

    monkeypatch.setattr(mod, "compute_gae", zero_gae)
    tr.train_iteration()
    for k in ("pi_W1", "pi_b1", "pi_W2", "pi_b2"):
        np.testing.assert_array_equal(tr.params[k], before[k])
    assert not np.array_equal(tr.params["v_W2"], before["v_W2"])


def test_zero_iterations_produces_empty_record(tmp_path):
    rec = train(small(total_iterations=0), tmp_path / "run")
    assert rec.iterations == 0 and rec.total_env_steps == 0
    assert (tmp_path / "run" / "DONE").exists()
    assert read_jsonl(tmp_path / "run" / "run.jsonl") == []


def test_training_is_deterministic(tmp_path):
    cfg = small(env="point-mass", total_iterations=2)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert a.series == b.series
    assert (tmp_path / "a" / "run.jsonl").read_bytes() == (tmp_path / "b" / "run.jsonl").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_seeds_differ():
    a = Trainer(small(seed=1))
    b = Trainer(small(seed=2))
    assert params_digest(a.params) != params_digest(b.params)


def test_run_jsonl_schema(tmp_path):
    cfg = small(env="sparse-chain", env_params={"length": 8})
    train(cfg, tmp_path)
    recs = read_jsonl(tmp_path / "run.jsonl")
    assert len(recs) == 2
    for i, r in enumerate(recs):
        assert r["schema"] == 1 and r["config_hash"] == cfg.config_hash() and r["iteration"] == i
        assert set(r["clip"]) >= {"h_t", "delta_r_t", "phi_h", "psi_dr", "epsilon_raw", "epsilon_t"}
    assert json.loads((tmp_path / "config.json").read_text())["config_hash"] == cfg.config_hash()


def test_bounds_hold_across_iterations():
    tr = Trainer(small(total_iterations=5))
    for _ in range(5):
        tr.train_iteration()
    for s in tr.signals_log:
        assert 0.14 <= s.epsilon_raw <= 0.30 and 0.05 <= s.epsilon_t <= 0.4


def test_non_finite_aborts_with_diagnostic(tmp_path):
    cfg = small()
    tr = Trainer(cfg)
    tr.params["v_W2"][:] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train(cfg, tmp_path, trainer=tr)
    assert info.value.diagnostic["iteration"] == 0
    assert (tmp_path / "abort.json").exists()
    assert not (tmp_path / "DONE").exists()


@pytest.mark.parametrize("kwargs,key", [
    ({"env": "lunar"}, "env"),
    ({"rollout_steps": 0}, "rollout_steps"),
    ({"gamma": 1.5}, "gamma"),
    ({"learning_rate": -1.0}, "learning_rate"),
    ({"clip": {"tau": 0.0}}, "tau"),
    ({"clip": {"bogus": 1}}, "bogus"),
    ({"env_params": {"size": 3}}, "env_params"),
])
def test_config_errors(kwargs, key):
    with pytest.raises(ConfigError) as info:
        small(**kwargs)
    assert info.value.key == key


def test_config_hash_tracks_changes():
    assert small().config_hash() == small().config_hash()
    assert small().config_hash() != small(seed=1).config_hash()


def test_convergence_uses_full_window():
    tr = Trainer(small(env="cartpole", success_threshold=0.0, convergence_window=5, total_iterations=1))
    tr.train_iteration()
    rec = tr.record
    assert rec.convergence_step == rec.episode_end_steps[4]
    assert rec.first_success_step == rec.episode_end_steps[0]
