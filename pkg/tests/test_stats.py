import itertools

import numpy as np
import pytest
from scipy import stats as sps
from scipy.stats import rankdata

from adaptclip.stats import (
    aggregate_runs, format_table, improvement_pct, min_attainable_p, paired_by_seed,
    reduction_pct, reward_variance, wilcoxon_signed_rank,
)


def enumeration_oracle(a, b):
    """Two-sided exact p by listing every one of the 2^n sign assignments."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    centre = ranks.sum() / 2
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(w - centre) >= abs(w_obs - centre) - 1e-9:
            hits += 1
    return w_obs, min(1.0, hits / 2**n)


def random_case(rng):
    n = int(rng.integers(1, 11))
    a = rng.normal(size=n)
    b = a + rng.normal(0.3, 1.0, n)
    if rng.random() < 0.3:
        # Integer-valued data forces ties and exact zeros.
        a, b = np.round(a * 2), np.round(b * 2)
    return a, b


@pytest.mark.parametrize("block", range(10))
def test_matches_enumeration_oracle(block):
    rng = np.random.default_rng(block)
    for _ in range(100):
        a, b = random_case(rng)
        w, p = wilcoxon_signed_rank(list(zip(a, b)))
        w_o, p_o = enumeration_oracle(a, b)
        assert w == pytest.approx(w_o, abs=1e-9)
        assert p == pytest.approx(p_o, abs=1e-9)


def test_matches_scipy_exact_without_ties():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 15))
        a, b = rng.normal(size=n), rng.normal(size=n)
        res = wilcoxon_signed_rank(list(zip(a, b)))
        ref = sps.wilcoxon(a, b, method="exact", alternative="two-sided")
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_reference_case():
    pairs = [(2, 1), (3, 1), (4, 1), (5, 1), (6, 1)]
    res = wilcoxon_signed_rank(pairs)
    assert res.statistic == 15 and res.p_value == pytest.approx(0.0625, abs=1e-12)
    assert res.n == 5 and res.min_attainable_p == 0.0625


def test_symmetric_in_argument_order():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=8), rng.normal(size=8)
    _, p1 = wilcoxon_signed_rank(list(zip(a, b)))
    _, p2 = wilcoxon_signed_rank(list(zip(b, a)))
    assert p1 == p2


def test_all_zero_differences():
    res = wilcoxon_signed_rank([(1.0, 1.0)] * 4)
    assert res.p_value == 1.0 and res.n == 0


def test_bad_input_shape():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3])


def test_min_attainable_p():
    assert min_attainable_p(5) == 0.0625
    assert min_attainable_p(1) == 1.0
    assert min_attainable_p(10) == pytest.approx(2 / 1024)


def test_reward_variance():
    assert reward_variance([1, 2, 3, 4]) == pytest.approx(5 / 3)
    assert reward_variance([7.0]) is None
    assert reward_variance([5.0] * 10) == 0.0
    assert reward_variance(list(range(200)), 100) == pytest.approx(np.var(np.arange(100, 200), ddof=1))


def test_percentages():
    assert improvement_pct(195.0, 200.0) == 2.56
    assert reduction_pct(100.0, 50.0) == 50.0
    assert improvement_pct(-20.0, -10.0) == 50.0
    assert improvement_pct(0.0, 1.0) is None
    assert reduction_pct(None, 1.0) is None


def _run(env, variant, seed, ret, var, conv):
    return {"env": env, "variant": variant, "seed": seed, "final_return": ret,
            "return_variance": var, "convergence_step": conv, "convergence_iteration": None}


def test_aggregate_runs():
    runs = [_run("cartpole", "fixed", s, 195.0, 100.0, 1000) for s in range(2)]
    runs += [_run("cartpole", "ppo_br", 0, 190.0, 40.0, None), _run("cartpole", "ppo_br", 1, 210.0, 60.0, 500)]
    rows = aggregate_runs(runs)
    assert [r["variant"] for r in rows] == ["fixed", "ppo_br"]
    fixed, br = rows
    assert fixed["return_std"] == 0.0 and fixed["improvement_pct"] == 0.0
    assert br["return_mean"] == 200.0 and br["improvement_pct"] == 2.56
    assert br["variance_reduction_pct"] == 50.0
    assert br["converged_runs"] == 1 and br["convergence_step_mean"] == 500.0
    assert br["return_std"] == pytest.approx(np.std([190, 210], ddof=1))
    text = format_table(rows)
    assert "ppo_br" in text and "2.56" in text


def test_aggregate_without_baseline():
    rows = aggregate_runs([_run("cartpole", "ppo_br", 0, 1.0, None, None)])
    assert rows[0]["improvement_pct"] is None and rows[0]["return_std"] == 0.0


def test_paired_by_seed():
    a = [_run("e", "x", s, float(s), None, None if s == 2 else s) for s in range(4)]
    b = [_run("e", "y", s, 10.0 + s, None, 100) for s in (3, 1, 2)]
    assert paired_by_seed(a, b, "final_return") == [(1.0, 11.0), (2.0, 12.0), (3.0, 13.0)]
    assert paired_by_seed(a, b, "convergence_step") == [(1.0, 100.0), (3.0, 100.0)]
    assert paired_by_seed(a, b, "convergence_step", missing_value=999) == [
        (1.0, 100.0), (999.0, 100.0), (3.0, 100.0)]
