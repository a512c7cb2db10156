"""Paired significance testing, reward variance and per-variant aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, sum of ranks of positive differences
    p_value: float  # exact two-sided
    n: int  # pairs left after dropping zero differences
    min_attainable_p: float

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def _differences(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (a, b) tuples")
    return arr[:, 0] - arr[:, 1]


def wilcoxon_signed_rank(pairs) -> WilcoxonResult:
    """Exact two-sided Wilcoxon signed-rank test on seed-paired (a, b) values.

    Zero differences are dropped, tied |differences| get average ranks. The
    null distribution of W+ over all 2^n sign assignments is built by
    convolving one rank at a time (ranks doubled so they are integers); the
    p-value is the null mass at least as far from n(n+1)/4 as the observed W+.
    """
    d = _differences(pairs)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, 1.0)
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    w2 = int(ranks2[d > 0].sum())
    total2 = int(ranks2.sum())
    counts = np.zeros(total2 + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total2 + 1 - r]
        counts = counts + shifted
    support = np.arange(total2 + 1)
    # |2*W2 - total2| compares distances from the mean without fractions.
    dist = np.abs(2 * support - total2)
    obs = abs(2 * w2 - total2)
    extreme = int(counts[dist >= obs].sum())
    p = min(1.0, extreme / 2**n)
    return WilcoxonResult(w2 / 2, p, n, min_attainable_p(n))


def min_attainable_p(n: int) -> float:
    """Smallest exact two-sided p with n non-zero, untied pairs: 2 / 2^n."""
    return 1.0 if n == 0 else min(1.0, 2.0 / 2**n)


def reward_variance(returns, window: int = 100) -> float | None:
    """Unbiased variance of the last ``window`` returns; None with < 2 samples."""
    tail = list(returns)[-window:] if window else list(returns)
    if len(tail) < 2:
        return None
    return float(np.var(np.asarray(tail, dtype=np.float64), ddof=1))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def improvement_pct(baseline: float | None, treatment: float | None) -> float | None:
    """(treatment - baseline) / |baseline| * 100, rounded to 2 decimals."""
    if baseline is None or treatment is None or baseline == 0:
        return None
    return round((treatment - baseline) / abs(baseline) * 100.0, 2)


def reduction_pct(baseline: float | None, treatment: float | None) -> float | None:
    """(baseline - treatment) / baseline * 100, rounded to 2 decimals."""
    if baseline is None or treatment is None or baseline == 0:
        return None
    return round((baseline - treatment) / baseline * 100.0, 2)


SUMMARY_COLUMNS = (
    "env", "variant", "n_runs", "return_mean", "return_std", "variance_mean",
    "convergence_step_mean", "converged_runs", "convergence_iteration_mean",
    "improvement_pct", "variance_reduction_pct",
)


def aggregate_runs(runs, baseline: str = "fixed") -> list[dict]:
    """One row per (env, variant) from per-run summary dicts.

    Each run needs ``env``, ``variant``, ``final_return``, ``return_variance``,
    ``convergence_step`` and ``convergence_iteration`` (None when missing).
    Improvement and variance reduction are relative to ``baseline`` in the same
    env and are None when that baseline has no runs.
    """
    groups: dict[tuple, list] = {}
    for run in runs:
        groups.setdefault((run["env"], run["variant"]), []).append(run)
    rows = []
    for (env, variant), members in sorted(groups.items(), key=lambda kv: (kv[0][0], _variant_order(kv[0][1]))):
        conv = [m["convergence_step"] for m in members if m.get("convergence_step") is not None]
        rows.append({
            "env": env, "variant": variant, "n_runs": len(members),
            "return_mean": _mean(m["final_return"] for m in members),
            "return_std": _std([m["final_return"] for m in members]),
            "variance_mean": _mean(m["return_variance"] for m in members),
            "convergence_step_mean": _mean(conv),
            "converged_runs": len(conv),
            "convergence_iteration_mean": _mean(m.get("convergence_iteration") for m in members),
        })
    by_key = {(r["env"], r["variant"]): r for r in rows}
    for r in rows:
        base = by_key.get((r["env"], baseline))
        r["improvement_pct"] = improvement_pct(base and base["return_mean"], r["return_mean"]) if base else None
        r["variance_reduction_pct"] = (reduction_pct(base["variance_mean"], r["variance_mean"])
                                       if base else None)
    return rows


def _variant_order(v):
    from .clipping import VARIANTS
    return (VARIANTS.index(v) if v in VARIANTS else len(VARIANTS), v)


def paired_by_seed(runs_a, runs_b, metric: str, missing_value: float | None = None) -> list[tuple]:
    """Align two run lists on seed; None metrics become ``missing_value`` or drop the pair."""
    b_by_seed = {r["seed"]: r for r in runs_b}
    pairs = []
    for ra in sorted(runs_a, key=lambda r: r["seed"]):
        rb = b_by_seed.get(ra["seed"])
        if rb is None:
            continue
        va, vb = ra.get(metric), rb.get(metric)
        va = missing_value if va is None else va
        vb = missing_value if vb is None else vb
        if va is None or vb is None:
            continue
        pairs.append((float(va), float(vb)))
    return pairs


def format_table(rows, columns=SUMMARY_COLUMNS) -> str:
    """Aligned plain-text table; missing cells print as '-'."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) >= 1e4 or (v != 0 and abs(v) < 1e-3) else f"{v:.2f}"
        return str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
