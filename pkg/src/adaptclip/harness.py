"""Experiment orchestration: resumable multi-run plans and the comparison,
ablation, overhead and report analyses built on their artifacts.

Every analysis reads what the runs wrote to disk, so it can be re-run (or
resumed after an interruption) without retraining completed runs.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from .artifacts import CorruptArtifact, MissingArtifact, read_jsonl, read_summary_csv, run_dir, write_summary_csv
from .clipping import VARIANTS, ConfigError, guaranteed_band
from .config import ENV_ACCEPTS, ENV_PARAM_KEYS, ConfigFile, parse_list, parse_seeds
from .envs import ENV_IDS
from .stats import (
    SUMMARY_COLUMNS, aggregate_runs, format_table, paired_by_seed, wilcoxon_signed_rank,
)
from .svg import line_plot
from .trainer import TrainConfig, TrainingAborted, train

ABLATION_VARIANTS = ("ppo_br", "entropy_only", "reward_only", "fixed")
PHASE_FRACTION = 0.3


@dataclass(frozen=True)
class RunSpec:
    env: str
    variant: str
    seed: int
    config: TrainConfig


@dataclass
class RunOutcome:
    spec: RunSpec
    path: Path
    status: str  # "trained", "skipped", "aborted"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("trained", "skipped")


@dataclass
class ExperimentPlan:
    runs: list
    out_dir: Path
    jobs: int = 1

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        seen = set()
        for r in self.runs:
            key = (r.env, r.variant, r.seed)
            if key in seen:
                raise ConfigError("plan", f"duplicate run {key}")
            seen.add(key)
        if self.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")

    @classmethod
    def build(cls, cfg: ConfigFile | None = None, envs=None, variants=None, seeds=None,
              overrides: dict | None = None, out_dir=None, jobs=None) -> "ExperimentPlan":
        """Cross product of envs x variants x seeds; flags beat the [plan] section."""
        cfg = cfg or ConfigFile()
        plan = cfg.plan
        envs = parse_list(envs if envs is not None else plan.get("envs", "cartpole"))
        variants = parse_list(variants if variants is not None else plan.get("variants", "fixed,ppo_br"))
        seeds = parse_seeds(seeds if seeds is not None else plan.get("seeds", "0-4"))
        for e in envs:
            if e not in ENV_IDS:
                raise ConfigError("envs", f"unknown env {e!r}; valid ids: {', '.join(ENV_IDS)}")
        for v in variants:
            if v not in VARIANTS:
                raise ConfigError("variants", f"unknown variant {v!r}; valid variants: {', '.join(VARIANTS)}")
        if out_dir is None:
            out_dir = plan.get("out") or artifacts.out_root()
        if jobs is None:
            try:
                jobs = int(plan.get("jobs", 1))
            except ValueError:
                raise ConfigError("jobs", "must be an integer") from None
        for k in overrides or {}:
            if k in ENV_PARAM_KEYS and not any(k in ENV_ACCEPTS[e] for e in envs):
                raise ConfigError(k, f"no planned env takes this parameter ({', '.join(envs)})")
        runs = [RunSpec(e, v, s, cfg.resolve(e, v, s, overrides, strict_env=False))
                for e in envs for v in variants for s in seeds]
        return cls(runs, out_dir, jobs)

    def subset(self, variants) -> "ExperimentPlan":
        return ExperimentPlan([r for r in self.runs if r.variant in variants], self.out_dir, self.jobs)

    @property
    def envs(self) -> list[str]:
        return list(dict.fromkeys(r.env for r in self.runs))

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.runs))

    def path(self, spec: RunSpec) -> Path:
        return run_dir(self.out_dir, spec.env, spec.variant, spec.seed)


def run_one(spec: RunSpec, path, force: bool = False) -> RunOutcome:
    path = Path(path)
    if not force and artifacts.is_complete(path, spec.config.config_hash()):
        return RunOutcome(spec, path, "skipped")
    try:
        train(spec.config, path)
    except TrainingAborted as exc:
        return RunOutcome(spec, path, "aborted", str(exc))
    return RunOutcome(spec, path, "trained")


def _run_star(args):
    return run_one(*args)


def run_plan(plan: ExperimentPlan, force: bool = False, log=None) -> list[RunOutcome]:
    """Execute every run not already complete under the same config hash."""
    jobs = [(spec, plan.path(spec), force) for spec in plan.runs]
    if plan.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            outcomes = list(pool.map(_run_star, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(run_one(*job))
            if log:
                o = outcomes[-1]
                log(f"{o.status:8s} {o.spec.env}/{o.spec.variant}/{o.spec.seed}"
                    + (f": {o.message}" if o.message else ""))
    return outcomes


def load_summary(path) -> dict:
    return read_summary_csv(Path(path) / "summary.csv")[0]


def _summaries(plan: ExperimentPlan, outcomes) -> tuple[list[dict], list[RunSpec]]:
    rows, missing = [], []
    for o in outcomes:
        if o.ok:
            rows.append(load_summary(o.path))
        else:
            missing.append(o.spec)
    return rows, missing


def _censored(rows, metric="convergence_step"):
    """Metric values with non-converged runs set to inf."""
    return [math.inf if r.get(metric) is None else float(r[metric]) for r in rows]


def _budget(rows) -> float:
    return float(max((r.get("total_env_steps") or 0) for r in rows) + 1) if rows else 1.0


# --------------------------------------------------------------------------- compare

COMPARE_COLUMNS = SUMMARY_COLUMNS + ("convergence_step_median", "missing_runs")
WILCOXON_COLUMNS = ("env", "variant", "baseline", "metric", "mode", "n_pairs", "n_nonzero",
                    "statistic", "p_value", "min_attainable_p")


def wilcoxon_rows(rows, baseline="fixed") -> list[dict]:
    """Each variant against the baseline, per env (seed-paired) and pooled over envs.

    Non-converged runs enter the convergence comparison censored at the
    largest step budget + 1, so they rank as slower than any converged run.
    """
    out = []
    envs = list(dict.fromkeys(r["env"] for r in rows))
    variants = [v for v in dict.fromkeys(r["variant"] for r in rows) if v != baseline]
    budget = _budget(rows)
    for metric in ("final_return", "convergence_step"):
        missing = budget if metric == "convergence_step" else None
        for v in variants:
            pooled = []
            for env in envs:
                a = [r for r in rows if r["env"] == env and r["variant"] == v]
                b = [r for r in rows if r["env"] == env and r["variant"] == baseline]
                if not a or not b:
                    continue
                pairs = paired_by_seed(a, b, metric, missing)
                pooled += pairs
                out.append(_wilcoxon_row(env, v, baseline, metric, "seed-paired", pairs))
            if len(envs) > 1 and pooled:
                out.append(_wilcoxon_row("*", v, baseline, metric, "pooled", pooled))
    return out


def _wilcoxon_row(env, variant, baseline, metric, mode, pairs):
    res = wilcoxon_signed_rank(pairs) if pairs else None
    return {
        "env": env, "variant": variant, "baseline": baseline, "metric": metric, "mode": mode,
        "n_pairs": len(pairs), "n_nonzero": res.n if res else 0,
        "statistic": res.statistic if res else None, "p_value": res.p_value if res else None,
        "min_attainable_p": res.min_attainable_p if res else None,
    }


def compare(plan: ExperimentPlan, outcomes, baseline: str = "fixed", name: str = "compare") -> dict:
    """Write ``<out>/<name>/summary.csv``, ``wilcoxon.csv`` and ``summary.txt``."""
    rows, missing = _summaries(plan, outcomes)
    table = aggregate_runs(rows, baseline)
    for t in table:
        conv = _censored([r for r in rows if r["env"] == t["env"] and r["variant"] == t["variant"]])
        t["convergence_step_median"] = float(np.median(conv)) if conv else None
        t["missing_runs"] = sum(1 for m in missing if (m.env, m.variant) == (t["env"], t["variant"]))
    # Cells for (env, variant) pairs whose runs all failed.
    present = {(t["env"], t["variant"]) for t in table}
    for m in missing:
        if (m.env, m.variant) not in present:
            present.add((m.env, m.variant))
            table.append({"env": m.env, "variant": m.variant, "n_runs": 0,
                          "missing_runs": sum(1 for x in missing if (x.env, x.variant) == (m.env, m.variant))})
    tests = wilcoxon_rows(rows, baseline)
    out = plan.out_dir / name
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "summary.csv", table, COMPARE_COLUMNS)
    write_summary_csv(out / "wilcoxon.csv", tests, WILCOXON_COLUMNS)
    text = [format_table(table, COMPARE_COLUMNS), "",
            "Wilcoxon signed-rank vs " + baseline + " (exact, two-sided)",
            format_table(tests, WILCOXON_COLUMNS[1:] if len(plan.envs) == 1 else WILCOXON_COLUMNS)]
    if missing:
        text += ["", "missing runs: " + ", ".join(f"{m.env}/{m.variant}/{m.seed}" for m in missing)]
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    return {"table": table, "wilcoxon": tests, "missing": missing, "dir": out}


# --------------------------------------------------------------------------- ablate

ABLATION_COLUMNS = ("env", "variant", "n_runs", "early_return", "late_return",
                    "early_gain_vs_fixed", "late_gain_vs_fixed", "late_variance")


def _phase_means(records) -> tuple[float | None, float | None]:
    returns = [r["mean_return"] for r in records]
    n = len(returns)
    if n == 0:
        return None, None
    k = max(1, math.ceil(PHASE_FRACTION * n))

    def avg(xs):
        xs = [x for x in xs if x is not None]
        return float(np.mean(xs)) if xs else None

    return avg(returns[:k]), avg(returns[-k:])


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def ablate(plan: ExperimentPlan, outcomes) -> dict:
    """Early (first 30% of iterations) vs late (last 30%) mean return per variant,
    plus the reported, never asserted, comparisons against the fixed baseline."""
    rows, missing = _summaries(plan, outcomes)
    phases = {}
    for o in outcomes:
        if o.ok:
            phases[(o.spec.env, o.spec.variant, o.spec.seed)] = _phase_means(read_jsonl(o.path / "run.jsonl"))
    table, findings = [], []
    for env in plan.envs:
        per_variant = {}
        for v in plan.variants:
            keys = [k for k in phases if k[0] == env and k[1] == v]
            per_variant[v] = {
                "early": _mean(phases[k][0] for k in keys),
                "late": _mean(phases[k][1] for k in keys),
                "variance": _mean(r["return_variance"] for r in rows if r["env"] == env and r["variant"] == v),
                "n": len(keys),
            }
        base = per_variant.get("fixed", {})
        for v, s in per_variant.items():
            table.append({
                "env": env, "variant": v, "n_runs": s["n"],
                "early_return": s["early"], "late_return": s["late"],
                "early_gain_vs_fixed": _diff(s["early"], base.get("early")),
                "late_gain_vs_fixed": _diff(s["late"], base.get("late")),
                "late_variance": s["variance"],
            })
        findings.append(_ablation_findings(env, rows, per_variant))
    out = plan.out_dir / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "ablation.csv", table, ABLATION_COLUMNS)
    (out / "findings.json").write_text(json.dumps(findings, indent=2, sort_keys=True) + "\n")
    lines = [format_table(table, ABLATION_COLUMNS), ""]
    for f in findings:
        lines.append(f"[{f['env']}]")
        lines += [f"  {k} = {f[k]}" for k in sorted(f) if k != "env"]
    if missing:
        lines += ["", "missing runs: " + ", ".join(f"{m.env}/{m.variant}/{m.seed}" for m in missing)]
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    return {"table": table, "findings": findings, "missing": missing, "dir": out}


def _diff(a, b):
    return None if a is None or b is None else a - b


def _ablation_findings(env, rows, per_variant) -> dict:
    def by_seed(v):
        return {r["seed"]: r for r in rows if r["env"] == env and r["variant"] == v}

    ent, fixed, rew = by_seed("entropy_only"), by_seed("fixed"), by_seed("reward_only")
    earlier = 0
    compared = 0
    for seed in sorted(set(ent) & set(fixed)):
        a = ent[seed].get("first_success_step")
        b = fixed[seed].get("first_success_step")
        compared += 1
        a = math.inf if a is None else a
        b = math.inf if b is None else b
        earlier += a < b
    f = {"env": env, "entropy_only_first_success_earlier_seeds": f"{earlier}/{compared}",
         "entropy_only_first_success_earlier_majority": bool(compared and earlier >= 3 * compared / 5)}
    rv = per_variant.get("reward_only", {}).get("variance")
    fv = per_variant.get("fixed", {}).get("variance")
    f["reward_only_variance_le_fixed"] = None if rv is None or fv is None else bool(rv <= fv)
    # Share of the early-phase gain that the entropy term alone recovers.
    ge = _diff(per_variant.get("entropy_only", {}).get("early"), per_variant.get("fixed", {}).get("early"))
    gb = _diff(per_variant.get("ppo_br", {}).get("early"), per_variant.get("fixed", {}).get("early"))
    f["entropy_share_of_early_gain"] = None if ge is None or not gb else round(ge / gb, 4)
    f["reward_only_seeds"] = len(rew)
    return f


# --------------------------------------------------------------------------- overhead

def _percentile(xs, q):
    return float(np.percentile(np.asarray(xs, dtype=np.float64), q)) if len(xs) else None


def overhead(plan: ExperimentPlan, outcomes) -> dict:
    """Share of the update phase spent deriving eps_t, from timing.jsonl.

    ``ratio`` is per iteration: epsilon path / update phase. ``end_to_end`` is
    total ppo_br wall-clock over total fixed wall-clock, per seed.
    """
    timings = {}
    for o in outcomes:
        if o.ok:
            timings[(o.spec.variant, o.spec.seed)] = read_jsonl(o.path / "timing.jsonl")
    report: dict = {"env": plan.envs[0] if plan.envs else None, "variants": {}}
    for v in plan.variants:
        ratios, eps_ns = [], []
        for (var, _seed), recs in sorted(timings.items()):
            if var != v:
                continue
            for rec in recs:
                if rec["update_ns"] > 0:
                    ratios.append(rec["epsilon_ns"] / rec["update_ns"])
                eps_ns.append(rec["epsilon_ns"])
        report["variants"][v] = {
            "iterations": len(ratios),
            "ratio_p50": _percentile(ratios, 50), "ratio_p95": _percentile(ratios, 95),
            "ratio_mean": float(np.mean(ratios)) if ratios else None,
            "epsilon_us_p50": _percentile(eps_ns, 50) / 1e3 if eps_ns else None,
        }
    e2e = []
    for (var, seed), recs in sorted(timings.items()):
        if var == "ppo_br" and ("fixed", seed) in timings:
            a = sum(r["iteration_ns"] for r in recs)
            b = sum(r["iteration_ns"] for r in timings[("fixed", seed)])
            if b > 0:
                e2e.append(a / b)
    report["end_to_end_ratio_per_seed"] = e2e
    report["end_to_end_ratio_median"] = float(np.median(e2e)) if e2e else None
    out = plan.out_dir / "overhead"
    out.mkdir(parents=True, exist_ok=True)
    (out / "overhead.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [f"env: {report['env']}"]
    for v, s in report["variants"].items():
        if s["ratio_p50"] is None:
            continue
        lines.append(f"{v:14s} eps/update p50={s['ratio_p50']:.4%} p95={s['ratio_p95']:.4%} "
                     f"(eps path p50 {s['epsilon_us_p50']:.1f} us over {s['iterations']} iterations)")
    if report["end_to_end_ratio_median"] is not None:
        lines.append(f"end-to-end wall-clock ppo_br/fixed (median over seeds): "
                     f"{report['end_to_end_ratio_median']:.3f}")
    (out / "overhead.txt").write_text("\n".join(lines) + "\n")
    report["dir"] = out
    report["text"] = "\n".join(lines)
    return report


# --------------------------------------------------------------------------- report

def find_runs(root) -> list[Path]:
    """Run directories (those holding a config.json) under ``root``, sorted."""
    root = Path(root)
    if not root.exists():
        raise MissingArtifact(str(root))
    if (root / "config.json").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("config.json") if "report" not in p.parts)


def _load_run(path: Path) -> tuple[dict, list[dict]]:
    cfg_path = path / "config.json"
    try:
        cfg = TrainConfig(**json.loads(cfg_path.read_text())["config"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifact(f"{cfg_path}: corrupt config ({exc})") from None
    return cfg, read_jsonl(path / "run.jsonl")


def _average_curves(curves: list[list]) -> list:
    n = max(len(c) for c in curves)
    out = []
    for i in range(n):
        vals = [c[i] for c in curves if i < len(c) and c[i] is not None]
        if not vals:
            out.append(None)
        else:
            # Identical values (e.g. a static threshold) stay exact.
            out.append(vals[0] if min(vals) == max(vals) else float(np.mean(vals)))
    return out


def report(root, out=None) -> list[Path]:
    """Learning-curve and eps_t CSV + SVG per env, averaged over seeds per variant."""
    runs = find_runs(root)
    if not runs:
        raise MissingArtifact(f"no runs under {root}")
    out = Path(out) if out is not None else Path(root) / "report"
    groups: dict = {}
    bands: dict = {}
    for path in runs:
        tc, records = _load_run(path)
        key = (tc.env, tc.variant)
        g = groups.setdefault(key, {"ret": [], "eps": []})
        g["ret"].append([r["mean_return"] for r in records])
        g["eps"].append([r["epsilon_t"] for r in records])
        if tc.variant == "ppo_br":
            bands.setdefault(tc.env, guaranteed_band(tc.resolved_clip(tc.env_spec())))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for env in dict.fromkeys(k[0] for k in groups):
        variants = [v for v in VARIANTS if (env, v) in groups]
        for kind, ylabel, title in (("ret", "mean episodic return", "learning curve"),
                                    ("eps", "clipping threshold", "clipping threshold evolution")):
            curves = {v: _average_curves([c for c in groups[(env, v)][kind] if c]) if any(
                groups[(env, v)][kind]) else [] for v in variants}
            if kind == "eps":
                curves = {v: c for v, c in curves.items() if v != "kl_penalty"}
            n = max((len(c) for c in curves.values()), default=0)
            stem = ("learning_curve_" if kind == "ret" else "epsilon_") + env
            header = ["iteration", *curves]
            lines = [",".join(header)]
            for i in range(n):
                cells = [str(i)]
                for c in curves.values():
                    cells.append("" if i >= len(c) or c[i] is None else repr(c[i]))
                lines.append(",".join(cells))
            (out / f"{stem}.csv").write_text("\n".join(lines) + "\n")
            hl = []
            if kind == "eps" and env in bands:
                lo, hi = bands[env]
                hl = [(lo, f"band {lo:.2f}"), (hi, f"band {hi:.2f}")]
            svg = line_plot({v: (list(range(len(c))), c) for v, c in curves.items()},
                            f"{env}: {title}", "iteration", ylabel, hl)
            (out / f"{stem}.svg").write_text(svg)
            written += [out / f"{stem}.csv", out / f"{stem}.svg"]
    return written
