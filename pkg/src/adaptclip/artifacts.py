"""On-disk run artifacts.

Layout of one run directory (``<root>/<env>/<variant>/<seed>/``)::

    config.json     resolved TrainConfig plus its hash
    run.jsonl       one JSON object per iteration (schema below), deterministic
    timing.jsonl    wall-clock per iteration (kept apart so run.jsonl replays byte-identically)
    summary.csv     one row, columns SUMMARY_CSV_COLUMNS
    checkpoint.npz  final parameters (plus checkpoint_<iter>.npz at the configured cadence)
    DONE            config hash, written last; marks the run complete
    abort.json      only after a non-finite abort

run.jsonl records carry ``schema`` (RUN_SCHEMA_VERSION), ``config_hash``, the
trainer metrics and a ``clip`` object with the clipping signals.
"""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

from .policy import save_checkpoint

RUN_SCHEMA_VERSION = 1
SUMMARY_CSV_COLUMNS = (
    "seed", "variant", "env", "final_return", "return_variance", "convergence_step",
    "convergence_iteration", "first_success_step", "total_env_steps", "config_hash",
)


class MissingArtifact(FileNotFoundError):
    pass


class CorruptArtifact(ValueError):
    pass


def out_root(default="out") -> Path:
    return Path(os.environ.get("ADAPTCLIP_OUT", default))


def run_dir(root, env: str, variant: str, seed: int) -> Path:
    return Path(root) / env / variant / str(seed)


def is_complete(path, config_hash: str) -> bool:
    done = Path(path) / "DONE"
    return done.exists() and done.read_text().strip() == config_hash


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary_csv(path, rows, columns=SUMMARY_CSV_COLUMNS) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_summary_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    out = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif k in ("seed", "convergence_step", "convergence_iteration", "first_success_step",
                           "total_env_steps"):
                    parsed[k] = int(v)
                elif k in ("final_return", "return_variance"):
                    parsed[k] = float(v)
                else:
                    parsed[k] = v
            out.append(parsed)
    return out


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorruptArtifact(f"{path}:{lineno}: corrupt record ({exc.msg})") from None
    return records


class RunWriter:
    def __init__(self, path, config):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.hash = config.config_hash()
        for stale in ("DONE", "abort.json"):
            (self.path / stale).unlink(missing_ok=True)
        (self.path / "config.json").write_text(
            json.dumps({"config_hash": self.hash, "config": config.to_dict()}, indent=2, sort_keys=True) + "\n")
        self._run = (self.path / "run.jsonl").open("w")
        self._timing = (self.path / "timing.jsonl").open("w")

    def iteration(self, row: dict, clip: dict, trainer) -> None:
        rec = {"schema": RUN_SCHEMA_VERSION, "config_hash": self.hash, **row, "clip": clip}
        self._run.write(json.dumps(rec) + "\n")
        self._run.flush()
        t = trainer.record.timing
        self._timing.write(json.dumps({
            "iteration": row["iteration"], "epsilon_ns": t["epsilon_ns"][-1],
            "update_ns": t["update_ns"][-1], "iteration_ns": t["iteration_ns"][-1],
        }) + "\n")
        self._timing.flush()
        every = self.config.checkpoint_every
        if every and (row["iteration"] + 1) % every == 0:
            save_checkpoint(self.path / f"checkpoint_{row['iteration']:05d}.npz", trainer.params, self.hash)

    def finish(self, trainer) -> None:
        save_checkpoint(self.path / "checkpoint.npz", trainer.params, self.hash)
        write_summary_csv(self.path / "summary.csv", [trainer.record.summary_row()])
        self.close()
        (self.path / "DONE").write_text(self.hash + "\n")

    def abort(self, diagnostic: dict) -> None:
        (self.path / "abort.json").write_text(json.dumps(diagnostic, indent=2, sort_keys=True) + "\n")

    def close(self) -> None:
        for fh in (self._run, self._timing):
            if not fh.closed:
                fh.close()
