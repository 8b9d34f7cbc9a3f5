"""Ablation matrix: the full model and each switched variant over shared seeds."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ALIASES, DEFAULTS, ConfigError, RunConfig, parse_assignments
from .data import Dataset, read_dataset
from .train import train

log = logging.getLogger(__name__)

FLAG_SWITCHES = ("disable_moq", "disable_ftre", "disable_dcq")
METRICS = ("acc2", "f1", "acc7", "mse")


def parse_switch(text: str) -> Tuple[str, Dict[str, str]]:
    """``"disable_dcq"`` or ``"beta_mi=0"`` or ``"disable_dcq+beta_mi=0"`` -> (name, assignments).

    A bare flag name means ``flag=true``. Setting one key twice with different
    values inside a switch is a conflict.
    """
    name = text.strip()
    if not name:
        raise ConfigError("empty ablation switch")
    out: Dict[str, str] = {}
    for part in name.split("+"):
        part = part.strip()
        k, v = (part.split("=", 1) if "=" in part else (part, "true"))
        k, v = ALIASES.get(k.strip(), k.strip()), v.strip()
        if k not in DEFAULTS:
            raise ConfigError(f"unknown ablation switch key {k!r} in {name!r}")
        if k in out and out[k] != v:
            raise ConfigError(f"conflicting switch {name!r}: {k} set to both {out[k]!r} and {v!r}")
        out[k] = v
    if out.get("disable_ftre", "false").lower() in ("1", "true", "yes", "on"):
        beta = out.get("loss.beta_mi")
        if beta is not None and float(beta) != 0.0:
            raise ConfigError(f"conflicting switch {name!r}: disable_ftre leaves no MI terms to weight")
    return name, out


def parse_switches(items: Sequence[str]) -> List[Tuple[str, Dict[str, str]]]:
    """Comma-separated switch list (or a list of strings); duplicates are rejected."""
    names: List[str] = []
    for item in items:
        names.extend(s for s in item.split(",") if s.strip())
    parsed = [parse_switch(s) for s in names]
    seen = set()
    for name, _ in parsed:
        if name in seen:
            raise ConfigError(f"switch {name!r} listed twice")
        if name == "full":
            raise ConfigError("'full' is the reference variant and is always run")
        seen.add(name)
    return parsed


def parse_seeds(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    return [int(s) for s in str(text).split(",") if s.strip()]


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name)


def _cached(run_dir: Path, cfg: RunConfig) -> Optional[dict]:
    summary, config = run_dir / "summary.json", run_dir / "config.json"
    if summary.exists() and config.exists() and json.loads(config.read_text()) == json.loads(
            json.dumps(cfg.to_dict(), sort_keys=True)):
        return json.loads(summary.read_text())
    return None


def run_variant(cfg: RunConfig, run_dir: Path, dataset: Optional[Dataset] = None) -> dict:
    cached = _cached(run_dir, cfg)
    if cached is not None:
        log.info("reusing finished run %s", run_dir)
        return cached
    if run_dir.exists():
        # stale or partial run: start over rather than appending to its logs
        for name in ("losses.csv", "metrics.jsonl", "summary.json"):
            (run_dir / name).unlink(missing_ok=True)
    train(cfg, run_dir, dataset=dataset)
    return json.loads((run_dir / "summary.json").read_text())


def ablate(base: RunConfig, switches: Sequence[Tuple[str, Dict[str, str]]], out_dir, seeds: Sequence[int],
           dataset: Optional[Dataset] = None, plot: bool = True) -> List[dict]:
    """Run ``full`` plus every switch for each seed; write ``metrics.jsonl`` and ``ablation.csv``.

    Per-run rows carry the test metrics and the run diagnostics; one summary row
    per variant carries per-seed values, medians and median deltas vs ``full``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else read_dataset(base["data.path"])
    variants = [("full", {})] + list(switches)
    configs = {name: base.copy(**assign) for name, assign in variants}
    results: Dict[str, List[dict]] = {name: [] for name, _ in variants}
    metrics_path = out / "metrics.jsonl"
    for seed in seeds:
        for name, assign in variants:
            cfg = configs[name].copy(seed=seed)
            summary = run_variant(cfg, out / _slug(name) / f"seed_{seed}", dataset)
            row = {"kind": "run", "variant": name, "seed": seed, "switch": assign, "split": "test",
                   **summary["test"], "diagnostics": summary["diagnostics"], "similarity": summary["similarity"]}
            results[name].append(row)
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    table = []
    ref = {m: statistics.median(r[m] for r in results["full"]) for m in METRICS}
    for name, _ in variants:
        rows = results[name]
        entry = {"kind": "summary", "variant": name, "seeds": list(seeds)}
        for m in METRICS:
            vals = [r[m] for r in rows]
            entry[f"seed_{m}"] = vals
            entry[f"median_{m}"] = statistics.median(vals)
            entry[f"delta_{m}"] = entry[f"median_{m}"] - ref[m]
        table.append(entry)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"{p}_{m}" for m in METRICS for p in ("median", "delta")])
        for e in table:
            w.writerow([e["variant"]] + [repr(e[f"{p}_{m}"]) for m in METRICS for p in ("median", "delta")])
    if plot:
        from .plotting import plot_ablation
        plot_ablation(table, out / "ablation.png")
    return table
