"""Command-line entry point: ``fine <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, load_config


def _floats(text: str) -> List[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _ints(text: str) -> List[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_generate_data(args) -> int:
    from .data import SyntheticSpec, generate, load_spec_file

    spec = load_spec_file(args.spec) if args.spec else SyntheticSpec()
    out = generate(spec, args.out)
    print(json.dumps({"dataset": str(out), "n_samples": spec.n_samples}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .train import read_losses, train

    if args.resume:
        import torch

        from .config import RunConfig, parse_assignments

        # continue with the checkpoint's own config; --set may still extend epochs
        cfg = RunConfig(torch.load(args.resume, weights_only=False)["config"])
        cfg.update(parse_assignments(args.set or ()))
    else:
        cfg = load_config(args.config, args.set or (), desk=args.desk)
    out_dir = Path(args.out or cfg["out_dir"])
    t0 = time.perf_counter()
    run = train(cfg, out_dir, resume_from=args.resume)
    rows = read_losses(run / "losses.csv")
    if not args.no_plot and rows:
        from .data import read_dataset

        n_train = len(read_dataset(cfg["data.path"]).splits["train"])
        plot_losses(rows, run / "losses.png", math.ceil(n_train / cfg["batch_size"]))
    summary = json.loads((run / "summary.json").read_text()) if (run / "summary.json").exists() else {}
    print(json.dumps({"run": str(run), "seconds": round(time.perf_counter() - t0, 2), **summary}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    record = {"split": args.split, **evaluate(args.ckpt, args.split)}
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import SUITES, run_suite, summarize

    modules = [args.module] if args.module else None
    if args.module and args.module not in SUITES:
        print(f"error: no gradcheck suite {args.module!r}; known: {', '.join(SUITES)}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    rows = summarize(run_suite(modules, seeds=args.seeds, tol=args.tol))
    w = csv.writer(sys.stdout)
    w.writerow(["module", "op", "seeds", "max_rel_err", "passed"])
    for r in rows:
        w.writerow([r["module"], r["op"], r["seeds"], f"{r['max_rel_err']:.3e}", r["passed"]])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            cw = csv.DictWriter(fh, fieldnames=["module", "op", "seeds", "max_rel_err", "passed"])
            cw.writeheader()
            cw.writerows(rows)
    ok = all(r["passed"] for r in rows)
    print(f"# {len(rows)} ops, {'all passed' if ok else 'FAILURES'}, {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0 if ok else 1


def cmd_mi_bench(args) -> int:
    from .bench import mi_bench
    from .plotting import plot_mi_bench

    cfg = load_config(args.config)
    pick = lambda flag, key: flag if flag is not None else cfg[f"mi_bench.{key}"]  # noqa: E731
    rows = [r.as_dict() for r in mi_bench(_floats(pick(args.rho, "rho")), _ints(pick(args.dims, "dims")),
                                          pick(args.steps, "steps"), pick(args.batch_size, "batch_size"),
                                          pick(args.lr, "lr"), seed=args.seed)]
    fields = ["rho", "dim", "true_mi", "infonce", "nce_club", "steps", "seconds"]
    w = csv.DictWriter(sys.stdout, fieldnames=fields)
    w.writeheader()
    w.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mi_bench.csv", "w", newline="") as fh:
            cw = csv.DictWriter(fh, fieldnames=fields)
            cw.writeheader()
            cw.writerows(rows)
        plot_mi_bench(rows, out / "mi_bench.png")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate, parse_seeds, parse_switches

    cfg = load_config(args.config, args.set or (), desk=args.desk)
    switches = parse_switches([args.switches])
    seeds = parse_seeds(args.seeds)
    out = Path(args.out or Path(cfg["out_dir"]) / "ablation")
    table = ablate(cfg, switches, out, seeds, plot=not args.no_plot)
    for row in table:
        print(json.dumps({k: row[k] for k in ("variant", "median_acc2", "delta_acc2", "median_mse", "delta_mse")},
                         sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fine", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic tri-modal dataset")
    g.add_argument("--spec", help="JSON file of synthetic spec fields (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    def run_opts(sp):
        sp.add_argument("--config", help="JSON file of config keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--desk", action="store_true", help="start from the CPU-sized desk overrides")
        sp.add_argument("--out", help="output directory (default: config out_dir)")
        sp.add_argument("--no-plot", action="store_true")

    t = sub.add_parser("train", help="train one model")
    run_opts(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--module")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", help="also write the table to this CSV file")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("mi-bench", help="MI estimators on correlated Gaussians")
    m.add_argument("--config", help="JSON config; its mi_bench.* keys fill any flag not given")
    m.add_argument("--rho", help="comma list (default 0.5,0.9)")
    m.add_argument("--dims", help="comma list (default 1,2)")
    m.add_argument("--steps", type=int)
    m.add_argument("--batch-size", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="directory for mi_bench.csv and mi_bench.png")
    m.set_defaults(func=cmd_mi_bench)

    a = sub.add_parser("ablate", help="full model vs switched variants over shared seeds")
    run_opts(a)
    a.add_argument("--switches", required=True, help="comma list, e.g. beta_mi=0,disable_dcq,disable_dcq+beta_mi=0")
    a.add_argument("--seeds", default="3585,7154,8757")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
