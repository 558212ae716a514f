"""``moec`` command line: train, sweep, check-grads, validate-oracles, stats.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
Every file is written under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .dispatch import OVERFLOW, dispatch
from .dropout import cluster_level_mask, global_level_mask
from .gradcheck import TOLERANCE, run_all
from .losses import ClusterConfig, balance_loss, clustering_loss, inter_cluster_constraint
from .model import save_checkpoint
from .numerics import ContractError, Tensor
from .simulator import (
    SWEEP_AXES,
    ConfigError,
    SyntheticTaskSpec,
    TrainConfig,
    make_model,
    generate_synthetic,
    preset,
    sweep,
    train,
)

log = logging.getLogger("moec")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
TOP_LEVEL_KEYS = ("preset", "task", "train", "sweep")
SWEEP_KEYS = ("axis", "values", "variants", "workers")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    return value


def _apply(section: str, obj, overrides: dict):
    if not isinstance(overrides, dict):
        raise ConfigError(section, "expected a table of key/value pairs")
    fields = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name != "centers"}
    changes = {}
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(f"{section}.{key}", "unknown key")
        changes[key] = _coerce(section, key, value, fields[key])
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.key}", str(exc).split(": ", 1)[1]) from None
    except (ContractError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def load_config(path, seed: int | None = None):
    """Parse a JSON config into ``(task spec, train config, sweep table)``.

    ``seed`` (the command-line override) replaces both the data and the
    training seed.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(key, f"unknown key (expected one of {', '.join(TOP_LEVEL_KEYS)})")
    if "preset" in raw:
        try:
            spec, cfg = preset(raw["preset"])
        except (KeyError, TypeError):
            raise ConfigError("preset", f"unknown preset {raw['preset']!r}") from None
    else:
        spec, cfg = SyntheticTaskSpec(), TrainConfig()
    spec = _apply("task", spec, raw.get("task", {}))
    cfg = _apply("train", cfg, raw.get("train", {}))
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
        cfg = cfg.replace(seed=seed)
    if spec.hidden_dim != cfg.hidden_dim:
        raise ConfigError("task.hidden_dim", f"{spec.hidden_dim} != train.hidden_dim {cfg.hidden_dim}")
    table = raw.get("sweep", {})
    if not isinstance(table, dict):
        raise ConfigError("sweep", "expected a table")
    for key in table:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep.{key}", "unknown key")
    return spec, cfg, table


# ----------------------------------------------------------------- writers

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_header(n: int, m: int) -> list[str]:
    return (
        ["step", "train_task", "val_task", "balance", "clustering", "total",
         "c_intra", "c_inter", "val_c_intra", "overflow_rate"]
        + [f"cluster_share_{c}" for c in range(m)]
        + [f"f_{i}" for i in range(n)]
    )


def write_metrics(path: Path, rows, n: int, m: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(n, m))
        for r in rows:
            w.writerow(
                [_fmt(r.step)]
                + [_fmt(v) for v in (r.train_task, r.val_task, r.balance, r.clustering,
                                     r.train_task + r.balance + r.clustering,
                                     r.c_intra, r.c_inter, r.val_c_intra, r.overflow_rate)]
                + [_fmt(v) for v in r.cluster_shares]
                + [_fmt(v) for v in r.fractions]
            )


FRACTIONS_HEADER = ["step", "expert", "cluster", "train_fraction", "val_fraction",
                    "within_share", "val_within_share"]


def write_fractions(path: Path, rows, clusters: ClusterConfig) -> None:
    ids = clusters.cluster_ids()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRACTIONS_HEADER)
        for r in rows:
            for i in range(clusters.num_experts):
                w.writerow([_fmt(r.step), i, int(ids[i]), _fmt(r.fractions[i]),
                            _fmt(r.val_fractions[i]), _fmt(r.within_shares[i]),
                            _fmt(r.val_within_shares[i])])


SWEEP_HEADER = ["axis", "value", "variant", "seed", "final_val", "best_val", "best_step",
                "final_c_intra", "overflow_rate"]


def write_sweep(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.axis, r.value, r.variant, r.seed, _fmt(r.final_val), _fmt(r.best_val),
                        r.best_step, _fmt(r.final_c_intra), _fmt(r.overflow_rate)])


# ---------------------------------------------------------------- commands

def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    spec, cfg, _ = load_config(args.config, args.seed)
    out = _outdir(args)
    data = generate_synthetic(spec)
    out_dim = spec.num_groups if spec.task == "classification" else spec.out_dim
    model = make_model(cfg, out_dim, spec.task)

    def progress(r):
        log.info("step %5d  train %.4f  val %.4f  C_intra %.3e  overflow %.3f",
                 r.step, r.train_task, r.val_task, r.c_intra, r.overflow_rate)

    result = train(model, data, cfg, on_step=progress)
    clusters = cfg.clusters
    write_metrics(out / "metrics.csv", result.metrics, clusters.num_experts, clusters.num_clusters)
    write_fractions(out / "fractions.csv", result.metrics, clusters)
    save_checkpoint(out / "checkpoint.txt", result.model)
    log.info("best val %.5f at step %d; wrote %s", result.best_val, result.best_step, out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec, cfg, table = load_config(args.config, args.seed)
    axis = table.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"expected one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    values = table.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values", "expected a non-empty list")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError("sweep.values", f"not a number: {v!r}")
    variants = table.get("variants") or {"": {}}
    if not isinstance(variants, dict) or not all(isinstance(o, dict) for o in variants.values()):
        raise ConfigError("sweep.variants", "expected a table of name -> overrides")
    checked = {}
    for name, overrides in variants.items():
        _apply(f"sweep.variants.{name}", cfg, overrides)
        checked[name] = overrides
    workers = table.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError("sweep.workers", "expected a positive integer")
    try:
        rows = sweep(spec, cfg, axis, values, checked, workers=workers)
    except ConfigError as exc:
        raise ConfigError(f"sweep.{exc.key}", str(exc).split(": ", 1)[1]) from None
    # one block per variant, values in the order given
    order = {name: k for k, name in enumerate(checked)}
    rows = sorted(rows, key=lambda r: order[r.variant])
    out = _outdir(args)
    write_sweep(out / "sweep.csv", rows)
    seeds = sorted({r.seed for r in rows})
    meta = {
        "axis": axis,
        "values": values,
        "variants": list(checked),
        "seeds": seeds,
        "paired_seeds": len(seeds) == 1,
        "data_seed": spec.seed,
    }
    assert meta["paired_seeds"], "sweep runs must share one seed"
    (out / "sweep_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    for r in rows:
        log.info("%s=%s %-8s best %.5f final %.5f C_intra %.3e", axis, r.value, r.variant or "-",
                 r.best_val, r.final_val, r.final_c_intra)
    return EXIT_OK


def cmd_check_grads(args) -> int:
    reports = run_all(points=args.points, seed=args.seed or 0, fault=args.inject_fault)
    failed = [r for r in reports if not r.ok]
    for r in reports:
        print(f"{r.name:16s} max_rel_error={r.max_rel_error:.3e} points={r.points} "
              f"{'ok' if r.ok else 'FAIL'}")
    for r in failed:
        print(f"FAILED {r.name}: error {r.max_rel_error:.3e} >= {TOLERANCE:g} at point {r.worst_point}",
              file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


def _variance(xs):
    mean = sum(xs) / len(xs)
    return sum((x - mean) ** 2 for x in xs) / len(xs)


def oracle_checks(mask_seeds: int = 10_000):
    """(name, passed, detail) triples for the closed-form checks."""
    out = []
    u = np.full(4, 0.25)
    got = balance_loss(u, Tensor(u), 4, 0.01).item()
    out.append(("balance_uniform", abs(got - 0.01) <= 1e-12, f"{got!r} vs 0.01"))
    h = [0.5, 0.5, 0.0, 0.0]
    got = balance_loss(h, Tensor(h), 4, 0.01).item()
    out.append(("balance_half_split", abs(got - 0.02) <= 1e-12, f"{got!r} vs 0.02"))

    p = [0.4, 0.2, 0.3, 0.1]
    intra = (_variance(p[:2]) + _variance(p[2:])) / 2
    hi, lo = sorted([sum(p[:2]) / 2, sum(p[2:]) / 2], reverse=True)
    scripted = 0.01 * 4 * intra * math.exp(-(hi - lo) / hi)
    got = clustering_loss(Tensor([p]), ClusterConfig(4, 2), coef=0.01, mu=1.0).item()
    out.append(("clustering_example", abs(got - scripted) <= 1e-9, f"{got!r} vs {scripted!r}"))
    got = inter_cluster_constraint(Tensor([[0.3, 0.2]]), 1.0).item()
    out.append(("inter_cluster_example", abs(got - math.exp(-1 / 3)) <= 1e-12, f"{got!r}"))

    res = dispatch(np.full((8, 4), 0.25), np.zeros((8, 1), int), 2.0)
    ok = res.capacity == 4 and res.counts[0] == 4 and res.overflow == 4
    ok = ok and list(res.assignment[4:]) == [OVERFLOW] * 4
    out.append(("dispatch_overflow", bool(ok), f"capacity {res.capacity}, overflow {res.overflow}"))

    cfg = ClusterConfig(8, 2)
    never_empty = all(
        cluster_level_mask(cfg, 0.5, s).keep.reshape(2, 4).any(axis=1).all() for s in range(mask_seeds)
    )
    out.append(("cluster_mask_never_empty", never_empty, f"{mask_seeds} seeds"))
    emptied = sum(
        not global_level_mask(8, 0.5, s).keep.reshape(2, 4).any(axis=1).all() for s in range(mask_seeds)
    )
    out.append(("global_mask_can_empty", emptied > 0, f"{emptied}/{mask_seeds} seeds"))
    return out


def cmd_validate_oracles(args) -> int:
    results = oracle_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


def cmd_stats(args) -> int:
    path = Path(args.out) / "metrics.csv"
    if not path.exists():
        raise UsageError(f"no metrics.csv in {args.out}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path} has no rows")
    val = [float(r["val_task"]) for r in rows]
    best = int(np.argmin(val))
    last = rows[-1]
    print(f"rows            {len(rows)}")
    print(f"final step      {last['step']}")
    print(f"final val       {float(last['val_task']):.6f}")
    print(f"best val        {val[best]:.6f} (step {rows[best]['step']})")
    print(f"final C_intra   {float(last['c_intra']):.6e}")
    print(f"max overflow    {max(float(r['overflow_rate']) for r in rows):.4f}")
    shares = [k for k in last if k.startswith("f_")]
    print("final f_i       " + " ".join(f"{float(last[k]):.3f}" for k in shares))
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None,
                        help="overrides both seeds in the config")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    p = _Parser(prog="moec", description="Toy mixture-of-expert-clusters experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, needs_config, helptext in (
        ("train", True, "train one model, write metrics.csv, fractions.csv and a checkpoint"),
        ("sweep", True, "one training run per sweep value, write sweep.csv"),
        ("check-grads", False, "finite-difference check of every loss surface"),
        ("validate-oracles", False, "closed-form checks of the loss and mask formulas"),
        ("stats", False, "summarise OUT/metrics.csv"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        if needs_config:
            sp.add_argument("--config", required=True, help="JSON config file")
        if name == "check-grads":
            sp.add_argument("--points", type=int, default=50, help="random points per check")
            sp.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return p


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "check-grads": cmd_check_grads,
    "validate-oracles": cmd_validate_oracles,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
