"""Command-line entry point: ``fairsched {train,eval,sweep-pf,compare,analyze}``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort (e.g. diverged
training).
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("fairsched")


def parse_seeds(text: str) -> list:
    """``"0-99"``, ``"1,4,7"`` or a mix such as ``"0-4,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            seeds += list(range(int(lo), int(hi) + 1)) if sep else [int(part)]
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}") from None
    return seeds


def parse_floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def _experiment(args) -> harness.ExperimentConfig:
    raw = harness.load_config(args.config)
    ex = raw.setdefault("experiment", {})
    if getattr(args, "seeds", None):
        ex["seeds"] = parse_seeds(args.seeds)
        ex.pop("n_simulations", None)
    elif getattr(args, "n_simulations", None):
        ex["n_simulations"] = args.n_simulations
        ex.pop("seeds", None)
    if getattr(args, "episode_length", None):
        ex["episode_length"] = args.episode_length
    if getattr(args, "schedulers", None):
        ex["schedulers"] = [s for s in args.schedulers.split(",") if s]
    if getattr(args, "n_rbgs", None):
        raw.setdefault("cell", {})["n_rbgs"] = args.n_rbgs
    if getattr(args, "full_buffer", False):
        raw.setdefault("cell", {})["full_buffer"] = True
    try:
        return harness.experiment_from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(out: Path, command: str, payload: dict) -> None:
    (out / "run.json").write_text(json.dumps({"command": command, **payload}, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .qmix import TrainConfig, train
    from .simcore import CellConfig

    raw = harness.load_config(args.config)
    try:
        cell = CellConfig.from_dict(raw.get("cell", {}))
        tdict = dict(raw.get("train", {}))
        for key in ("epochs", "seed", "mode", "episode_length"):
            val = getattr(args, key, None)
            if val is not None:
                tdict[key] = val
        if args.n_rbgs:
            cell = CellConfig.from_dict({**cell.to_dict(), "n_rbgs": args.n_rbgs})
        tcfg = TrainConfig.from_dict(tdict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _out(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"qmix_{tcfg.mode}_{cell.n_rbgs}rbg.ckpt"
    _stamp(out, "train", {"config_hash": cell.config_hash(), "cell": cell.to_dict(),
                          "train": dataclasses.asdict(tcfg), "checkpoint": str(ckpt)})
    with open(out / "train_log.jsonl", "w") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        result = train(cell, tcfg, on_epoch=on_epoch, checkpoint=ckpt)
    result.model.save(ckpt)
    with open(out / "losses.csv", "w") as fh:
        fh.write("epoch,step,loss\n")
        for e, losses in enumerate(result.losses, start=1):
            for i, v in enumerate(losses):
                fh.write(f"{e},{i},{v!r}\n")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    out = _out(args)
    trace_dir = None
    if args.traces:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
    rows, agg = harness.run_eval(cfg, trace_dir)
    harness.write_csv(out / "kpi_runs.csv", rows, harness.KPI_COLUMNS)
    harness.write_csv(out / "kpi_summary.csv", agg)
    _stamp(out, "eval", {"config_hash": cfg.config_hash, "seeds": cfg.seeds, "schedulers": cfg.schedulers,
                         "episode_length": cfg.episode_length})
    sys.stdout.write(harness.to_csv(agg))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    if args.alpha2 is not None:
        cfg.alpha2 = args.alpha2
    grid = parse_floats(args.grid) if args.grid else None
    out = _out(args)
    curve, per_seed = harness.pf_sweep(cfg, grid)
    harness.write_csv(out / "pf_curve.csv", curve)
    harness.write_csv(out / "pf_runs.csv", per_seed)
    _stamp(out, "sweep-pf", {"config_hash": cfg.config_hash, "seeds": cfg.seeds,
                             "grid": grid if grid is not None else cfg.alpha1_grid, "alpha2": cfg.alpha2})
    sys.stdout.write(harness.to_csv(curve))
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _experiment(args)
    rbgs = [int(x) for x in args.rbgs.split(",")] if args.rbgs else [base.cell.n_rbgs]
    out = _out(args)
    labels = [harness.scheduler_label(s) for s in base.schedulers]
    if len(set(labels)) < 2:
        raise ConfigError("compare needs at least two schedulers")
    if args.pairs:
        pairs = [tuple(p.split(":")) for p in args.pairs.split(",")]
        if any(len(p) != 2 or p[0] not in labels or p[1] not in labels for p in pairs):
            raise ConfigError(f"pairs must be a:b over {labels}")
    else:
        pairs = harness.default_pairs(labels)
    summaries, all_rows, all_cdf = {}, [], []
    for k in rbgs:
        cell = dataclasses.replace(base.cell, n_rbgs=k)
        cfg = dataclasses.replace(base, cell=cell)
        rows, _ = harness.run_eval(cfg)
        summary, cdf = harness.compare(rows, pairs)
        summaries[k] = summary
        all_rows += [{"n_rbgs": k, **r} for r in rows]
        all_cdf += [{"n_rbgs": k, **r} for r in cdf]
    table = harness.difference_table(summaries)
    harness.write_csv(out / "compare_runs.csv", all_rows, ("n_rbgs",) + harness.KPI_COLUMNS)
    harness.write_csv(out / "difference_cdf.csv", all_cdf)
    harness.write_csv(out / "difference_table.csv", table)
    _stamp(out, "compare", {"config_hash": base.config_hash, "seeds": base.seeds, "rbgs": rbgs,
                            "pairs": [list(p) for p in pairs], "schedulers": base.schedulers})
    sys.stdout.write(harness.to_csv(table))
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = _out(args)
    if args.traces:
        paths = sorted(p for pattern in args.traces for p in glob.glob(pattern))
        if not paths:
            raise ConfigError("no trace files matched")
        stamp = {"traces": paths}
    else:
        cfg = _experiment(args)
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        harness.run_eval(cfg, trace_dir)
        paths = sorted(str(p) for p in trace_dir.glob("*.jsonl"))
        stamp = {"config_hash": cfg.config_hash, "seeds": cfg.seeds, "schedulers": cfg.schedulers}
    snaps = [int(x) for x in args.snapshots.split(",")] if args.snapshots else [1]
    report = harness.analyze(harness.load_traces(paths), snaps)
    for name, rows in report.items():
        harness.write_csv(out / f"analysis_{name}.csv", rows)
    _stamp(out, "analyze", {**stamp, "snapshots": snaps})
    sys.stdout.write(harness.to_csv(report["totals"]))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairsched", description="Downlink RBG scheduling experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, experiment=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--n-rbgs", type=int, dest="n_rbgs")
        if experiment:
            sp.add_argument("--seeds", help="seed list, e.g. 0-99 or 1,2,3")
            sp.add_argument("--n-simulations", type=int, dest="n_simulations")
            sp.add_argument("--episode-length", type=int, dest="episode_length")
            sp.add_argument("--schedulers", help="comma-separated scheduler specs")
            sp.add_argument("--full-buffer", action="store_true", dest="full_buffer")

    t = sub.add_parser("train", help="train a QMIX scheduler")
    common(t, experiment=False)
    t.add_argument("--mode", choices=["distributional", "centralized"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--episode-length", type=int, dest="episode_length")
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="checkpoint output path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="KPI table per scheduler and seed")
    common(e)
    e.add_argument("--traces", action="store_true", help="also write per-run traces")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-pf", help="mean 5TUDR over a PF alpha1 grid")
    common(s)
    s.add_argument("--grid", help="alpha1 values, e.g. 0,0.5,1")
    s.add_argument("--alpha2", type=float)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="per-seed KPI differences and their CDFs")
    common(c)
    c.add_argument("--rbgs", help="RBG counts, e.g. 3,5,7")
    c.add_argument("--pairs", help="pairs a:b, comma separated (default: first/marl vs rest)")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("analyze", help="policy report from traces")
    common(a)
    a.add_argument("--traces", nargs="*", help="trace files or globs (default: simulate from config)")
    a.add_argument("--snapshots", help="1-based TTIs for allocation snapshots")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .neuro import TrainingDiverged
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
