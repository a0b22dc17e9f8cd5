"""Experiment orchestration: evaluation runs, PF sweeps, comparisons, policy analysis.

Configuration is a JSON object with three optional sections::

    {"cell":       {CellConfig fields},
     "train":      {TrainConfig fields},
     "experiment": {"seeds": [..] | "n_simulations": n, "seed_offset": s,
                    "episode_length": 1000, "schedulers": ["rrf", "pf1", ...],
                    "alpha1_grid": [..], "alpha2": 1.0, "snapshots": [1, 2]}}

Scheduler specs: ``rrf``, ``op``, ``pf1`` (alpha1=0), ``pf2`` (alpha1=0.5),
``pf:a1=<x>,a2=<y>`` and ``marl:<checkpoint>``; ``{n_rbgs}`` in a checkpoint
path is replaced by the cell's RBG count.

All tables are CSV; every row carries the config hash and the seed.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import metrics, trace
from .metrics import FEATURES, RateLedger
from .schedulers import Opportunistic, ProportionalFair, RoundRobin, Scheduler, SchedulerView
from .simcore import CellConfig, CellState


class ConfigError(ValueError):
    """Invalid configuration or scheduler spec (CLI exit code 2)."""


# -- configuration -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    cell: CellConfig = field(default_factory=CellConfig)
    schedulers: list = field(default_factory=lambda: ["marl", "pf1", "pf2", "rrf"])
    seeds: list = field(default_factory=lambda: list(range(100)))
    episode_length: int = 1000
    alpha1_grid: list = field(default_factory=lambda: [round(0.02 * i, 2) for i in range(51)])
    alpha2: float = 1.0
    snapshots: list = field(default_factory=lambda: [1])

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be positive")

    @property
    def config_hash(self) -> str:
        return self.cell.config_hash()


EXPERIMENT_KEYS = {"seeds", "n_simulations", "seed_offset", "episode_length", "schedulers",
                   "alpha1_grid", "alpha2", "snapshots"}


def experiment_from_dict(d: dict) -> ExperimentConfig:
    unknown = set(d) - {"cell", "train", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        cell = CellConfig.from_dict(d.get("cell", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cell: {exc}") from exc
    ex = dict(d.get("experiment", {}))
    bad = set(ex) - EXPERIMENT_KEYS
    if bad:
        raise ConfigError(f"unknown experiment keys: {sorted(bad)}")
    n = ex.pop("n_simulations", None)
    offset = ex.pop("seed_offset", 0)
    if "seeds" not in ex and n is not None:
        ex["seeds"] = list(range(offset, offset + int(n)))
    return ExperimentConfig(cell=cell, **ex)


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    return d


# -- schedulers --------------------------------------------------------------------

PF_ALIASES = {"pf1": (0.0, 1.0), "pf2": (0.5, 1.0)}


def make_scheduler(spec: str, cell: CellConfig, gamma_ma: float = 0.1) -> Scheduler:
    """Build a scheduler from its spec string (see module docstring)."""
    name = spec.strip()
    low = name.lower()
    if low == "rrf":
        return RoundRobin()
    if low == "op":
        return Opportunistic()
    if low in PF_ALIASES:
        a1, a2 = PF_ALIASES[low]
        return ProportionalFair(a1, a2, gamma_ma, name=low)
    if low.startswith("pf:"):
        kv = {}
        for part in name[3:].split(","):
            k, _, v = part.partition("=")
            try:
                kv[k.strip()] = float(v)
            except ValueError:
                raise ConfigError(f"bad PF parameter {part!r} in {spec!r}") from None
        if set(kv) - {"a1", "a2"}:
            raise ConfigError(f"PF spec accepts a1 and a2 only: {spec!r}")
        return ProportionalFair(kv.get("a1", 1.0), kv.get("a2", 1.0), gamma_ma, name=name)
    if low.startswith("marl"):
        _, _, path = name.partition(":")
        if not path:
            raise ConfigError("MARL scheduler needs a checkpoint path (marl:<file>)")
        path = path.replace("{n_rbgs}", str(cell.n_rbgs))
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint not found: {path}")
        from .qmix import MarlScheduler, QmixModel
        try:
            model = QmixModel.load(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if model.n_agents != cell.n_rbgs or model.n_actions != cell.max_users:
            raise ConfigError(f"{path}: model is for {model.n_agents} RBGs / {model.n_actions} users")
        return MarlScheduler(model, name="marl")
    raise ConfigError(f"unknown scheduler {spec!r}")


def scheduler_label(spec: str) -> str:
    low = spec.strip().lower()
    return "marl" if low.startswith("marl") else spec.strip()


# -- episodes ----------------------------------------------------------------------

@dataclass
class EpisodeResult:
    ledger: RateLedger
    kpis: dict
    records: Optional[list]   # trace lines including the header, when requested


def run_episode(cell_cfg: CellConfig, scheduler: Scheduler, seed: int, episode_length: int,
                keep_trace: bool = False, label: Optional[str] = None,
                gamma_ma: float = 0.1) -> EpisodeResult:
    """Simulate one episode from a fresh cell and compute end-of-episode KPIs."""
    cell = CellState.reset(cell_cfg, seed)
    scheduler.reset()
    initial = cell.active_ues()
    ledger = RateLedger()
    for ue in initial:
        ledger.add_arrival(ue.id, ue.t_arrival, ue.request)
    records = [trace.header(cell, label or scheduler.name, episode_length, initial)] if keep_trace else None
    for _ in range(episode_length):
        view = SchedulerView.from_cell(cell)
        snap = trace.ue_snapshot(cell, view) if keep_trace else None
        events = cell.step(scheduler.allocate(view), gamma_ma)
        ledger.observe_events(events)
        if keep_trace:
            records.append(trace.record(snap, events))
    return EpisodeResult(ledger, metrics.kpis(ledger, episode_length), records)


# -- CSV helpers -------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def to_csv(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> None:
    Path(path).write_text(to_csv(rows, columns))


def _mean(xs: Iterable) -> Optional[float]:
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


# -- evaluation --------------------------------------------------------------------

KPI_COLUMNS = ("config_hash", "scheduler", "seed", "n_users", "audr", "5tudr", "jfi",
               "residence", "transmission")


def run_eval(cfg: ExperimentConfig, trace_dir: Optional[str] = None) -> tuple[list, list]:
    """One fresh episode per (scheduler, seed).

    Returns ``(rows, aggregate)``; ``rows`` has one dict per run and
    ``aggregate`` one dict of mean KPIs per scheduler. With ``trace_dir``
    every run's trace is written as ``<scheduler>_seed<seed>.jsonl``.
    """
    if not cfg.schedulers:
        raise ConfigError("no schedulers configured")
    scheds = [(scheduler_label(s), make_scheduler(s, cfg.cell)) for s in cfg.schedulers]
    rows = []
    for label, sched in scheds:
        for seed in cfg.seeds:
            res = run_episode(cfg.cell, sched, seed, cfg.episode_length, keep_trace=trace_dir is not None,
                              label=label)
            if trace_dir is not None:
                trace.write(Path(trace_dir) / f"{_safe(label)}_seed{seed}.jsonl", res.records)
            rows.append({"config_hash": cfg.config_hash, "scheduler": label, "seed": seed, **res.kpis})
    return rows, aggregate(rows)


def aggregate(rows: Sequence[dict]) -> list:
    out = []
    for label in dict.fromkeys(r["scheduler"] for r in rows):
        sub = [r for r in rows if r["scheduler"] == label]
        out.append({
            "config_hash": sub[0]["config_hash"],
            "scheduler": label,
            "runs": len(sub),
            **{f"mean_{k}": _mean(r[k] for r in sub) for k in ("audr", "5tudr", "jfi", "residence", "transmission")},
        })
    return out


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


# -- PF sweep ----------------------------------------------------------------------

def pf_sweep(cfg: ExperimentConfig, grid: Optional[Sequence[float]] = None) -> tuple[list, list]:
    """Mean 5TUDR per alpha1 (alpha2 fixed) plus RRF and OP reference rows.

    Returns ``(curve, per_seed)`` where ``per_seed`` holds every run's KPIs.
    """
    grid = list(cfg.alpha1_grid if grid is None else grid)
    if not grid:
        raise ConfigError("empty alpha1 grid")
    runs = [(f"pf:a1={a1:g},a2={cfg.alpha2:g}", "pf", a1) for a1 in grid]
    runs += [("rrf", "rrf", None), ("op", "op", None)]
    per_seed, curve = [], []
    for spec, kind, a1 in runs:
        sched = make_scheduler(spec, cfg.cell)
        vals = []
        for seed in cfg.seeds:
            k = run_episode(cfg.cell, sched, seed, cfg.episode_length).kpis
            per_seed.append({"config_hash": cfg.config_hash, "scheduler": kind, "alpha1": a1,
                             "alpha2": cfg.alpha2 if kind == "pf" else None, "seed": seed,
                             "audr": k["audr"], "5tudr": k["5tudr"]})
            vals.append(k)
        curve.append({"config_hash": cfg.config_hash, "scheduler": kind, "alpha1": a1,
                      "alpha2": cfg.alpha2 if kind == "pf" else None, "runs": len(vals),
                      "mean_5tudr": _mean(v["5tudr"] for v in vals),
                      "mean_audr": _mean(v["audr"] for v in vals)})
    return curve, per_seed


# -- comparisons -------------------------------------------------------------------

def pairwise_differences(rows: Sequence[dict], a: str, b: str) -> list:
    """Per-seed ``a - b`` differences of AUDR and 5TUDR on shared seeds."""
    ra = {r["seed"]: r for r in rows if r["scheduler"] == a}
    rb = {r["seed"]: r for r in rows if r["scheduler"] == b}
    if set(ra) != set(rb):
        raise ConfigError(f"seed sets of {a} and {b} differ")
    out = []
    for seed in sorted(ra):
        d = {"pair": f"{a}-{b}", "seed": seed}
        for k in ("audr", "5tudr"):
            x, y = ra[seed][k], rb[seed][k]
            d[k] = None if x is None or y is None else x - y
        out.append(d)
    return out


def compare(rows: Sequence[dict], pairs: Sequence[tuple]) -> tuple[list, list]:
    """Mean differences per pair and the empirical CDFs behind them.

    Returns ``(summary, cdf)``; summary rows are ``pair, mean_audr_diff,
    mean_5tudr_diff, runs`` and cdf rows ``pair, kpi, value, prob``.
    """
    labels = {r["scheduler"] for r in rows}
    if len(labels) < 2:
        raise ConfigError("compare needs at least two schedulers")
    summary, cdf = [], []
    for a, b in pairs:
        diffs = pairwise_differences(rows, a, b)
        summary.append({"pair": f"{a}-{b}", "runs": len(diffs),
                        "mean_audr_diff": _mean(d["audr"] for d in diffs),
                        "mean_5tudr_diff": _mean(d["5tudr"] for d in diffs)})
        for k in ("audr", "5tudr"):
            vals = [d[k] for d in diffs if d[k] is not None]
            cdf += [{"pair": f"{a}-{b}", "kpi": k, "value": v, "prob": p} for v, p in metrics.empirical_cdf(vals)]
    return summary, cdf


def difference_table(summaries: dict) -> list:
    """Table shaped like rows = pairs, columns = (AUDR, 5TUDR) per RBG count.

    ``summaries`` maps an RBG count to the ``summary`` list from
    :func:`compare`.
    """
    pairs = list(dict.fromkeys(s["pair"] for summ in summaries.values() for s in summ))
    rows = []
    for pair in pairs:
        row = {"pair": pair}
        for k in sorted(summaries):
            hit = next((s for s in summaries[k] if s["pair"] == pair), None)
            row[f"audr_{k}rbg"] = hit and hit["mean_audr_diff"]
            row[f"5tudr_{k}rbg"] = hit and hit["mean_5tudr_diff"]
        rows.append(row)
    return rows


def default_pairs(labels: Sequence[str]) -> list:
    """MARL against every other scheduler if present, else all ordered pairs of the first one."""
    labels = list(labels)
    head = "marl" if "marl" in labels else labels[0]
    return [(head, b) for b in labels if b != head]


# -- policy analysis ---------------------------------------------------------------

def analyze(traces: Sequence[tuple], snapshot_ttis: Sequence[int] = (1,)) -> dict:
    """Policy report from persisted traces.

    ``traces`` is a sequence of ``(header, records)`` pairs. Snapshots use
    1-based TTI numbers (TTI 1 is the first decision).
    """
    if not traces:
        raise ConfigError("empty trace set")
    by_sched: dict = {}
    for head, recs in traces:
        by_sched.setdefault(head["scheduler"], []).append((head, recs))
    totals, shares, corr, snaps = [], [], [], []
    for label, runs in by_sched.items():
        res = trn = 0
        sizes: dict = {}
        n_rbgs = runs[0][0]["n_rbgs"]
        all_recs = []
        for head, recs in runs:
            led = RateLedger.from_trace(head, recs)
            rs = metrics.residence_stats(led, head["episode_length"])
            res += rs.residence
            trn += rs.transmission
            for k, v in rs.grant_sizes.items():
                sizes[k] = sizes.get(k, 0) + v
            all_recs.extend(recs)
        totals.append({"scheduler": label, "runs": len(runs), "residence": res, "transmission": trn})
        n_grants = sum(sizes.values())
        for k in range(1, n_rbgs + 1):
            shares.append({"scheduler": label, "rbgs_per_grant": k, "count": sizes.get(k, 0),
                           "share": sizes.get(k, 0) / n_grants if n_grants else None})
        m = metrics.feature_correlation(all_recs, n_rbgs)
        for k in range(n_rbgs):
            corr.append({"scheduler": label, "rbg": k + 1, **{f: float(m[k, j]) for j, f in enumerate(FEATURES)}})
        head, recs = runs[0]
        for t in snapshot_ttis:
            if not 1 <= t <= len(recs):
                continue
            rec = recs[t - 1]
            for k in range(n_rbgs):
                for ue in rec["ues"]:
                    snaps.append({"scheduler": label, "seed": head["seed"], "tti": t, "rbg": k + 1,
                                  "ue": ue["id"], "cqi": ue["cqi"][k], "buffer": ue["buffer"],
                                  "chosen": "T" if rec["alloc"][k] == ue["id"] else "F"})
    return {"totals": totals, "shares": shares, "correlation": corr, "snapshots": snaps}


def load_traces(paths: Sequence) -> list:
    out = []
    for p in paths:
        out.append(trace.split(trace.read(p)))
    return out


def train_config_dict(tcfg) -> dict:
    return dataclasses.asdict(tcfg)
