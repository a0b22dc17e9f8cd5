"""Line-delimited JSON event traces.

A trace file holds one header line followed by one record per TTI::

    {"header": {"seed", "scheduler", "config_hash", "n_rbgs",
                "episode_length", "initial": [arrival, ...]}}
    {"tti": t,
     "alloc": [ue id | null per RBG],       # decision taken at t
     "busy": [bool per RBG],                # RBGs carrying a retransmission
     "ues": [{"id", "rsrp", "cqi": [mean reported CQI per RBG], "buffer",
              "delivered", "scheduled", "alpha", "hudr", "harq_free"}],
                                            # active UEs as seen before the decision
     "tx": [[ue, bits, mcs, [rbgs]]],       # new transport blocks sent at t
     "skipped": [ue],                       # granted but no free HARQ process
     "feedback": [[ue, bits, ack, expired]],# HARQ feedback resolved at t
     "departures": [ue],                    # t_departure = t
     "arrivals": [arrival],                 # admitted with t_arrival = t + 1
     "dropped": n}                          # arrivals rejected at the user cap

    arrival = {"id", "t", "buffer", "rsrp"}

Acked bits of a UE are the ``bits`` of its ``feedback`` entries with
``ack`` true. Everything the metrics module reports can be recomputed from
these records alone.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator

from .schedulers import SchedulerView
from .simcore import CellState, TtiEvents, UeRecord


def arrival_entry(ue: UeRecord) -> dict:
    return {"id": ue.id, "t": ue.t_arrival, "buffer": ue.request, "rsrp": ue.rsrp}


def header(cell: CellState, scheduler: str, episode_length: int, initial: Iterable[UeRecord]) -> dict:
    return {"header": {
        "seed": cell.seed,
        "scheduler": scheduler,
        "config_hash": cell.config.config_hash(),
        "n_rbgs": cell.config.n_rbgs,
        "episode_length": episode_length,
        "initial": [arrival_entry(ue) for ue in initial],
    }}


def ue_snapshot(cell: CellState, view: SchedulerView) -> list[dict]:
    out = []
    for i, uid in enumerate(view.ue_ids):
        out.append({
            "id": int(uid),
            "rsrp": float(view.rsrp[i]),
            "cqi": [float(c) for c in view.cqi[i]],
            "buffer": int(view.buffer[i]),
            "delivered": cell.ues[int(uid)].delivered,
            "scheduled": int(view.scheduled[i]),
            "alpha": float(view.alpha[i]),
            "hudr": float(view.hist_rate[i]),
            "harq_free": int(view.harq_free[i]),
        })
    return out


def record(snapshot: list[dict], events: TtiEvents) -> dict:
    return {
        "tti": events.tti,
        "alloc": [None if u is None else int(u) for u in events.alloc],
        "busy": events.busy,
        "ues": snapshot,
        "tx": [[u, b, m, list(r)] for u, b, m, r in events.tx],
        "skipped": list(events.skipped),
        "feedback": [[u, b, a, e] for u, b, a, e in events.feedback],
        "departures": list(events.departures),
        "arrivals": [arrival_entry(ue) for ue in events.arrivals],
        "dropped": events.dropped_arrivals,
    }


def dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def write(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def split(records: Iterable[dict]) -> tuple[dict, list[dict]]:
    """Separate the header from the per-TTI records."""
    head, body = None, []
    for rec in records:
        if "header" in rec:
            head = rec["header"]
        else:
            body.append(rec)
    if head is None:
        raise ValueError("trace has no header line")
    return head, body
