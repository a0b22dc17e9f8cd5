"""KPIs computed from event traces.

Time convention: a ledger queried at ``t`` describes the cell at the start of
TTI ``t``, i.e. it counts acknowledgements recorded in TTIs ``< t``. At the
end of an episode of ``T`` TTIs the evaluation time is ``t = T``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

FEATURES = ("rsrp", "cqi", "buffer", "scheduled", "alpha", "hudr")


@dataclass
class UserLedger:
    t_arrival: int
    request: int
    t_departure: Optional[int] = None
    acks: list = field(default_factory=list)     # (tti, bits)
    grants: list = field(default_factory=list)   # (tti, number of RBGs)


class RateLedger:
    """Per-UE acknowledged-bit series plus arrival/departure stamps."""

    def __init__(self):
        self.users: dict[int, UserLedger] = {}
        self.t_end = 0

    def add_arrival(self, uid: int, t: int, request: int) -> None:
        self.users[uid] = UserLedger(t_arrival=t, request=request)

    def observe(self, tti: int, tx, feedback, departures, arrivals) -> None:
        """Fold one TTI of events in.

        ``tx``/``feedback`` are sequences of (ue, bits, mcs, rbgs) and
        (ue, bits, ack, expired); ``arrivals`` are (id, t, request) triples.
        """
        for uid, bits, ack, _expired in feedback:
            if ack:
                self.users[uid].acks.append((tti, bits))
        for uid, _bits, _mcs, rbgs in tx:
            self.users[uid].grants.append((tti, len(rbgs)))
        for uid in departures:
            self.users[uid].t_departure = tti
        for uid, t, request in arrivals:
            self.add_arrival(uid, t, request)
        self.t_end = tti + 1

    def observe_events(self, events) -> None:
        self.observe(events.tti, events.tx, events.feedback, events.departures,
                     [(ue.id, ue.t_arrival, ue.request) for ue in events.arrivals])

    @classmethod
    def from_trace(cls, head: dict, records: Iterable[dict]) -> "RateLedger":
        led = cls()
        for a in head["initial"]:
            led.add_arrival(a["id"], a["t"], a["buffer"])
        for rec in records:
            led.observe(rec["tti"], rec["tx"], rec["feedback"], rec["departures"],
                        [(a["id"], a["t"], a["buffer"]) for a in rec["arrivals"]])
        return led

    def arrived(self, t: int) -> list[int]:
        return [uid for uid, u in self.users.items() if u.t_arrival <= t]

    def acked_bits(self, uid: int, t: int) -> int:
        return sum(b for i, b in self.users[uid].acks if i < t)


def user_rate(ledger: RateLedger, n: int, t: int) -> float:
    """Acked bits divided by time in the cell, frozen at departure."""
    u = ledger.users[n]
    end = t if u.t_departure is None else min(t, u.t_departure)
    span = end - u.t_arrival
    if span <= 0:
        return 0.0
    return ledger.acked_bits(n, t) / span


def user_rates(ledger: RateLedger, t: int) -> list[float]:
    return [user_rate(ledger, n, t) for n in ledger.arrived(t)]


def audr(ledger: RateLedger, t: int) -> Optional[float]:
    rates = user_rates(ledger, t)
    if not rates:
        return None
    return math.fsum(rates) / len(rates)


def tile_index(n: int) -> int:
    """1-based rank of the 5%-tile among ``n`` sorted rates."""
    return max(1, -(-n // 20))


def five_tile(ledger: RateLedger, t: int) -> Optional[float]:
    rates = sorted(user_rates(ledger, t))
    if not rates:
        return None
    return rates[tile_index(len(rates)) - 1]


def jain_index(rates: Sequence[float]) -> Optional[float]:
    """(mean x)^2 / mean(x^2); ``None`` for an empty or all-zero list."""
    n = len(rates)
    if n == 0:
        return None
    top = max(abs(x) for x in rates)
    if top == 0:
        return None
    # rescale only when squaring would underflow or overflow; the plain form
    # keeps results bit-stable for ordinary rates
    x = rates if 1e-140 < top < 1e140 else [v / top for v in rates]
    return (math.fsum(x) / n) ** 2 / (math.fsum(v * v for v in x) / n)


@dataclass
class ResidenceStats:
    residence: int
    transmission: int
    grant_sizes: dict            # number of RBGs in one grant -> count
    per_user_transmission: dict  # ue -> TTIs with at least one RBG


def residence_stats(ledger: RateLedger, t_end: Optional[int] = None) -> ResidenceStats:
    """Total residence time, total transmission time and grant-size shares.

    Transmission time counts (UE, TTI) pairs in which the UE sent a new TB on
    at least one RBG.
    """
    t_end = ledger.t_end if t_end is None else t_end
    residence = 0
    sizes: Counter = Counter()
    per_user = {}
    for uid, u in ledger.users.items():
        end = t_end if u.t_departure is None else min(t_end, u.t_departure)
        residence += max(0, end - u.t_arrival)
        ttis = {i for i, _ in u.grants if i < t_end}
        per_user[uid] = len(ttis)
        sizes.update(k for i, k in u.grants if i < t_end)
    return ResidenceStats(residence, sum(per_user.values()), dict(sorted(sizes.items())), per_user)


def kpis(ledger: RateLedger, t: Optional[int] = None) -> dict:
    t = ledger.t_end if t is None else t
    rates = user_rates(ledger, t)
    rs = residence_stats(ledger, t)
    return {
        "n_users": len(rates),
        "audr": audr(ledger, t),
        "5tudr": five_tile(ledger, t),
        "jfi": jain_index(rates),
        "residence": rs.residence,
        "transmission": rs.transmission,
    }


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        return math.nan
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 1e-24 * max(1.0, float(x @ x)) or syy == 0.0:
        return math.nan
    return float(xc @ yc) / math.sqrt(sxx * syy)


def feature_samples(records: Iterable[dict], n_rbgs: int):
    """Per RBG: (feature matrix, chosen indicator) over candidate (TTI, UE) pairs.

    Candidates are active UEs with a non-empty buffer on a free RBG.
    """
    feats = [[] for _ in range(n_rbgs)]
    chosen = [[] for _ in range(n_rbgs)]
    for rec in records:
        for k in range(n_rbgs):
            if rec["busy"][k]:
                continue
            pick = rec["alloc"][k]
            for ue in rec["ues"]:
                if ue["buffer"] <= 0:
                    continue
                feats[k].append((ue["rsrp"], ue["cqi"][k], ue["buffer"], ue["scheduled"],
                                 ue["alpha"], ue["hudr"]))
                chosen[k].append(1.0 if pick == ue["id"] else 0.0)
    return ([np.array(f, dtype=np.float64).reshape(-1, len(FEATURES)) for f in feats],
            [np.array(c, dtype=np.float64) for c in chosen])


def feature_correlation(records: Iterable[dict], n_rbgs: int) -> np.ndarray:
    """Pearson correlation of each scheduler-visible feature with selection.

    Returns an ``(n_rbgs, 6)`` matrix over :data:`FEATURES`; cells with a
    constant feature or indicator are NaN.
    """
    feats, chosen = feature_samples(records, n_rbgs)
    out = np.full((n_rbgs, len(FEATURES)), math.nan)
    for k in range(n_rbgs):
        for j in range(len(FEATURES)):
            out[k, j] = _pearson(feats[k][:, j], chosen[k])
    return out


def empirical_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    xs = sorted(values)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]
