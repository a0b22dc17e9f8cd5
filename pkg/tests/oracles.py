"""Independent reference computations used by the tests.

Nothing here imports the package's metrics or simulator internals: the trace
walker re-derives every KPI from raw JSON lines, and the TB oracle works in
exact rational arithmetic from the decimal SE table.
"""

import json
import math
from fractions import Fraction


def tb_bits_exact(levels, se_table, res_per_rb=168):
    n = len(levels)
    idx = sum(levels) // n                    # floor of the mean
    se = Fraction(str(se_table[idx - 1]))     # table is 1-based in level
    return math.floor(n * se * res_per_rb)


def finite_diff(f, x, eps=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = [0.0] * x.size
    flat = x.reshape(-1)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return abs(a - b) / max(1e-12, abs(a) + abs(b))


class TraceWalker:
    """Re-reads a trace (list of JSON lines or dicts) and tallies per-user facts."""

    def __init__(self, lines):
        recs = [json.loads(x) if isinstance(x, str) else x for x in lines]
        head = recs[0]["header"]
        self.T = head["episode_length"]
        self.arrive = {}
        self.depart = {}
        self.request = {}
        self.acked = {}          # uid -> list of (tti, bits)
        self.tx_ttis = {}        # uid -> set of ttis
        self.grant_sizes = {}
        self.sent = {}           # uid -> bits of new TBs
        self.lost = {}
        self.records = recs[1:]
        for a in head["initial"]:
            self._arrive(a)
        for r in self.records:
            for uid, bits, ack, expired in r["feedback"]:
                if ack:
                    self.acked[uid].append((r["tti"], bits))
                if expired:
                    self.lost[uid] += bits
            for uid, bits, _mcs, rbgs in r["tx"]:
                self.tx_ttis[uid].add(r["tti"])
                self.sent[uid] += bits
                self.grant_sizes[len(rbgs)] = self.grant_sizes.get(len(rbgs), 0) + 1
            for uid in r["departures"]:
                self.depart[uid] = r["tti"]
            for a in r["arrivals"]:
                self._arrive(a)

    def _arrive(self, a):
        uid = a["id"]
        self.arrive[uid] = a["t"]
        self.request[uid] = a["buffer"]
        self.acked[uid] = []
        self.tx_ttis[uid] = set()
        self.sent[uid] = 0
        self.lost[uid] = 0

    def users(self, t):
        return [u for u in self.arrive if self.arrive[u] <= t]

    def rate(self, uid, t):
        end = min(t, self.depart.get(uid, t))
        span = end - self.arrive[uid]
        if span <= 0:
            return 0.0
        return sum(b for i, b in self.acked[uid] if i < t) / span

    def rates(self, t):
        return [self.rate(u, t) for u in self.users(t)]

    def audr(self, t):
        r = self.rates(t)
        return math.fsum(r) / len(r)

    def five_tile(self, t):
        r = sorted(self.rates(t))
        k = max(1, math.ceil(len(r) / 20))
        return r[k - 1]

    def jain(self, t):
        r = self.rates(t)
        n = len(r)
        sq = math.fsum(x * x for x in r)
        return None if sq == 0 else (math.fsum(r) / n) ** 2 / (sq / n)

    def residence(self, t):
        tot = 0
        for u in self.users(t):
            tot += max(0, min(t, self.depart.get(u, t)) - self.arrive[u])
        return tot

    def transmission(self, t):
        return sum(len({i for i in s if i < t}) for s in self.tx_ttis.values())
