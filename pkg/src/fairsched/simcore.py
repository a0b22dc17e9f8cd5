"""Single-cell downlink simulator.

One base station serves a time-varying set of UEs over ``n_rbgs`` resource
block groups. Each TTI runs, in this order::

    resolve_feedback -> apply_allocation -> hist-rate update
    -> t += 1 -> spawn_arrivals -> report_cqi

Randomness comes from independent named streams derived from one seed, so
that e.g. a scheduler drawing exploration noise never shifts the arrival
process of the cell.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Spectral efficiency (bits/symbol) per CQI/MCS level 1..29. Levels 1-4 are the
# LTE 4-bit CQI table entries; levels 4..29 linearly resample LTE CQI 4..15.
DEFAULT_SE_TABLE = (
    0.1523, 0.2344, 0.3770, 0.6016, 0.7228, 0.8440, 0.9726, 1.1041, 1.2360,
    1.3683, 1.5116, 1.7041, 1.8966, 2.1110, 2.3275, 2.4971, 2.6397, 2.8252,
    3.0856, 3.3455, 3.6007, 3.8559, 4.1259, 4.3992, 4.6654, 4.9258, 5.1679,
    5.3613, 5.5547,
)

# Named RNG sub-streams.
STREAM_ARRIVALS = 0
STREAM_FADING = 1
STREAM_EXPLORATION = 2
STREAM_REPLAY = 3
STREAM_INIT = 4

FULL_BUFFER_BITS = 10**15

Allocation = list  # per-RBG UE id or None


class AllocationError(ValueError):
    """An allocation violates the cell's scheduling contract."""


def make_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def round_half_away(x):
    """Round to nearest integer, ties away from zero (works on scalars and arrays)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class CellConfig:
    """Base-station and traffic parameters.

    Defaults follow the base-station and training tables of the reference
    setup where given. ``rbg_bandwidth`` is chosen so one RB spans 180 kHz.
    ``tx_power_per_rb`` is informational: received power is drawn directly as
    RSRP.
    """

    n_rbgs: int = 3
    rbs_per_rbg: int = 3
    rbg_bandwidth: float = 540e3
    tx_power_per_rb: float = 18.0
    noise_density: float = -174.0
    mcs_min: int = 1
    mcs_max: int = 29
    n_harq: int = 8
    harq_feedback_period: int = 8
    harq_max_attempts: int = 5
    initial_cqi: int = 4
    arrival_rate: float = 0.01
    initial_users: int = 5
    max_users: int = 10
    buffer_range: tuple = (4000, 100000)
    rsrp_range: tuple = (-100.0, -70.0)
    cqi_offset_range: tuple = (-2.0, 2.0)
    fading_std: float = 1.0
    cqi_slope: float = 0.6
    cqi_intercept: float = -6.5
    se_table: tuple = DEFAULT_SE_TABLE
    res_per_rb: int = 168
    olla_step_ack: float = 0.1
    olla_step_nack: float = -0.5
    olla_bounds: tuple = (-10.0, 10.0)
    full_buffer: bool = False

    def __post_init__(self):
        self.buffer_range = tuple(self.buffer_range)
        self.rsrp_range = tuple(self.rsrp_range)
        self.cqi_offset_range = tuple(self.cqi_offset_range)
        self.olla_bounds = tuple(self.olla_bounds)
        self.se_table = tuple(float(v) for v in self.se_table)
        self.validate()

    def validate(self):
        if not 1 <= self.mcs_min <= self.mcs_max <= 29:
            raise ValueError("need 1 <= mcs_min <= mcs_max <= 29")
        if len(self.se_table) < self.mcs_max:
            raise ValueError("se_table must cover levels 1..mcs_max")
        if any(b <= a for a, b in zip(self.se_table, self.se_table[1:])):
            raise ValueError("se_table must be strictly increasing")
        if not self.mcs_min <= self.initial_cqi <= self.mcs_max:
            raise ValueError("initial_cqi outside [mcs_min, mcs_max]")
        if self.arrival_rate < 0 or (self.arrival_rate == 0 and not self.full_buffer):
            raise ValueError("arrival_rate must be > 0")
        if not 0 < self.initial_users <= self.max_users:
            raise ValueError("need 0 < initial_users <= max_users")
        if min(self.n_rbgs, self.rbs_per_rbg, self.n_harq, self.harq_feedback_period,
               self.harq_max_attempts, self.res_per_rb) < 1:
            raise ValueError("counts must be positive")
        if self.olla_step_ack < 0 or self.olla_step_nack > 0:
            raise ValueError("need olla_step_ack >= 0 and olla_step_nack <= 0")
        if self.buffer_range[0] < 1 or self.buffer_range[1] < self.buffer_range[0]:
            raise ValueError("bad buffer_range")

    @property
    def n_rbs(self) -> int:
        return self.n_rbgs * self.rbs_per_rbg

    @property
    def rb_bandwidth(self) -> float:
        return self.rbg_bandwidth / self.rbs_per_rbg

    def se_e4(self) -> np.ndarray:
        """SE table in integer units of 1e-4 bits/symbol, indexed by level."""
        return np.array([0] + [int(round(v * 10000)) for v in self.se_table], dtype=np.int64)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown cell config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def olla_offset_cqi(q, alpha, mcs_min=1, mcs_max=29):
    """Offset a reported CQI by the OLLA adjustment: clamp([q + alpha])."""
    return np.clip(round_half_away(np.asarray(q) + alpha), mcs_min, mcs_max).astype(np.int64)


def olla_update(alpha: float, ack: bool, step_ack: float = 0.1, step_nack: float = -0.5,
                bounds: tuple = (-10.0, 10.0)) -> float:
    alpha = alpha + (step_ack if ack else step_nack)
    return min(max(alpha, bounds[0]), bounds[1])


def tb_bits(levels: Sequence[int], se_e4: np.ndarray, res_per_rb: int = 168) -> int:
    """Bits loadable on a group of RBs with the given CQI levels.

    ``|G| * F(floor(mean(G))) * res_per_rb``, floored. The SE table is held in
    integer 1e-4 units so the floor is exact.
    """
    n = len(levels)
    if n == 0:
        raise ValueError("empty CQI set")
    level = int(sum(int(q) for q in levels)) // n
    return n * int(se_e4[level]) * res_per_rb // 10000


@dataclass(slots=True)
class UeRecord:
    id: int
    rsrp: float
    hidden_cqi_offset: float
    base_cqi: int
    request: int
    buffer: int
    cqi: np.ndarray
    t_arrival: int
    scheduled_times: int = 0
    alpha: float = 0.0
    hist_rate: float = 0.0
    delivered: int = 0
    lost: int = 0
    inflight_bits: int = 0
    n_inflight: int = 0
    acks: int = 0
    nacks: int = 0
    t_departure: Optional[int] = None
    active: bool = True


@dataclass(slots=True)
class HarqProcess:
    ue_id: int
    tb_bits: int
    mcs: int
    rbgs: tuple
    t_first: int
    feedback_due: int
    will_ack: bool
    attempts: int = 0
    status: str = "in-flight"


@dataclass
class TtiEvents:
    """What happened in one TTI; consumed by metrics and the trace writer."""

    tti: int
    alloc: list
    busy: list
    tx: list = field(default_factory=list)          # (ue, bits, mcs, rbgs)
    skipped: list = field(default_factory=list)     # ue ids without a free HARQ process
    feedback: list = field(default_factory=list)    # (ue, bits, ack, expired)
    departures: list = field(default_factory=list)
    arrivals: list = field(default_factory=list)    # UeRecord of admitted UEs
    dropped_arrivals: int = 0


class CellState:
    """Mutable per-TTI snapshot of the base station and its UEs."""

    def __init__(self, config: CellConfig, seed: int):
        self.config = config
        self.seed = seed
        self.t = 0
        self.ues: dict[int, UeRecord] = {}
        self.harq: list[HarqProcess] = []
        self.arrived_total = 0
        self.dropped_arrivals = 0
        self.lost_bits = 0
        self.skipped_grants = 0
        self._next_id = 1
        self._rng_arrivals = make_rng(seed, STREAM_ARRIVALS)
        self._rng_fading = make_rng(seed, STREAM_FADING)
        self._se_e4 = config.se_e4()
        self._busy_cache: tuple = (None, None)
        self.noise_floor = config.noise_density + 10 * math.log10(config.rb_bandwidth)

    @classmethod
    def reset(cls, config: CellConfig, seed: int) -> "CellState":
        """Fresh cell at t=0 with ``initial_users`` randomly generated UEs."""
        cell = cls(config, seed)
        cell._admit(config.initial_users)
        return cell

    # -- views -------------------------------------------------------------

    def active_ues(self) -> list[UeRecord]:
        return [ue for ue in self.ues.values() if ue.active]

    @property
    def active_count(self) -> int:
        return sum(1 for ue in self.ues.values() if ue.active)

    def busy_rbgs(self) -> np.ndarray:
        """RBGs carrying a HARQ retransmission in the current TTI."""
        if self._busy_cache[0] == self.t:
            return self._busy_cache[1]
        busy = np.zeros(self.config.n_rbgs, dtype=bool)
        max_att = self.config.harq_max_attempts
        for p in self.harq:
            if p.feedback_due == self.t and not p.will_ack and p.attempts + 1 < max_att:
                busy[list(p.rbgs)] = True
        self._busy_cache = (self.t, busy)
        return busy

    def base_cqi_for(self, rsrp: float) -> int:
        cfg = self.config
        snr_db = rsrp - self.noise_floor
        q = round_half_away(snr_db * cfg.cqi_slope + cfg.cqi_intercept)
        return int(min(max(q, cfg.mcs_min), cfg.mcs_max))

    def tb_bits(self, levels) -> int:
        return tb_bits(levels, self._se_e4, self.config.res_per_rb)

    # -- operations ----------------------------------------------------------

    def _admit(self, k: int) -> list[UeRecord]:
        cfg = self.config
        rng = self._rng_arrivals
        admitted = []
        for _ in range(k):
            buf = int(rng.integers(cfg.buffer_range[0], cfg.buffer_range[1] + 1))
            rsrp = float(rng.uniform(*cfg.rsrp_range))
            offset = float(rng.uniform(*cfg.cqi_offset_range))
            if cfg.full_buffer:
                buf = FULL_BUFFER_BITS
            ue = UeRecord(
                id=self._next_id, rsrp=rsrp, hidden_cqi_offset=offset,
                base_cqi=self.base_cqi_for(rsrp), request=buf, buffer=buf,
                cqi=np.full(cfg.n_rbs, cfg.initial_cqi, dtype=np.int64),
                t_arrival=self.t,
            )
            self.ues[ue.id] = ue
            self._next_id += 1
            admitted.append(ue)
        self.arrived_total += len(admitted)
        return admitted

    def spawn_arrivals(self) -> tuple[list[UeRecord], int]:
        """Poisson arrivals, admitted up to the ``max_users`` cap.

        Returns the admitted UEs and the number of dropped arrivals.
        """
        cfg = self.config
        if cfg.full_buffer:
            return [], 0
        k = int(self._rng_arrivals.poisson(cfg.arrival_rate))
        room = cfg.max_users - self.active_count
        n_admit = min(k, room)
        admitted = self._admit(n_admit)
        dropped = k - n_admit
        self.dropped_arrivals += dropped
        return admitted, dropped

    def report_cqi(self) -> None:
        """Refresh per-RB CQI reports of UEs present before this TTI.

        Reported = clamp(base + [fading + hidden offset]); a positive hidden
        offset means the UE over-reports what it can decode.
        """
        cfg = self.config
        ues = [ue for ue in self.ues.values() if ue.active and ue.t_arrival < self.t]
        if not ues:
            return
        fade = self._rng_fading.normal(0.0, cfg.fading_std, size=(len(ues), cfg.n_rbs))
        base = np.array([ue.base_cqi for ue in ues], dtype=np.float64)[:, None]
        offset = np.array([ue.hidden_cqi_offset for ue in ues])[:, None]
        rep = np.clip(base + round_half_away(fade + offset), cfg.mcs_min, cfg.mcs_max)
        rep = rep.astype(np.int64)
        for ue, row in zip(ues, rep):
            ue.cqi = row

    def _decodes(self, ue: UeRecord, mcs: int) -> bool:
        truth = ue.base_cqi + self._rng_fading.normal(0.0, self.config.fading_std)
        return mcs <= truth

    def resolve_feedback(self, events: TtiEvents) -> None:
        """Deliver ACK/NACK for processes due now; retransmit or expire on NACK."""
        cfg = self.config
        keep = []
        for p in self.harq:
            if p.feedback_due != self.t:
                keep.append(p)
                continue
            ue = self.ues[p.ue_id]
            if p.will_ack:
                p.status = "acked"
                ue.delivered += p.tb_bits
                ue.inflight_bits -= p.tb_bits
                ue.n_inflight -= 1
                ue.acks += 1
                ue.alpha = olla_update(ue.alpha, True, cfg.olla_step_ack, cfg.olla_step_nack, cfg.olla_bounds)
                events.feedback.append((p.ue_id, p.tb_bits, True, False))
                continue
            p.attempts += 1
            ue.nacks += 1
            ue.alpha = olla_update(ue.alpha, False, cfg.olla_step_ack, cfg.olla_step_nack, cfg.olla_bounds)
            if p.attempts >= cfg.harq_max_attempts:
                p.status = "expired"
                ue.lost += p.tb_bits
                ue.inflight_bits -= p.tb_bits
                ue.n_inflight -= 1
                self.lost_bits += p.tb_bits
                events.feedback.append((p.ue_id, p.tb_bits, False, True))
                continue
            # Retransmission on the same RBGs with the same MCS, decoded afresh.
            p.will_ack = self._decodes(ue, p.mcs)
            p.feedback_due += cfg.harq_feedback_period
            events.feedback.append((p.ue_id, p.tb_bits, False, False))
            keep.append(p)
        self.harq = keep
        for ue in self.ues.values():
            if ue.active and ue.buffer == 0 and ue.n_inflight == 0:
                ue.active = False
                ue.t_departure = self.t
                events.departures.append(ue.id)

    def validate_allocation(self, alloc: Sequence) -> None:
        cfg = self.config
        if len(alloc) != cfg.n_rbgs:
            raise AllocationError(f"allocation has {len(alloc)} entries, expected {cfg.n_rbgs}")
        busy = self.busy_rbgs()
        for k, uid in enumerate(alloc):
            if uid is None:
                continue
            if busy[k]:
                raise AllocationError(f"RBG {k} is busy with a retransmission")
            ue = self.ues.get(uid)
            if ue is None or not ue.active:
                raise AllocationError(f"RBG {k} allocated to inactive UE {uid}")
            if ue.buffer <= 0:
                raise AllocationError(f"RBG {k} allocated to UE {uid} with empty buffer")

    def apply_allocation(self, alloc: Sequence, events: TtiEvents) -> dict[int, int]:
        """Form one TB per scheduled UE and open a HARQ process for it.

        Returns new-TB bits per UE for this TTI.
        """
        self.validate_allocation(alloc)
        cfg = self.config
        grants: dict[int, list[int]] = {}
        for k, uid in enumerate(alloc):
            if uid is not None:
                grants.setdefault(uid, []).append(k)
        sent: dict[int, int] = {}
        for uid in sorted(grants):
            ue = self.ues[uid]
            rbgs = tuple(grants[uid])
            if ue.n_inflight >= cfg.n_harq:
                self.skipped_grants += 1
                events.skipped.append(uid)
                logger.debug("t=%d UE %d has no free HARQ process", self.t, uid)
                continue
            rbs = np.concatenate([ue.cqi[k * cfg.rbs_per_rbg:(k + 1) * cfg.rbs_per_rbg] for k in rbgs])
            levels = olla_offset_cqi(rbs, ue.alpha, cfg.mcs_min, cfg.mcs_max)
            mcs = int(levels.sum()) // len(levels)
            bits = min(self.tb_bits(levels), ue.buffer)
            ue.buffer -= bits
            ue.inflight_bits += bits
            ue.n_inflight += 1
            ue.scheduled_times += 1
            self.harq.append(HarqProcess(
                ue_id=uid, tb_bits=bits, mcs=mcs, rbgs=rbgs, t_first=self.t,
                feedback_due=self.t + cfg.harq_feedback_period,
                will_ack=self._decodes(ue, mcs),
            ))
            sent[uid] = bits
            events.tx.append((uid, bits, mcs, rbgs))
        return sent

    def update_hist_rates(self, sent: dict[int, int], gamma_ma: float) -> None:
        for ue in self.ues.values():
            if ue.active:
                ue.hist_rate = (1.0 - gamma_ma) * ue.hist_rate + gamma_ma * sent.get(ue.id, 0)

    def step(self, alloc: Sequence, gamma_ma: float = 0.1) -> TtiEvents:
        """Advance one TTI under ``alloc`` (computed on the view at the current t)."""
        busy = self.busy_rbgs()
        events = TtiEvents(tti=self.t, alloc=list(alloc), busy=[bool(b) for b in busy])
        self.resolve_feedback(events)
        sent = self.apply_allocation(alloc, events)
        self.update_hist_rates(sent, gamma_ma)
        self.t += 1
        events.arrivals, events.dropped_arrivals = self.spawn_arrivals()
        self.report_cqi()
        return events

    # -- bookkeeping ---------------------------------------------------------

    def conservation_gaps(self) -> dict[int, int]:
        """Per-UE violation of request = delivered + buffer + in-flight + lost.

        In-flight bits are summed from the HARQ registry, independently of the
        per-UE counter.
        """
        inflight: dict[int, int] = {}
        for p in self.harq:
            inflight[p.ue_id] = inflight.get(p.ue_id, 0) + p.tb_bits
        gaps = {}
        for ue in self.ues.values():
            gap = ue.request - (ue.delivered + ue.buffer + inflight.get(ue.id, 0) + ue.lost)
            if gap:
                gaps[ue.id] = gap
        return gaps

    def user_rate(self, ue: UeRecord) -> float:
        end = self.t if ue.t_departure is None else min(self.t, ue.t_departure)
        span = end - ue.t_arrival
        return ue.delivered / span if span > 0 else 0.0

    def sum_user_rate(self) -> float:
        return math.fsum(self.user_rate(ue) for ue in self.ues.values())
