"""Baseline RBG schedulers: proportional fair, opportunistic and round robin.

Every scheduler is a deterministic function of a :class:`SchedulerView`
(plus its own queue for round robin). Ties go to the lowest UE id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simcore import CellState, olla_offset_cqi

T_HAT_FLOOR = 1.0


@dataclass(frozen=True)
class SchedulerView:
    """What a scheduler may see at the start of a TTI.

    Rows are the active UEs in ascending id order. ``rate[n, k]`` is the TB
    size UE ``n`` would get on RBG ``k`` alone at its OLLA-offset CQI;
    ``cqi[n, k]`` is the mean reported (un-offset) CQI over RBG ``k``.
    """

    t: int
    ue_ids: np.ndarray
    buffer: np.ndarray
    scheduled: np.ndarray
    hist_rate: np.ndarray
    rsrp: np.ndarray
    alpha: np.ndarray
    harq_free: np.ndarray
    rate: np.ndarray
    cqi: np.ndarray
    busy: np.ndarray

    @property
    def n_ues(self) -> int:
        return len(self.ue_ids)

    @property
    def n_rbgs(self) -> int:
        return len(self.busy)

    @property
    def eligible(self) -> np.ndarray:
        return self.buffer > 0

    @classmethod
    def from_cell(cls, cell: CellState) -> "SchedulerView":
        cfg = cell.config
        ues = cell.active_ues()
        n, K, P = len(ues), cfg.n_rbgs, cfg.rbs_per_rbg
        if n:
            cqi = np.stack([ue.cqi for ue in ues]).reshape(n, K, P)
            alpha = np.array([ue.alpha for ue in ues])
            levels = olla_offset_cqi(cqi, alpha[:, None, None], cfg.mcs_min, cfg.mcs_max)
            mcs = levels.sum(axis=2) // P
            rate = P * cell._se_e4[mcs] * cfg.res_per_rb // 10000
            mean_cqi = cqi.mean(axis=2)
        else:
            alpha = np.zeros(0)
            rate = np.zeros((0, K), dtype=np.int64)
            mean_cqi = np.zeros((0, K))
        return cls(
            t=cell.t,
            ue_ids=np.array([ue.id for ue in ues], dtype=np.int64),
            buffer=np.array([ue.buffer for ue in ues], dtype=np.int64),
            scheduled=np.array([ue.scheduled_times for ue in ues], dtype=np.int64),
            hist_rate=np.array([ue.hist_rate for ue in ues], dtype=np.float64),
            rsrp=np.array([ue.rsrp for ue in ues], dtype=np.float64),
            alpha=alpha,
            harq_free=np.array([cfg.n_harq - ue.n_inflight for ue in ues], dtype=np.int64),
            rate=rate,
            cqi=mean_cqi,
            busy=cell.busy_rbgs().copy(),
        )


@dataclass(frozen=True)
class PfParams:
    alpha1: float = 1.0
    alpha2: float = 1.0
    gamma_ma: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.gamma_ma <= 1.0:
            raise ValueError("gamma_ma must lie in (0, 1]")


def _argmax_per_rbg(view: SchedulerView, score: np.ndarray) -> list:
    alloc = [None] * view.n_rbgs
    if view.n_ues == 0:
        return alloc
    ok = view.eligible
    if not ok.any():
        return alloc
    score = np.where(ok[:, None], score, -np.inf)
    best = np.argmax(score, axis=0)  # first maximum = lowest id
    for k in range(view.n_rbgs):
        if not view.busy[k]:
            alloc[k] = int(view.ue_ids[best[k]])
    return alloc


def pf_priorities(view: SchedulerView, p: PfParams) -> np.ndarray:
    t_hat = np.maximum(view.hist_rate, T_HAT_FLOOR)
    return view.rate.astype(np.float64) ** p.alpha1 / (t_hat ** p.alpha2)[:, None]


def pf_allocate(view: SchedulerView, p: PfParams) -> list:
    """Give each free RBG to the eligible UE with the largest R^a1 / T_hat^a2."""
    return _argmax_per_rbg(view, pf_priorities(view, p))


def pf_update_ma(t_hat: float, t_prev: float, gamma_ma: float) -> float:
    return (1.0 - gamma_ma) * t_hat + gamma_ma * t_prev


def op_allocate(view: SchedulerView) -> list:
    """Give each free RBG to the eligible UE with the highest estimated rate."""
    return _argmax_per_rbg(view, view.rate.astype(np.float64))


def rrf_allocate(view: SchedulerView, queue: list) -> tuple[list, list]:
    """Round robin: all free RBGs go to the first backlogged UE in the queue.

    The queue is first synchronised with the view (departed UEs removed in
    order, new UEs appended by id). UEs skipped for an empty buffer rotate to
    the tail together with the served UE.
    """
    present = set(int(u) for u in view.ue_ids)
    queue = [u for u in queue if u in present]
    known = set(queue)
    queue += [int(u) for u in view.ue_ids if int(u) not in known]
    alloc = [None] * view.n_rbgs
    free = [k for k in range(view.n_rbgs) if not view.busy[k]]
    if not queue or not free:
        return alloc, queue
    buffer = dict(zip((int(u) for u in view.ue_ids), view.buffer))
    for pos, uid in enumerate(queue):
        if buffer[uid] > 0:
            for k in free:
                alloc[k] = uid
            return alloc, queue[pos + 1:] + queue[:pos + 1]
    return alloc, queue


class Scheduler:
    """Common interface: ``reset()`` at episode start, ``allocate(view)`` per TTI."""

    name = "scheduler"

    def reset(self) -> None:
        pass

    def allocate(self, view: SchedulerView) -> list:
        raise NotImplementedError


class ProportionalFair(Scheduler):
    def __init__(self, alpha1: float = 1.0, alpha2: float = 1.0, gamma_ma: float = 0.1, name=None):
        self.params = PfParams(alpha1, alpha2, gamma_ma)
        self.name = name or f"pf(a1={alpha1:g},a2={alpha2:g})"

    def allocate(self, view):
        return pf_allocate(view, self.params)


class Opportunistic(Scheduler):
    name = "op"

    def allocate(self, view):
        return op_allocate(view)


class RoundRobin(Scheduler):
    name = "rrf"

    def __init__(self):
        self.queue: list = []

    def reset(self):
        self.queue = []

    def allocate(self, view):
        alloc, self.queue = rrf_allocate(view, self.queue)
        return alloc
