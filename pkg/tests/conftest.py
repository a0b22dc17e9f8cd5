import numpy as np
import pytest

from fairsched import harness, trace
from fairsched.schedulers import Scheduler
from fairsched.simcore import CellConfig


class RandomScheduler(Scheduler):
    """Uniform choice among backlogged UEs per free RBG; for null tests."""

    name = "random"

    def __init__(self, seed=0):
        self.seed = seed
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.seed)

    def allocate(self, view):
        ok = np.flatnonzero(view.buffer > 0)
        alloc = [None] * view.n_rbgs
        if ok.size == 0:
            return alloc
        for k in range(view.n_rbgs):
            pick = int(view.ue_ids[ok[self.rng.integers(ok.size)]])
            alloc[k] = None if view.busy[k] else pick
        return alloc


def episode_lines(spec, seed, T=1000, cfg=None):
    cfg = cfg or CellConfig()
    sched = spec if isinstance(spec, Scheduler) else harness.make_scheduler(spec, cfg)
    res = harness.run_episode(cfg, sched, seed, T, keep_trace=True, label=getattr(sched, "name", str(spec)))
    return [trace.dumps(r) for r in res.records], res


@pytest.fixture
def default_cfg():
    return CellConfig()


ACCEPTANCE = {}   # criterion number -> (passed, detail)


def record_criterion(n, passed, detail):
    ACCEPTANCE[n] = (bool(passed), detail)
    print(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
