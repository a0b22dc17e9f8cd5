"""Acceptance checks, one test per criterion, each reporting a PASS/FAIL line.

The training criterion trains both agent-sharing modes for 20 epochs and
takes the better part of an hour on a single core; everything else runs in
a few minutes.
"""

import itertools
import math
import shutil
import time

import numpy as np
import pytest

from conftest import RandomScheduler, episode_lines, record_criterion
from fairsched import cli, harness
from fairsched.metrics import audr, five_tile, jain_index, residence_stats, user_rates
from fairsched.neuro import (GRUCell, Linear, abs_, abs_backward, elu, elu_backward, relu, relu_backward, sigmoid,
                             sigmoid_backward, tanh_backward)
from fairsched.qmix import (MarlScheduler, QmixModel, TrainConfig, reward_from_delta, td_loss, td_targets,
                            train)
from fairsched.qmix.features import FeatureScaler
from fairsched.qmix.networks import Mixer
from fairsched.schedulers import (PfParams, RoundRobin, SchedulerView, op_allocate, pf_allocate,
                                  rrf_allocate)
from fairsched.simcore import CellConfig, CellState, tb_bits
from oracles import TraceWalker, finite_diff, tb_bits_exact

CFG = CellConfig()
SE = CFG.se_e4()
TRAIN_EPOCHS = 20
TIME_LIMIT_S = 30 * 60


def fd_rel_err(loss, x, analytic):
    fd = np.array(finite_diff(loss, x)).reshape(x.shape)
    return float(np.abs(fd - analytic).max() / max(1e-6, np.abs(fd).max()))


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_01_metrics_oracle():
    t0 = time.perf_counter()
    specs = ["rrf", "pf1", "pf2", "op", RandomScheduler(11)]
    mismatches, checked = [], 0
    for spec in specs:
        for seed in range(20):
            lines, res = episode_lines(spec, 1000 + seed)
            walk, led = TraceWalker(lines), res.ledger
            rs = residence_stats(led, 1000)
            got = (audr(led, 1000), five_tile(led, 1000), jain_index(user_rates(led, 1000)),
                   rs.residence, rs.transmission)
            want = (walk.audr(1000), walk.five_tile(1000), walk.jain(1000),
                    walk.residence(1000), walk.transmission(1000))
            checked += 1
            if got != want:
                mismatches.append((getattr(spec, "name", spec), seed, got, want))
    dt = time.perf_counter() - t0
    ok = not mismatches and dt < 60
    record_criterion(1, ok, f"{checked} traces bit-equal to walker, {len(mismatches)} mismatches, {dt:.1f}s")
    assert not mismatches
    assert dt < 60


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_02_tb_formation():
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(50):
        n = int(rng.integers(1, 25))
        levels = [int(x) for x in rng.integers(1, 30, size=n)]
        bad += tb_bits(levels, SE) != tb_bits_exact(levels, CFG.se_table)
    record_criterion(2, bad == 0, f"50 random G sets, {bad} mismatches against exact rational oracle")
    assert bad == 0


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_03_monotonicity():
    rng = np.random.default_rng(3)
    worst = math.inf
    eps = 1e-6
    for i in range(100):
        mixer = Mixer(64, 3, np.random.default_rng(i), 32)
        s = rng.random((1, 64))
        q = rng.normal(0, 5, size=(1, 3))
        for a in range(3):
            up, dn = q.copy(), q.copy()
            up[0, a] += eps
            dn[0, a] -= eps
            g = (mixer.forward(up, s)[0][0] - mixer.forward(dn, s)[0][0]) / (2 * eps)
            worst = min(worst, g)
    record_criterion(3, worst >= -1e-9, f"min dQtot/dQa over 100 draws x 3 agents = {worst:.3e}")
    assert worst >= -1e-9


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_04_argmax_consistency():
    rng = np.random.default_rng(4)
    joint = np.array(list(itertools.product(range(4), repeat=3)))
    bad = 0
    for i in range(100):
        mixer = Mixer(64, 3, np.random.default_rng(100 + i), 32)
        q = rng.normal(size=(3, 4))
        s = np.repeat(rng.random((1, 64)), len(joint), axis=0)
        vals = mixer.forward(q[np.arange(3), joint], s)[0]
        bad += tuple(joint[int(np.argmax(vals))]) != tuple(q.argmax(axis=1))
    record_criterion(4, bad == 0, f"100 random models, 64-way enumeration, {bad} disagreements")
    assert bad == 0


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_05_gradients():
    rng = np.random.default_rng(5)
    errs = {}
    x = rng.normal(0, 2, 40)
    x = x[np.abs(x) > 1e-3]
    w = rng.normal(size=x.size)
    for name, f, b in (("sigmoid", sigmoid, sigmoid_backward), ("tanh", np.tanh, tanh_backward),
                       ("elu", elu, elu_backward), ("relu", relu, relu_backward), ("abs", abs_, abs_backward)):
        errs[name] = fd_rel_err(lambda: float(w @ f(x)), x, b(w, x))
    for shared in (False, True):
        lin = Linear(7, 5, rng, groups=1 if shared else 3)
        xin, wy = rng.normal(size=(3, 4, 7)), rng.normal(size=(3, 4, 5))
        dx = lin.backward(wy, lin.forward(xin)[1])
        loss = lambda: float(np.sum(wy * lin.forward(xin)[0]))
        errs[f"linear{'-shared' if shared else ''}"] = max(
            [fd_rel_err(loss, p.value, p.grad) for p in lin.params()] + [fd_rel_err(loss, xin, dx)])
        gru = GRUCell(8, 8, rng, groups=1 if shared else 3)
        xin, h, wy = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 4, 8))
        dx, dh = gru.backward(wy, gru.forward(xin, h)[1])
        loss = lambda: float(np.sum(wy * gru.forward(xin, h)[0]))
        errs[f"gru{'-shared' if shared else ''}"] = max(
            [fd_rel_err(loss, p.value, p.grad) for p in gru.params()]
            + [fd_rel_err(loss, xin, dx), fd_rel_err(loss, h, dh)])
    layer_worst = max(errs.values())

    # end to end: TD loss through the mixer and agent networks
    model = QmixModel(3, 10, 64, 36, FeatureScaler.for_cell(CFG), np.random.default_rng(0),
                      hidden=8, rnn_hidden=8, mix_hidden=6)
    B = 10
    batch = {"s": rng.random((B, 64)), "s_next": rng.random((B, 64)), "o": rng.random((B, 3, 36)),
             "o_next": rng.random((B, 3, 36)), "u_prev": rng.integers(-1, 10, (B, 3)),
             "u": rng.integers(-1, 10, (B, 3)), "h_prev": rng.normal(0, .5, (B, 3, 8)),
             "h": rng.normal(0, .5, (B, 3, 8)), "r": -rng.random(B), "busy_next": rng.random((B, 3)) < .2,
             "valid_next": rng.random((B, 10)) < .7}
    y = td_targets(model.copy(), batch, 0.9)
    td_loss(model, batch, y)
    e2e = 0.0
    for p in model.params():
        flat, g = p.value.reshape(-1), p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = td_loss(model, batch, y, backward=False)
            flat[i] = old - 1e-5
            dn = td_loss(model, batch, y, backward=False)
            flat[i] = old
            fd = (up - dn) / 2e-5
            if abs(fd) > 1e-7:
                e2e = max(e2e, abs(fd - g[i]) / abs(fd))
    ok = layer_worst <= 1e-4 and e2e <= 1e-3
    record_criterion(5, ok, f"worst layer rel. err {layer_worst:.2e} (<=1e-4), end-to-end {e2e:.2e} (<=1e-3)")
    assert layer_worst <= 1e-4
    assert e2e <= 1e-3


# -- 11 (shared by 6 and 13) -----------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    out = {}
    for mode in ("distributional", "centralized"):
        tcfg = TrainConfig(epochs=TRAIN_EPOCHS, mode=mode, seed=0)
        shared_ok = [True]

        def check_blocks(learner):
            blocks = learner.model.agents.blocks()
            for other in blocks[1:]:
                if not all(np.array_equal(a, b) for a, b in zip(blocks[0], other)):
                    shared_ok[0] = False

        t0 = time.perf_counter()
        res = train(CFG, tcfg, on_update=check_blocks if mode == "centralized" else None)
        out[mode] = dict(result=res, seconds=time.perf_counter() - t0, shared_ok=shared_ok[0])
    return out


def test_criterion_11_training_smoke(trained):
    lines, ok = [], True
    for mode, run in trained.items():
        res = run["result"]
        first = float(np.median(res.losses[0] + res.losses[1]))
        last = float(np.median(res.losses[-2] + res.losses[-1]))
        fast = run["seconds"] < TIME_LIMIT_S
        progress = last < first
        shared = run["shared_ok"] if mode == "centralized" else True
        ok &= fast and progress and shared
        lines.append(f"{mode}: {run['seconds'] / 60:.1f} min, median loss first2 {first:.4g} -> last2 {last:.4g}"
                     + (f", blocks identical after every update: {shared}" if mode == "centralized" else ""))
    record_criterion(11, ok, "; ".join(lines))
    for mode, run in trained.items():
        res = run["result"]
        assert np.median(res.losses[-2] + res.losses[-1]) < np.median(res.losses[0] + res.losses[1]), mode
    assert trained["centralized"]["shared_ok"]
    assert all(run["seconds"] < TIME_LIMIT_S for run in trained.values()), \
        {m: round(r["seconds"] / 60, 1) for m, r in trained.items()}


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_06_reward_contract(trained):
    rs = np.array([r for run in trained.values() for ep in run["result"].rewards for r in ep])
    in_range = bool(np.all((rs > -1) & (rs < 0)))
    zero = reward_from_delta(0.0, 123.0) == -0.5
    grid = np.linspace(-5e4, 5e4, 2001)
    vals = [reward_from_delta(d, 1e4) for d in grid]
    mono = all(b <= a for a, b in zip(vals, vals[1:])) and vals[0] > vals[-1]
    ok = in_range and zero and mono
    record_criterion(6, ok, f"{rs.size} training rewards in (-1,0): {in_range}; r(0) = -0.5: {zero}; "
                            f"non-increasing on 2001-point grid: {mono}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def _view(rate, hist, buffer=None, busy=None):
    rate = np.asarray(rate, dtype=np.int64)
    n, k = rate.shape
    return SchedulerView(0, np.arange(1, n + 1), np.asarray(buffer or [9] * n, dtype=np.int64),
                         np.zeros(n, np.int64), np.asarray(hist, float), np.zeros(n), np.zeros(n),
                         np.full(n, 8), rate, np.zeros((n, k)), np.asarray(busy or [False] * k))


def test_criterion_07_scheduler_conformance():
    checks = {}
    checks["pf fixture"] = pf_allocate(_view([[100], [200]], [50, 50]), PfParams()) == [2]
    checks["alpha1=0 argmin T"] = pf_allocate(_view([[900, 5], [1, 1], [400, 400]], [30, 20, 40]),
                                              PfParams(0.0, 1.0)) == [2, 2]
    checks["ties"] = pf_allocate(_view([[7, 7]] * 3, [5, 5, 5]), PfParams()) == [1, 1]
    rng = np.random.default_rng(7)
    same = True
    for _ in range(500):
        n, k = rng.integers(1, 8), rng.integers(1, 6)
        v = _view(rng.integers(0, 3000, (n, k)), rng.uniform(0, 500, n), list(rng.integers(0, 3, n)),
                  list(rng.random(k) < .3))
        same &= pf_allocate(v, PfParams(1.0, 0.0)) == op_allocate(v)
    checks["alpha1=1,alpha2=0 == OP"] = same
    checks["op fixture"] = op_allocate(_view([[100], [200]], [0, 0])) == [2]
    alloc, q = rrf_allocate(_view([[1, 1]] * 3, [0] * 3), [1, 2, 3])
    alloc2, _ = rrf_allocate(_view([[1, 1]] * 3, [0] * 3), q)
    checks["rrf order"] = alloc == [1, 1] and alloc2 == [2, 2]

    # rotation over 300 TTIs with three persistent users and no retransmissions
    cfg = CellConfig(fading_std=0.0, cqi_offset_range=(0.0, 0.0), olla_step_ack=0.0, full_buffer=True,
                     initial_users=3, arrival_rate=0.0)
    cell, rr, served = CellState.reset(cfg, 0), RoundRobin(), []
    for _ in range(300):
        a = rr.allocate(SchedulerView.from_cell(cell))
        served.append(a[0])
        cell.step(a)
    checks["rrf rotation"] = all(sorted(served[i:i + 3]) == [1, 2, 3] for i in range(0, 300, 3))
    failed = [k for k, v in checks.items() if not v]
    record_criterion(7, not failed, f"{len(checks)} checks, failed: {failed or 'none'}")
    assert not failed


# -- 8 ---------------------------------------------------------------------------------

def _ack_ratio(cfg, seed=8, T=10 ** 4):
    cell = CellState.reset(cfg, seed)
    sched = harness.make_scheduler("pf1", cfg)
    acks = total = 0
    for _ in range(T):
        ev = cell.step(sched.allocate(SchedulerView.from_cell(cell)))
        for _, _, ack, _ in ev.feedback:
            acks += ack
            total += 1
    return acks / total


def force_nack(ue, cfg):
    """Report the top CQI for a UE whose channel only supports the lowest level."""
    ue.base_cqi, ue.cqi = 1, np.full(cfg.n_rbs, cfg.mcs_max)


def test_criterion_08_system_model():
    checks = {}
    quiet = CellConfig(fading_std=0.0, cqi_offset_range=(0.0, 0.0))

    # expiry after exactly five NACKs
    cell = CellState.reset(quiet, 0)
    u = cell.active_ues()[0]
    force_nack(u, quiet)
    t0 = cell.t
    cell.step([u.id, None, None])
    fb = []
    for _ in range(60):
        ev = cell.step([None] * 3)
        fb += [(ev.tti, f) for f in ev.feedback if f[0] == u.id]
    checks["expiry after 5 NACKs"] = ([t for t, _ in fb] == [t0 + 8 * i for i in range(1, 6)]
                                      and [f[3] for _, f in fb] == [False] * 4 + [True] and u.nacks == 5)

    # at most eight processes
    cfg = CellConfig(fading_std=0.0, cqi_offset_range=(0.0, 0.0), full_buffer=True)
    cell = CellState.reset(cfg, 0)
    u = cell.active_ues()[0]
    peak = skipped = 0
    for _ in range(200):
        force_nack(u, cfg)
        k = cell.t % 3
        alloc = [None] * 3
        if not cell.busy_rbgs()[k]:
            alloc[k] = u.id
        skipped += cell.step(alloc).skipped.count(u.id)
        peak = max(peak, u.n_inflight)
    checks["<= 8 processes"] = peak == 8 and skipped > 0

    # conservation at every TTI of every scheduler trace
    gaps = 0
    for spec in ("rrf", "pf1", "pf2", "op"):
        for seed in range(3):
            cell, sched = CellState.reset(CFG, seed), harness.make_scheduler(spec, CFG)
            for _ in range(1000):
                cell.step(sched.allocate(SchedulerView.from_cell(cell)))
                gaps += len(cell.conservation_gaps())
    checks["conservation"] = gaps == 0

    biased = dict(cqi_offset_range=(2.0, 2.0), fading_std=0.5)
    with_olla = _ack_ratio(CellConfig(**biased))
    without = _ack_ratio(CellConfig(**biased, olla_step_ack=0.0, olla_step_nack=0.0))
    checks["OLLA compensation"] = with_olla >= without
    failed = [k for k, v in checks.items() if not v]
    record_criterion(8, not failed, f"peak processes {peak}, conservation gaps {gaps}, "
                                    f"ACK ratio with OLLA {with_olla:.3f} vs without {without:.3f}; "
                                    f"failed: {failed or 'none'}")
    assert not failed


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_09_arrivals():
    T = 10 ** 5
    cell = CellState.reset(CFG, 9)
    sched = harness.make_scheduler("pf1", CFG)
    n = 0
    for _ in range(T):
        ev = cell.step(sched.allocate(SchedulerView.from_cell(cell)))
        n += len(ev.arrivals) + ev.dropped_arrivals
    lam = CFG.arrival_rate
    sigma = math.sqrt(lam / T)
    z = (n / T - lam) / sigma
    record_criterion(9, abs(z) <= 3, f"{n} arrivals in {T} TTIs, rate {n / T:.5f} vs {lam}, z = {z:+.2f}")
    assert abs(z) <= 3


# -- 10 --------------------------------------------------------------------------------

def _snapshot(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text('{"train": {"batch_size": 16, "replay_capacity": 32, "n_batches": 2, "hidden": 8,'
                       ' "rnn_hidden": 8, "mix_hidden": 4}}')
    ck = "marl:" + str(tmp_path / "train" / "qmix_distributional_{n_rbgs}rbg.ckpt")
    common = ["--seeds", "0-2", "--episode-length", "200"]
    commands = {
        "train": ["train", "--config", cfgfile, "--epochs", "2", "--episode-length", "60"],
        "eval": ["eval", *common, "--schedulers", f"{ck},pf1,rrf", "--traces"],
        "sweep-pf": ["sweep-pf", *common, "--grid", "0,0.5,1"],
        "compare": ["compare", *common, "--schedulers", f"{ck},pf1,pf2,rrf"],
        "analyze": ["analyze", *common, "--schedulers", "rrf,op", "--snapshots", "1,3"],
    }
    differing = []
    for name, args in commands.items():
        out = tmp_path / name
        assert cli.main([str(a) for a in args] + ["--out", str(out)]) == 0
        first = _snapshot(out)
        shutil.rmtree(out)
        assert cli.main([str(a) for a in args] + ["--out", str(out)]) == 0
        second = _snapshot(out)
        if first != second:
            differing.append(name)
    record_criterion(10, not differing, f"{len(commands)} subcommands rerun, byte-identical outputs; "
                                        f"differing: {differing or 'none'}")
    assert not differing


# -- 12 --------------------------------------------------------------------------------

def test_criterion_12_pf_sweep():
    ex = harness.ExperimentConfig(seeds=list(range(100)))
    curve, _ = harness.pf_sweep(ex)
    pf = {round(c["alpha1"], 2): c["mean_5tudr"] for c in curve if c["scheduler"] == "pf"}
    ref = {c["scheduler"]: c["mean_5tudr"] for c in curve if c["scheduler"] != "pf"}
    ok = pf[0.5] >= pf[0.0]
    shown = ", ".join(f"{a:g}:{pf[a]:.1f}" for a in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0))
    record_criterion(12, ok, f"mean 5TUDR over 100 seeds, a1=0.5 {pf[0.5]:.1f} vs a1=0 {pf[0.0]:.1f}; "
                             f"curve {shown}; rrf {ref['rrf']:.1f}, op {ref['op']:.1f}")
    print(harness.to_csv(curve))
    assert ok


# -- 13 (non-gating) -------------------------------------------------------------------

def test_criterion_13_marl_vs_rrf_stretch(trained):
    model = trained["distributional"]["result"].model
    seeds = range(100)
    marl = [harness.run_episode(CFG, MarlScheduler(model), s, 1000).kpis["5tudr"] for s in seeds]
    rrf = [harness.run_episode(CFG, RoundRobin(), s, 1000).kpis["5tudr"] for s in seeds]
    diff = float(np.mean(np.subtract(marl, rrf)))
    ok = diff >= 0
    record_criterion(13, ok, f"non-gating: mean 5TUDR MARL {np.mean(marl):.1f} vs RRF {np.mean(rrf):.1f} "
                             f"(diff {diff:+.1f}) over 100 seeds")
    if not ok:
        pytest.xfail("non-gating stretch check: trained MARL below RRF on mean 5TUDR")
