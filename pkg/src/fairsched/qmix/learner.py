"""TD learning for the mixed Q-function and the episode training loop."""

from __future__ import annotations

import dataclasses
import logging
import statistics
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..neuro import SGD, TrainingDiverged, keep_heap_pages
from ..schedulers import SchedulerView
from ..simcore import STREAM_EXPLORATION, STREAM_INIT, STREAM_REPLAY, CellConfig, CellState, make_rng
from .acting import select_actions, to_allocation
from .features import (FeatureScaler, RewardTracker, action_mask, build_all, default_delta_norm,
                       obs_dim, state_dim)
from .networks import QmixModel, one_hot
from .replay import ReplayBuffer

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    episode_length: int = 1000
    lr: float = 1e-3
    lr_decay: float = 1e-7
    n_batches: int = 10
    batch_size: int = 256
    replay_capacity: int = 2000
    epsilon: float = 1e-2
    gamma: float = 0.9
    target_update: int = 200       # TD steps between target refreshes; 0 disables the target copy
    mode: str = "distributional"
    hidden: int = 64
    rnn_hidden: int = 64
    mix_hidden: int = 32
    grad_clip: Optional[float] = 10.0
    delta_norm: Optional[float] = None
    gamma_ma: float = 0.1
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("distributional", "centralized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size exceeds replay capacity")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def td_targets(target: QmixModel, batch: dict, gamma: float) -> np.ndarray:
    """r + gamma * max_u' Q_tot(s', u').

    The joint max is taken agent by agent over selectable slots, which is
    exact because the mixer is monotone in every agent's value.
    """
    M = target.n_actions
    o_next = batch["o_next"].transpose(1, 0, 2)
    u = batch["u"].T
    h = batch["h"].transpose(1, 0, 2)
    qn, _, _ = target.agents.forward(o_next, one_hot(u, M), h)
    valid = batch["valid_next"][None]
    best = np.where(valid, qn, -np.inf).max(axis=-1)
    take = valid.any(axis=-1) & ~batch["busy_next"].T
    best = np.where(take, best, 0.0)
    q_next, _ = target.mixer.forward(best.T, batch["s_next"])
    return batch["r"] + gamma * q_next


def td_loss(model: QmixModel, batch: dict, y: np.ndarray, backward: bool = True) -> float:
    """Sum of squared TD errors; with ``backward`` also fills parameter grads."""
    M = model.n_actions
    o = batch["o"].transpose(1, 0, 2)
    u_prev = batch["u_prev"].T
    h_prev = batch["h_prev"].transpose(1, 0, 2)
    q, _, cache = model.agents.forward(o, one_hot(u_prev, M), h_prev)
    u = batch["u"].T
    act = u >= 0
    uc = np.where(act, u, 0)[..., None]
    chosen = np.take_along_axis(q, uc, axis=-1)[..., 0] * act
    q_tot, mcache = model.mixer.forward(chosen.T, batch["s"])
    err = q_tot - y
    loss = float(err @ err)
    if backward:
        dchosen = model.mixer.backward(2.0 * err, mcache).T * act
        dq = np.zeros_like(q)
        np.put_along_axis(dq, uc, dchosen[..., None], axis=-1)
        model.agents.backward(dq, cache)
    return loss


def td_train_step(model: QmixModel, batch: dict, gamma: float, optimizer: SGD,
                  target: Optional[QmixModel] = None) -> float:
    """One SGD step on a minibatch; the target side is held constant."""
    y = td_targets(target if target is not None else model, batch, gamma)
    optimizer.zero_grad()
    loss = td_loss(model, batch, y)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite TD loss {loss}")
    optimizer.step()
    return loss


def episode_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def build_model(cell_cfg: CellConfig, tcfg: TrainConfig) -> QmixModel:
    return QmixModel(
        n_agents=cell_cfg.n_rbgs, n_actions=cell_cfg.max_users, state_dim=state_dim(cell_cfg.n_rbgs),
        obs_dim=obs_dim(), scaler=FeatureScaler.for_cell(cell_cfg, tcfg.episode_length),
        rng=make_rng(tcfg.seed, STREAM_INIT), mode=tcfg.mode, hidden=tcfg.hidden,
        rnn_hidden=tcfg.rnn_hidden, mix_hidden=tcfg.mix_hidden,
    )


@dataclass
class TrainResult:
    model: QmixModel
    history: list        # one dict per epoch
    losses: list         # per epoch: list of TD losses
    rewards: list        # per epoch: list of per-TTI rewards


class Learner:
    """Owns the online/target models, optimiser, replay and RNG streams."""

    def __init__(self, cell_cfg: CellConfig, tcfg: TrainConfig, model: Optional[QmixModel] = None):
        keep_heap_pages()
        self.cell_cfg = cell_cfg
        self.cfg = tcfg
        self.model = model if model is not None else build_model(cell_cfg, tcfg)
        self.target = self.model.copy() if tcfg.target_update > 0 else None
        self.opt = SGD(self.model.params(), lr=tcfg.lr, decay=tcfg.lr_decay, clip_norm=tcfg.grad_clip)
        self.replay = ReplayBuffer(tcfg.replay_capacity, cell_cfg.n_rbgs, self.model.arch["state_dim"],
                                   self.model.arch["obs_dim"], tcfg.rnn_hidden, cell_cfg.max_users)
        self.rng_replay = make_rng(tcfg.seed, STREAM_REPLAY)
        self.rng_explore = make_rng(tcfg.seed, STREAM_EXPLORATION)
        self.delta_norm = tcfg.delta_norm or default_delta_norm(cell_cfg)
        self.updates = 0

    def train_step(self) -> float:
        batch = self.replay.sample(self.rng_replay, self.cfg.batch_size)
        loss = td_train_step(self.model, batch, self.cfg.gamma, self.opt, self.target)
        self.updates += 1
        if self.target is not None and self.updates % self.cfg.target_update == 0:
            self.target.load_state(self.model)
        return loss

    def run_epoch(self, epoch: int, on_update: Optional[Callable] = None, checkpoint=None):
        cfg, model = self.cfg, self.model
        M = model.n_actions
        cell = CellState.reset(self.cell_cfg, episode_seed(cfg.seed, epoch))
        tracker = RewardTracker(self.delta_norm)
        view = SchedulerView.from_cell(cell)
        s, o = build_all(view, model.scaler)
        hidden = model.initial_hidden()
        last = np.full(model.n_agents, -1, dtype=np.int64)
        losses, rewards = [], []
        for _ in range(cfg.episode_length):
            valid = action_mask(view, M)
            u, h_new, _ = select_actions(model, o, last, hidden, valid, view.busy, cfg.epsilon, self.rng_explore)
            cell.step(to_allocation(u, view), cfg.gamma_ma)
            r = tracker(cell)
            view = SchedulerView.from_cell(cell)
            s_next, o_next = build_all(view, model.scaler)
            self.replay.add(s=s, s_next=s_next, o=o, o_next=o_next, u_prev=last, u=u, h_prev=hidden,
                            h=h_new, r=r, busy_next=view.busy, valid_next=action_mask(view, M))
            rewards.append(r)
            if len(self.replay) >= cfg.batch_size:
                for _ in range(cfg.n_batches):
                    loss = self.train_step()
                    losses.append(loss)
                    if on_update is not None:
                        on_update(self)
                    if loss > cfg.divergence_threshold:
                        if checkpoint is not None:
                            model.save(checkpoint)
                        raise TrainingDiverged(f"TD loss {loss:.3g} above threshold at epoch {epoch}")
            s, o, hidden, last = s_next, o_next, h_new, u
        return losses, rewards


def train(cell_cfg: CellConfig, tcfg: TrainConfig, on_epoch: Optional[Callable] = None,
          on_update: Optional[Callable] = None, checkpoint=None) -> TrainResult:
    """Train a QMIX scheduler for ``tcfg.epochs`` simulated episodes.

    ``on_epoch(record)`` receives each per-epoch log record; ``on_update``
    is called with the learner after every TD step. If training diverges the
    current model is written to ``checkpoint`` before raising.
    """
    learner = Learner(cell_cfg, tcfg)
    history, all_losses, all_rewards = [], [], []
    for epoch in range(tcfg.epochs):
        losses, rewards = learner.run_epoch(epoch, on_update, checkpoint)
        rec = {
            "epoch": epoch + 1,
            "episode_reward": float(sum(rewards)),
            "mean_loss": float(np.mean(losses)) if losses else None,
            "median_loss": float(statistics.median(losses)) if losses else None,
            "lr": learner.opt.lr,
            "epsilon": tcfg.epsilon,
            "updates": learner.updates,
        }
        history.append(rec)
        all_losses.append(losses)
        all_rewards.append(rewards)
        logger.info("epoch %d reward %.3f loss %s", rec["epoch"], rec["episode_reward"], rec["mean_loss"])
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(learner.model, history, all_losses, all_rewards)
