"""Decentralised action selection and the learned-scheduler adapter."""

from __future__ import annotations

import numpy as np

from ..schedulers import Scheduler, SchedulerView
from ..simcore import STREAM_EXPLORATION, make_rng
from .features import action_mask, build_all
from .networks import QmixModel, one_hot

NONE = -1


def select_actions(model: QmixModel, obs: np.ndarray, last_actions: np.ndarray, hidden: np.ndarray,
                   valid: np.ndarray, busy: np.ndarray, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy per agent over the selectable user slots.

    Every agent advances its recurrent state. Agents whose RBG is busy, and
    all agents when no slot is selectable, emit ``NONE``.

    Returns ``(actions (K,), new hidden (K,H), q (K,M))``.
    """
    K, M = model.n_agents, model.n_actions
    q, h_new, _ = model.agents.forward(obs[:, None, :], one_hot(last_actions, M)[:, None, :], hidden[:, None, :])
    q, h_new = q[:, 0, :], h_new[:, 0, :]
    actions = np.full(K, NONE, dtype=np.int64)
    slots = np.flatnonzero(valid)
    if slots.size == 0:
        return actions, h_new, q
    masked = np.where(valid[None, :], q, -np.inf)
    for a in range(K):
        explore = rng.random() < epsilon
        if busy[a]:
            continue
        if explore:
            actions[a] = slots[rng.integers(slots.size)]
        else:
            actions[a] = int(np.argmax(masked[a]))
    return actions, h_new, q


def to_allocation(actions: np.ndarray, view: SchedulerView) -> list:
    return [None if u == NONE else int(view.ue_ids[u]) for u in actions]


class MarlScheduler(Scheduler):
    """Runs a trained model as a scheduler (greedy unless ``epsilon > 0``)."""

    def __init__(self, model: QmixModel, epsilon: float = 0.0, seed: int = 0, name: str = "marl"):
        self.model = model
        self.epsilon = epsilon
        self.seed = seed
        self.name = name
        self.reset()

    def reset(self):
        self.hidden = self.model.initial_hidden()
        self.last = np.full(self.model.n_agents, NONE, dtype=np.int64)
        self.rng = make_rng(self.seed, STREAM_EXPLORATION)

    def allocate(self, view: SchedulerView) -> list:
        if view.n_rbgs != self.model.n_agents:
            raise ValueError(f"model has {self.model.n_agents} agents, cell has {view.n_rbgs} RBGs")
        _, obs = build_all(view, self.model.scaler)
        valid = action_mask(view, self.model.n_actions)
        actions, self.hidden, _ = select_actions(self.model, obs, self.last, self.hidden, valid,
                                                 view.busy, self.epsilon, self.rng)
        self.last = actions
        return to_allocation(actions, view)
