"""FIFO transition replay."""

from __future__ import annotations

import numpy as np

FIELDS = ("s", "s_next", "o", "o_next", "u_prev", "u", "h_prev", "h", "r", "busy_next", "valid_next")


class ReplayBuffer:
    """Fixed-capacity ring buffer of single-step transitions.

    Each transition is ``(s_t, r_t, s_{t+1}, o_t, o_{t+1}, u_{t-1}, u_t,
    h_{t-1}, h_t)`` for all agents, plus the busy flags and selectable-slot
    mask at ``t+1`` needed for the bootstrapped max. Once full, the oldest
    transition is overwritten.
    """

    def __init__(self, capacity: int, n_agents: int, state_dim: int, obs_dim: int, rnn_hidden: int, n_actions: int):
        self.capacity = capacity
        K = n_agents
        self.data = {
            "s": np.zeros((capacity, state_dim)),
            "s_next": np.zeros((capacity, state_dim)),
            "o": np.zeros((capacity, K, obs_dim)),
            "o_next": np.zeros((capacity, K, obs_dim)),
            "u_prev": np.zeros((capacity, K), dtype=np.int64),
            "u": np.zeros((capacity, K), dtype=np.int64),
            "h_prev": np.zeros((capacity, K, rnn_hidden)),
            "h": np.zeros((capacity, K, rnn_hidden)),
            "r": np.zeros(capacity),
            "busy_next": np.zeros((capacity, K), dtype=bool),
            "valid_next": np.zeros((capacity, n_actions), dtype=bool),
        }
        self.size = 0
        self.pos = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, **tr) -> None:
        missing = set(FIELDS) - set(tr)
        if missing:
            raise KeyError(f"transition lacks {sorted(missing)}")
        for k in FIELDS:
            self.data[k][self.pos] = tr[k]
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {k: v[idx] for k, v in self.data.items()}
