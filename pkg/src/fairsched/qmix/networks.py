"""Recurrent agent Q-networks and the monotonic hypernetwork mixer."""

from __future__ import annotations

import numpy as np

from .. import neuro
from ..neuro import GRUCell, Linear, Param
from .features import FeatureScaler

CHECKPOINT_FORMAT = "fairsched-qmix"
CHECKPOINT_VERSION = 1


def one_hot(actions: np.ndarray, n: int) -> np.ndarray:
    """One-hot over ``n`` slots; negative entries ("none") map to all zeros."""
    actions = np.asarray(actions)
    out = np.zeros(actions.shape + (n,))
    idx = np.nonzero(actions >= 0)
    out[idx + (actions[idx],)] = 1.0
    return out


class AgentNetwork:
    """Linear -> ReLU -> GRU -> Linear, one block per agent or one shared block.

    Inputs are the local observation concatenated with the one-hot previous
    action; the output is one Q-value per user slot (``max_users`` slots).
    """

    def __init__(self, n_agents: int, obs_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden: int = 64, rnn_hidden: int = 64, shared: bool = False):
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        self.hidden, self.rnn_hidden, self.shared = hidden, rnn_hidden, shared
        g = 1 if shared else n_agents
        self.fc1 = Linear(obs_dim + n_actions, hidden, rng, groups=g, name="agent.fc1")
        self.rnn = GRUCell(hidden, rnn_hidden, rng, groups=g, name="agent.gru")
        self.head = Linear(rnn_hidden, n_actions, rng, groups=g, name="agent.head")

    def params(self) -> list[Param]:
        return self.fc1.params() + self.rnn.params() + self.head.params()

    def param_count_per_agent(self) -> int:
        return (neuro.linear_param_count(self.obs_dim + self.n_actions, self.hidden)
                + neuro.gru_param_count(self.hidden, self.rnn_hidden)
                + neuro.linear_param_count(self.rnn_hidden, self.n_actions))

    def forward(self, obs, last_onehot, h):
        """obs (K,B,obs), last_onehot (K,B,M), h (K,B,H) -> q (K,B,M), h', cache."""
        x = np.concatenate([obs, last_onehot], axis=-1)
        a1, c1 = self.fc1.forward(x)
        z1 = neuro.relu(a1)
        h_new, c2 = self.rnn.forward(z1, h)
        q, c3 = self.head.forward(h_new)
        return q, h_new, (c1, a1, c2, c3)

    def backward(self, dq, cache) -> None:
        c1, a1, c2, c3 = cache
        dh_new = self.head.backward(dq, c3)
        # stored hidden states and observations are inputs, not parameters
        dz1, _ = self.rnn.backward(dh_new, c2, need_dh=False)
        self.fc1.backward(neuro.relu_backward(dz1, a1), c1, need_dx=False)

    def blocks(self) -> list[list[np.ndarray]]:
        """Per-agent parameter arrays (views of the shared block when shared)."""
        return [[p.value[0 if self.shared else a] for p in self.params()] for a in range(self.n_agents)]


def mix(q, W1, B1, W2, B2):
    """Q_tot = W2 . elu(W1 Q + B1) + B2 with W1 (B,K,m), B1 (B,m), W2 (B,m), B2 (B,)."""
    pre = np.einsum("bk,bkm->bm", q, W1) + B1
    return np.sum(neuro.elu(pre) * W2, axis=-1) + B2


class Mixer:
    """Mixing network whose weights come from hypernetworks of the global state.

    Weight heads pass through an absolute value, so Q_tot is monotone
    non-decreasing in every agent's Q. The final bias is a two-layer map with
    a rectifier in between.
    """

    def __init__(self, state_dim: int, n_agents: int, rng: np.random.Generator, mix_hidden: int = 32):
        self.state_dim, self.n_agents, self.m = state_dim, n_agents, mix_hidden
        self.w1 = Linear(state_dim, n_agents * mix_hidden, rng, name="hyper.w1")
        self.b1 = Linear(state_dim, mix_hidden, rng, name="hyper.b1")
        self.w2 = Linear(state_dim, mix_hidden, rng, name="hyper.w2")
        self.b2a = Linear(state_dim, mix_hidden, rng, name="hyper.b2a")
        self.b2b = Linear(mix_hidden, 1, rng, name="hyper.b2b")

    def params(self) -> list[Param]:
        return (self.w1.params() + self.b1.params() + self.w2.params()
                + self.b2a.params() + self.b2b.params())

    def param_count(self) -> int:
        S, K, m = self.state_dim, self.n_agents, self.m
        return (neuro.linear_param_count(S, K * m) + 2 * neuro.linear_param_count(S, m)
                + neuro.linear_param_count(S, m) + neuro.linear_param_count(m, 1))

    def heads(self, s):
        """Hypernetwork outputs for states ``s`` (B, S)."""
        x = s[None]
        B = s.shape[0]
        w1_raw, cw1 = self.w1.forward(x)
        b1, cb1 = self.b1.forward(x)
        w2_raw, cw2 = self.w2.forward(x)
        b2a, cb2a = self.b2a.forward(x)
        b2h = neuro.relu(b2a)
        b2, cb2b = self.b2b.forward(b2h)
        W1 = np.abs(w1_raw[0]).reshape(B, self.n_agents, self.m)
        W2 = np.abs(w2_raw[0])
        cache = (w1_raw, cw1, cb1, w2_raw, cw2, b2a, cb2a, cb2b)
        return W1, b1[0], W2, b2[0, :, 0], cache

    def forward(self, q, s):
        """q (B,K), s (B,S) -> q_tot (B,), cache."""
        if q.shape[-1] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} agent values, got {q.shape[-1]}")
        W1, B1, W2, B2, hc = self.heads(s)
        pre = np.einsum("bk,bkm->bm", q, W1) + B1
        hid = neuro.elu(pre)
        q_tot = np.sum(hid * W2, axis=-1) + B2
        return q_tot, (q, W1, W2, pre, hid, hc)

    def backward(self, dq_tot, cache):
        """Accumulate hypernetwork gradients; return dQ_tot/dq (B,K)."""
        q, W1, W2, pre, hid, hc = cache
        w1_raw, cw1, cb1, w2_raw, cw2, b2a, cb2a, cb2b = hc
        B = q.shape[0]
        g = dq_tot[:, None]
        db2h = self.b2b.backward(g[None], cb2b)
        self.b2a.backward(neuro.relu_backward(db2h, b2a), cb2a)
        dW2 = g * hid
        self.w2.backward(neuro.abs_backward(dW2[None], w2_raw), cw2)
        dpre = neuro.elu_backward(g * W2, pre)
        self.b1.backward(dpre[None], cb1)
        dW1 = (q[:, :, None] * dpre[:, None, :]).reshape(1, B, -1)
        self.w1.backward(neuro.abs_backward(dW1, w1_raw), cw1)
        return np.einsum("bm,bkm->bk", dpre, W1)


class QmixModel:
    """Agent networks, mixer and the feature scaler they were trained with."""

    def __init__(self, n_agents: int, n_actions: int, state_dim: int, obs_dim: int,
                 scaler: FeatureScaler, rng: np.random.Generator, mode: str = "distributional",
                 hidden: int = 64, rnn_hidden: int = 64, mix_hidden: int = 32):
        if mode not in ("distributional", "centralized"):
            raise ValueError(f"unknown mode {mode!r}")
        self.arch = dict(n_agents=n_agents, n_actions=n_actions, state_dim=state_dim, obs_dim=obs_dim,
                         mode=mode, hidden=hidden, rnn_hidden=rnn_hidden, mix_hidden=mix_hidden)
        self.scaler = scaler
        self.agents = AgentNetwork(n_agents, obs_dim, n_actions, rng, hidden, rnn_hidden,
                                   shared=(mode == "centralized"))
        self.mixer = Mixer(state_dim, n_agents, rng, mix_hidden)

    @property
    def n_agents(self) -> int:
        return self.arch["n_agents"]

    @property
    def n_actions(self) -> int:
        return self.arch["n_actions"]

    @property
    def mode(self) -> str:
        return self.arch["mode"]

    def params(self) -> list[Param]:
        return self.agents.params() + self.mixer.params()

    def initial_hidden(self, batch: int | None = None) -> np.ndarray:
        H = self.arch["rnn_hidden"]
        shape = (self.n_agents, H) if batch is None else (self.n_agents, batch, H)
        return np.zeros(shape)

    def copy(self) -> "QmixModel":
        twin = QmixModel.__new__(QmixModel)
        twin.arch = dict(self.arch)
        twin.scaler = self.scaler
        twin.agents = AgentNetwork(self.n_agents, self.arch["obs_dim"], self.n_actions,
                                   np.random.default_rng(0), self.arch["hidden"], self.arch["rnn_hidden"],
                                   shared=(self.mode == "centralized"))
        twin.mixer = Mixer(self.arch["state_dim"], self.n_agents, np.random.default_rng(0), self.arch["mix_hidden"])
        twin.load_state(self)
        return twin

    def load_state(self, other: "QmixModel") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst.value[...] = src.value

    def header(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "arch": self.arch, "scaler": self.scaler.to_dict()}

    def save(self, path) -> None:
        neuro.save_params(path, self.header(), self.params())

    @classmethod
    def load(cls, path) -> "QmixModel":
        meta, arrays = neuro.load_params(path)
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        a = meta["arch"]
        model = cls(a["n_agents"], a["n_actions"], a["state_dim"], a["obs_dim"],
                    FeatureScaler.from_dict(meta["scaler"]), np.random.default_rng(0), a["mode"],
                    a["hidden"], a["rnn_hidden"], a["mix_hidden"])
        for p in model.params():
            if p.name not in arrays or arrays[p.name].shape != p.value.shape:
                raise ValueError(f"{path}: parameter {p.name} missing or mis-shaped")
            p.value[...] = arrays[p.name]
        return model
