"""Small float64 neural-network toolkit with explicit backward passes.

Layers operate on 3-D batches ``(A, B, features)``. Parameters carry a
leading *group* axis ``G``: with ``G == A`` every slice along ``A`` has its
own weights (one network per agent); with ``G == 1`` the weights are shared
and their gradients accumulate over all ``A`` slices.

``forward`` returns ``(output, cache)``; ``backward(d_output, cache)``
adds parameter gradients into ``Param.grad`` and returns input gradients.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import json
import math
import struct
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _reduce_groups(g: np.ndarray, groups: int) -> np.ndarray:
    if groups == 1 and g.shape[0] != 1:
        return g.sum(axis=0, keepdims=True)
    return g


def keep_heap_pages(threshold: int = 1 << 28) -> bool:
    """Ask glibc to serve large temporaries from the heap instead of mmap.

    Training allocates many short-lived ~1 MB arrays; when each one is a
    fresh mapping, page faults dominate the step time on some kernels.
    Returns False (and does nothing) when glibc is not available.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim, m_mmap = -1, -3
        return bool(libc.mallopt(m_mmap, threshold)) and bool(libc.mallopt(m_trim, threshold))
    except (OSError, AttributeError):
        return False


# -- activations ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def abs_(x):
    return np.abs(x)


def abs_backward(dy, x):
    return dy * np.sign(x)


def sigmoid(x):
    # exp(500) is finite and sigmoid(-500) is already far below any tolerance
    x = np.asarray(x, dtype=DTYPE)
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def _sigmoid_(x: np.ndarray) -> np.ndarray:
    """In-place sigmoid of a float64 array."""
    np.clip(x, -500.0, 500.0, out=x)
    np.negative(x, out=x)
    np.exp(x, out=x)
    x += 1.0
    return np.reciprocal(x, out=x)


def sigmoid_backward(dy, x):
    s = sigmoid(x)
    return dy * s * (1.0 - s)


def tanh_backward(dy, x):
    t = np.tanh(x)
    return dy * (1.0 - t * t)


def elu(x, a: float = 1.0):
    return np.where(x >= 0, x, a * np.expm1(np.minimum(x, 0.0)))


def elu_backward(dy, x, a: float = 1.0):
    return dy * np.where(x >= 0, 1.0, a * np.exp(np.minimum(x, 0.0)))


# -- layers --------------------------------------------------------------------

class Linear:
    """y = x W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, groups: int = 1, name: str = "linear"):
        self.n_in, self.n_out, self.groups = n_in, n_out, groups
        self.W = Param(f"{name}.W", _uniform(rng, n_in, (groups, n_in, n_out)))
        self.b = Param(f"{name}.b", _uniform(rng, n_in, (groups, 1, n_out)))

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in} input features, got {x.shape[-1]}")
        y = x @ self.W.value
        y += self.b.value
        return y, x

    def backward(self, dy: np.ndarray, x: np.ndarray, need_dx: bool = True):
        self.W.grad += _reduce_groups(x.transpose(0, 2, 1) @ dy, self.groups)
        self.b.grad += _reduce_groups(dy.sum(axis=1, keepdims=True), self.groups)
        return dy @ self.W.value.transpose(0, 2, 1) if need_dx else None


class GRUCell:
    """Gated recurrent unit (reset gate r, update gate z, candidate n).

    r = s(x Wr + br + h Ur + cr), z = s(x Wz + bz + h Uz + cz),
    n = tanh(x Wn + bn + r * (h Un + cn)), h' = (1 - z) n + z h.

    Weights are stored gate-major, ``(G, 3, n_in, H)`` in r/z/n order, so
    each gate's pre-activation is a contiguous block.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator, groups: int = 1, name: str = "gru"):
        self.n_in, self.n_hidden, self.groups = n_in, n_hidden, groups
        H = n_hidden
        self.Wi = Param(f"{name}.Wi", _uniform(rng, H, (groups, 3, n_in, H)))
        self.Wh = Param(f"{name}.Wh", _uniform(rng, H, (groups, 3, H, H)))
        self.bi = Param(f"{name}.bi", _uniform(rng, H, (groups, 3, 1, H)))
        self.bh = Param(f"{name}.bh", _uniform(rng, H, (groups, 3, 1, H)))

    def params(self) -> list[Param]:
        return [self.Wi, self.Wh, self.bi, self.bh]

    def forward(self, x: np.ndarray, h: np.ndarray):
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise ValueError("GRU width mismatch")
        gi = x[:, None] @ self.Wi.value
        gi += self.bi.value
        gh = h[:, None] @ self.Wh.value
        gh += self.bh.value
        rz = gi[:, :2]
        rz += gh[:, :2]
        _sigmoid_(rz)
        r, z = rz[:, 0], rz[:, 1]
        ghn = gh[:, 2]
        n = r * ghn
        n += gi[:, 2]
        np.tanh(n, out=n)
        h_new = h - n
        h_new *= z
        h_new += n
        return h_new, (x, h, rz, n, ghn)

    def _gate_grads(self, dh_new, h, rz, n, ghn):
        r, z = rz[:, 0], rz[:, 1]
        one_minus = 1.0 - rz
        srz = one_minus * rz
        dgi = np.empty(rz.shape[:1] + (3,) + rz.shape[2:])
        dan = dgi[:, 2]
        np.multiply(n, n, out=dan)
        np.subtract(1.0, dan, out=dan)
        dan *= dh_new
        dan *= one_minus[:, 1]
        np.multiply(dan, ghn, out=dgi[:, 0])
        dgi[:, 0] *= srz[:, 0]
        np.subtract(h, n, out=dgi[:, 1])
        dgi[:, 1] *= dh_new
        dgi[:, 1] *= srz[:, 1]
        dgh = dgi.copy()
        dgh[:, 2] *= r
        return dgi, dgh, dh_new * z

    def backward(self, dh_new: np.ndarray, cache, need_dh: bool = True):
        """Returns ``(dx, dh_prev)``; ``dh_prev`` is None unless ``need_dh``."""
        x, h, rz, n, ghn = cache
        dgi, dgh, dhz = self._gate_grads(dh_new, h, rz, n, ghn)
        self.Wi.grad += _reduce_groups(x[:, None].transpose(0, 1, 3, 2) @ dgi, self.groups)
        self.Wh.grad += _reduce_groups(h[:, None].transpose(0, 1, 3, 2) @ dgh, self.groups)
        self.bi.grad += _reduce_groups(dgi.sum(axis=2, keepdims=True), self.groups)
        self.bh.grad += _reduce_groups(dgh.sum(axis=2, keepdims=True), self.groups)
        dx = (dgi @ self.Wi.value.transpose(0, 1, 3, 2)).sum(axis=1)
        if not need_dh:
            return dx, None
        dh = (dgh @ self.Wh.value.transpose(0, 1, 3, 2)).sum(axis=1)
        dh += dhz
        return dx, dh


def linear_param_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def gru_param_count(n_in: int, n_hidden: int) -> int:
    return 3 * n_hidden * (n_in + n_hidden) + 6 * n_hidden


# -- optimisation --------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    pass


class SGD:
    """Plain SGD with linear learning-rate decay floored at ``min_frac * lr0``."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, decay: float = 1e-7,
                 min_frac: float = 0.1, clip_norm: float | None = None):
        self.params = list(params)
        self.lr0 = lr
        self.lr = lr
        self.decay = decay
        self.min_frac = min_frac
        self.clip_norm = clip_norm
        self.steps = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))

    def step(self) -> None:
        norm = self.grad_norm()
        if not math.isfinite(norm):
            bad = [p.name for p in self.params if not np.all(np.isfinite(p.grad))]
            raise TrainingDiverged(f"non-finite gradient in {bad}")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p in self.params:
            p.value -= (self.lr * scale) * p.grad
            p.grad.fill(0.0)
        self.steps += 1
        self.lr = max(self.lr0 - self.steps * self.decay, self.min_frac * self.lr0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"FSCKPT1\n"


def save_params(path, header: dict, params: Iterable[Param]) -> None:
    """Write ``MAGIC | u64 header length | JSON header | raw float64 LE arrays``.

    The header lists every parameter's name and shape in storage order, so
    save -> load -> save reproduces the file byte for byte.
    """
    params = list(params)
    meta = dict(header)
    meta["params"] = [[p.name, list(p.value.shape)] for p in params]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(n))
        arrays = {}
        for name, shape in meta["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated at {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return meta, arrays
