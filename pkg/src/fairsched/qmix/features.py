"""Fixed-width state/observation vectors and the shared reward.

The per-user feature matrix ``S`` (one row per active UE) is projected to
``flatten(S^T S)``, whose width depends only on the number of features, so
any number of active users (including none) maps to the same vector size.
Padding ``S`` with all-zero rows for absent ("virtual") users leaves the
projection unchanged. The Gram matrix is divided by the user capacity so
every entry stays in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..schedulers import SchedulerView
from ..simcore import CellConfig, CellState, tb_bits

LOCAL_FEATURES = 6


@dataclass(frozen=True)
class FeatureScaler:
    """Min-max bounds mapping each raw feature into [0, 1]."""

    rsrp: tuple
    cqi: tuple
    buffer: tuple
    scheduled: tuple
    alpha: tuple
    hudr: tuple
    users: float = 1.0

    @classmethod
    def for_cell(cls, cfg: CellConfig, episode_length: int = 1000) -> "FeatureScaler":
        top_rate = cfg.n_rbgs * cfg.rbs_per_rbg * cfg.se_table[cfg.mcs_max - 1] * cfg.res_per_rb
        return cls(
            rsrp=tuple(cfg.rsrp_range),
            cqi=(float(cfg.mcs_min), float(cfg.mcs_max)),
            buffer=(0.0, float(cfg.buffer_range[1])),
            scheduled=(0.0, float(episode_length)),
            alpha=tuple(cfg.olla_bounds),
            hudr=(0.0, float(top_rate)),
            users=float(cfg.max_users),
        )

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _scale(x, bounds):
    lo, hi = bounds
    return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def feature_matrix(view: SchedulerView, scaler: FeatureScaler) -> np.ndarray:
    """``(N, 5 + K)`` matrix: RSRP, mean CQI per RBG, buffer, scheduled, OLLA, HUDR."""
    return np.column_stack([
        _scale(view.rsrp, scaler.rsrp),
        _scale(view.cqi, scaler.cqi).reshape(view.n_ues, view.n_rbgs),
        _scale(view.buffer, scaler.buffer),
        _scale(view.scheduled, scaler.scheduled),
        _scale(view.alpha, scaler.alpha),
        _scale(view.hist_rate, scaler.hudr),
    ])


def project(S: np.ndarray, users: float = 1.0) -> np.ndarray:
    return (S.T @ S).reshape(-1) / users


def state_dim(n_rbgs: int) -> int:
    return (5 + n_rbgs) ** 2


def obs_dim() -> int:
    return LOCAL_FEATURES ** 2


def local_columns(n_rbgs: int, agent: int) -> list[int]:
    K = n_rbgs
    return [0, 1 + agent, K + 1, K + 2, K + 3, K + 4]


def build_global_state(view: SchedulerView, scaler: FeatureScaler) -> np.ndarray:
    return project(feature_matrix(view, scaler), scaler.users)


def build_local_obs(view: SchedulerView, scaler: FeatureScaler, agent: int) -> np.ndarray:
    if not 0 <= agent < view.n_rbgs:
        raise IndexError(f"agent {agent} out of range")
    S = feature_matrix(view, scaler)
    return project(S[:, local_columns(view.n_rbgs, agent)], scaler.users)


def build_all(view: SchedulerView, scaler: FeatureScaler) -> tuple[np.ndarray, np.ndarray]:
    """Global state and the stacked ``(K, 36)`` local observations."""
    S = feature_matrix(view, scaler)
    K = view.n_rbgs
    obs = np.stack([project(S[:, local_columns(K, k)], scaler.users) for k in range(K)])
    return project(S, scaler.users), obs


def action_mask(view: SchedulerView, max_users: int) -> np.ndarray:
    """Selectable user slots: active UEs (id order) with data; virtual slots masked."""
    mask = np.zeros(max_users, dtype=bool)
    mask[:view.n_ues] = view.buffer > 0
    return mask


# -- reward ----------------------------------------------------------------------

def default_delta_norm(cfg: CellConfig) -> float:
    """Max users times the mean single-RBG TB size over all CQI levels."""
    se = cfg.se_e4()
    sizes = [tb_bits([q] * cfg.rbs_per_rbg, se, cfg.res_per_rb) for q in range(cfg.mcs_min, cfg.mcs_max + 1)]
    return cfg.max_users * sum(sizes) / len(sizes)


REWARD_CLIP = 30.0


def reward_from_delta(delta: float, delta_norm: float) -> float:
    """-sigmoid(delta / delta_norm).

    The argument is clipped to +-30 so the result stays strictly inside
    (-1, 0) in double precision.
    """
    x = min(max(delta / delta_norm, -REWARD_CLIP), REWARD_CLIP)
    if x >= 0:
        return -1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return -ex / (1.0 + ex)


class RewardTracker:
    """Cooperative reward from the change in summed user data rate.

    The sum runs over every UE that has arrived so far; departed UEs keep
    their rate frozen at departure and newcomers enter at zero.
    """

    def __init__(self, delta_norm: float):
        self.delta_norm = delta_norm
        self.prev_sum = 0.0

    def reset(self) -> None:
        self.prev_sum = 0.0

    def __call__(self, cell: CellState) -> float:
        cur = cell.sum_user_rate()
        delta = cur - self.prev_sum
        self.prev_sum = cur
        return reward_from_delta(delta, self.delta_norm)
