"""Cooperative multi-agent Q-learning scheduler (one agent per RBG)."""

from .acting import NONE, MarlScheduler, select_actions, to_allocation
from .features import (FeatureScaler, RewardTracker, action_mask, build_all, build_global_state,
                       build_local_obs, default_delta_norm, reward_from_delta)
from .learner import Learner, TrainConfig, TrainResult, td_loss, td_targets, td_train_step, train
from .networks import AgentNetwork, Mixer, QmixModel, mix, one_hot
from .replay import ReplayBuffer
