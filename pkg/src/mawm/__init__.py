"""Multi-agent world model with transformer token dynamics, Perceiver
agent aggregation, and actor-critic learning inside imagined rollouts."""

__version__ = "0.1.0"

from mawm.envs import EnvSpec, make_env
from mawm.buffer import ReplayBuffer, StepRecord, TrajectorySegment

__all__ = [
    "EnvSpec",
    "make_env",
    "ReplayBuffer",
    "StepRecord",
    "TrajectorySegment",
]
