import numpy as np
import pytest
import torch

from mawm.buffer import ReplayBuffer, random_policy, run_episodes
from mawm.envs import make_env


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def coop_buffer():
    """Random-policy coop-switch data shared by model tests."""
    env = make_env("coop-switch", n_agents=2, seed=0)
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10_000)
    for ep in run_episodes(env, random_policy(rng), 30):
        for r in ep:
            buf.append(r)
    return buf


@pytest.fixture(scope="session")
def chain_buffer():
    env = make_env("coupled-chain", n_agents=3, seed=0)
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10_000)
    for ep in run_episodes(env, random_policy(rng), 20):
        for r in ep:
            buf.append(r)
    return buf
