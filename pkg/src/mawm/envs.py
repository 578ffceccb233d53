"""Built-in cooperative environments.

Two small Dec-POMDPs exercise the full pipeline: a grid world with
availability masks and a simultaneous-occupancy goal (``coop-switch``),
and a linear system whose per-agent state is driven by the other agents'
actions (``coupled-chain``), which stresses the tokenizer with continuous
observations and gives a clean multi-step prediction-error metric.

Both are deterministic given a seed and an action sequence. Every step
validates the chosen actions against the current availability masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COOP_SWITCH = "coop-switch"
COUPLED_CHAIN = "coupled-chain"

# Action indices for coop-switch.
STAY, NORTH, SOUTH, EAST, WEST = range(5)
_MOVES = np.array([[0, 0], [0, -1], [0, 1], [1, 0], [-1, 0]], dtype=np.int64)


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment instance."""

    name: str
    n_agents: int
    obs_dim: int
    n_actions: int
    episode_limit: int
    seed: int


class UnavailableActionError(ValueError):
    """An agent chose an action its availability mask forbids."""


def _check_actions(actions, avail, n_agents, n_actions):
    actions = np.asarray(actions, dtype=np.int64).reshape(n_agents)
    if np.any(actions < 0) or np.any(actions >= n_actions):
        raise ValueError(f"action ids must lie in [0, {n_actions})")
    for i, a in enumerate(actions):
        if not avail[i, a]:
            raise UnavailableActionError(
                f"agent {i} chose action {a} but its mask marks it unavailable"
            )
    return actions


class CoopSwitchEnv:
    """Grid world where the team is rewarded only when every agent stands
    on its own switch at the same time.

    Each agent observes, in normalized grid units, a 6-feature block for
    itself (position, offset to its switch, switch position) and one such
    block per teammate (relative position, that agent's offset to its own
    switch, that switch's position), giving ``obs_dim = 6 * n_agents``.
    Moves that would leave the grid are masked unavailable.
    """

    def __init__(self, n_agents=2, grid_size=5, episode_limit=50, seed=0):
        if n_agents < 2:
            raise ValueError("coop-switch is multi-agent: n_agents must be >= 2")
        if grid_size * grid_size < 2 * n_agents:
            raise ValueError("grid too small for distinct switches and starts")
        self.n = n_agents
        self.w = grid_size
        self.spec = EnvSpec(
            name=COOP_SWITCH,
            n_agents=n_agents,
            obs_dim=6 * n_agents,
            n_actions=5,
            episode_limit=episode_limit,
            seed=seed,
        )
        init_rng = np.random.default_rng(seed)
        cells = init_rng.choice(grid_size * grid_size, size=n_agents, replace=False)
        self._switches = np.stack([cells % grid_size, cells // grid_size], axis=1)
        self._rng = np.random.default_rng(init_rng.integers(2**63))
        self._pos = None
        self._t = 0
        self._done = True

    @property
    def switches(self):
        return self._switches.copy()

    def reset(self):
        while True:
            cells = self._rng.integers(0, self.w * self.w, size=self.n)
            pos = np.stack([cells % self.w, cells // self.w], axis=1)
            if not np.all(np.all(pos == self._switches, axis=1)):
                break
        self._pos = pos
        self._t = 0
        self._done = False
        return self._observe(), self.avail_mask()

    def avail_mask(self):
        mask = np.ones((self.n, 5), dtype=bool)
        nxt = self._pos[:, None, :] + _MOVES[None, :, :]
        inside = np.all((nxt >= 0) & (nxt < self.w), axis=2)
        mask &= inside
        return mask

    def _observe(self):
        scale = self.w - 1
        obs = np.empty((self.n, 6 * self.n), dtype=np.float32)
        for i in range(self.n):
            parts = [self._agent_block(i, i, scale)]
            for j in range(self.n):
                if j != i:
                    parts.append(self._agent_block(i, j, scale))
            obs[i] = np.concatenate(parts)
        return obs

    def _agent_block(self, viewer, agent, scale):
        p, s = self._pos[agent], self._switches[agent]
        if agent == viewer:
            anchor = np.zeros(2)
        else:
            anchor = self._pos[viewer]
        return np.array(
            [
                (p[0] - anchor[0]) / scale,
                (p[1] - anchor[1]) / scale,
                (s[0] - p[0]) / scale,
                (s[1] - p[1]) / scale,
                s[0] / scale,
                s[1] / scale,
            ],
            dtype=np.float32,
        )

    def step(self, actions):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        actions = _check_actions(actions, self.avail_mask(), self.n, 5)
        self._pos = self._pos + _MOVES[actions]
        self._t += 1
        success = bool(np.all(np.all(self._pos == self._switches, axis=1)))
        reward = 1.0 if success else 0.0
        done = success or self._t >= self.spec.episode_limit
        self._done = done
        continuation = 0.0 if done else 0.99
        return self._observe(), reward, continuation, self.avail_mask()

    def get_state(self):
        return {
            "rng": self._rng.bit_generator.state,
            "pos": None if self._pos is None else self._pos.copy(),
            "t": self._t,
            "done": self._done,
        }

    def set_state(self, state):
        self._rng.bit_generator.state = state["rng"]
        self._pos = None if state["pos"] is None else state["pos"].copy()
        self._t = state["t"]
        self._done = state["done"]


class CoupledChainEnv:
    """Linear per-agent dynamics coupled through the mean of the other
    agents' actions.

    State update per agent: ``s <- A s + B u_i + C mean_{j!=i}(u_j) + eps``
    with ``eps ~ N(0, sigma^2 I)``. Observations are the raw states, the
    shared reward is the negative mean state norm, and the scalar action is
    one of 5 fixed-width bins on [-1, 1]. All actions are always available.
    """

    N_BINS = 5

    def __init__(self, n_agents=3, state_dim=4, episode_limit=50, seed=0, noise=0.01):
        if n_agents < 2:
            raise ValueError("coupled-chain is multi-agent: n_agents must be >= 2")
        self.n = n_agents
        self.d = state_dim
        self.noise = noise
        self.spec = EnvSpec(
            name=COUPLED_CHAIN,
            n_agents=n_agents,
            obs_dim=state_dim,
            n_actions=self.N_BINS,
            episode_limit=episode_limit,
            seed=seed,
        )
        init_rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(init_rng.normal(size=(state_dim, state_dim)))
        self.A = (0.9 * q).astype(np.float64)
        self.B = 0.25 * _unit(init_rng.normal(size=state_dim))
        self.C = 0.25 * _unit(init_rng.normal(size=state_dim))
        width = 2.0 / self.N_BINS
        self.bin_centers = (-1.0 + width * (np.arange(self.N_BINS) + 0.5)).astype(
            np.float64
        )
        self._rng = np.random.default_rng(init_rng.integers(2**63))
        self._s = None
        self._t = 0
        self._done = True

    def reset(self):
        self._s = self._rng.normal(scale=0.5, size=(self.n, self.d))
        self._t = 0
        self._done = False
        return self._observe(), self.avail_mask()

    def avail_mask(self):
        return np.ones((self.n, self.N_BINS), dtype=bool)

    def _observe(self):
        return self._s.astype(np.float32)

    def step(self, actions):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        actions = _check_actions(actions, self.avail_mask(), self.n, self.N_BINS)
        u = self.bin_centers[actions]
        others = (u.sum() - u) / (self.n - 1)
        eps = self._rng.normal(scale=self.noise, size=(self.n, self.d))
        self._s = (
            self._s @ self.A.T + np.outer(u, self.B) + np.outer(others, self.C) + eps
        )
        self._t += 1
        reward = float(-np.mean(np.linalg.norm(self._s, axis=1)))
        done = self._t >= self.spec.episode_limit
        self._done = done
        continuation = 0.0 if done else 0.99
        return self._observe(), reward, continuation, self.avail_mask()

    def get_state(self):
        return {
            "rng": self._rng.bit_generator.state,
            "s": None if self._s is None else self._s.copy(),
            "t": self._t,
            "done": self._done,
        }

    def set_state(self, state):
        self._rng.bit_generator.state = state["rng"]
        self._s = None if state["s"] is None else state["s"].copy()
        self._t = state["t"]
        self._done = state["done"]


def make_env(name, n_agents=2, seed=0, episode_limit=50, **kwargs):
    """Construct a built-in environment by name.

    Raises ValueError for unknown names or single-agent requests. Extra
    keyword arguments are forwarded (``grid_size`` for coop-switch,
    ``state_dim``/``noise`` for coupled-chain).
    """
    if name == COOP_SWITCH:
        return CoopSwitchEnv(
            n_agents=n_agents, episode_limit=episode_limit, seed=seed, **kwargs
        )
    if name == COUPLED_CHAIN:
        return CoupledChainEnv(
            n_agents=n_agents, episode_limit=episode_limit, seed=seed, **kwargs
        )
    raise ValueError(f"unknown environment {name!r}")


def _unit(v):
    return v / np.linalg.norm(v)


class StepCountingEnv:
    """Wrapper counting real env.step calls; used to verify that behavior
    learning never touches the real environment."""

    def __init__(self, env):
        self.env = env
        self.spec = env.spec
        self.step_count = 0

    def reset(self):
        return self.env.reset()

    def avail_mask(self):
        return self.env.avail_mask()

    def step(self, actions):
        self.step_count += 1
        return self.env.step(actions)

    def get_state(self):
        return self.env.get_state()

    def set_state(self, state):
        self.env.set_state(state)
