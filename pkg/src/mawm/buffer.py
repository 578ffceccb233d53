"""Replay buffer of real transitions, segment sampling, and episode logs.

The buffer stores whole episodes and samples fixed-horizon trajectory
segments uniformly over all valid windows. Windows never span an episode
boundary; episodes shorter than the horizon yield one right-padded window
whose padded steps carry a flag so losses can exclude them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class StepRecord:
    """One real transition: the joint observation the actions were taken
    from, the availability masks valid there, and the step outcome."""

    obs: np.ndarray  # (n, obs_dim) float32
    avail: np.ndarray  # (n, n_actions) bool
    actions: np.ndarray  # (n,) int64
    reward: float
    continuation: float  # 0.0 exactly when the episode ended at this step

    def validate(self):
        if not np.isfinite(self.obs).all():
            raise ValueError("non-finite observation")
        if not self.avail.any(axis=1).all():
            raise ValueError("every agent needs at least one available action")
        return self


@dataclass
class TrajectorySegment:
    """Fixed-horizon slice of one episode, right-padded when needed.

    ``pad[t]`` is True on padded steps; padded content is zeros with
    all-true availability so downstream code never sees an empty mask.
    """

    obs: np.ndarray  # (n, H, obs_dim)
    actions: np.ndarray  # (n, H)
    reward: np.ndarray  # (H,)
    continuation: np.ndarray  # (H,)
    avail: np.ndarray  # (n, H, n_actions)
    pad: np.ndarray  # (H,) bool

    @property
    def horizon(self):
        return self.obs.shape[1]


class ReplayBuffer:
    """Episode-aware ring buffer over StepRecords.

    Appends go to an open episode that is closed automatically when a
    record with continuation == 0 arrives. Once the total transition count
    exceeds capacity the oldest closed episodes are evicted whole.
    """

    def __init__(self, capacity=50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._episodes = []  # list of dicts of stacked arrays
        self._open = []  # list of StepRecord
        self.total_appended = 0

    def __len__(self):
        return sum(ep["reward"].shape[0] for ep in self._episodes) + len(self._open)

    @property
    def n_episodes(self):
        return len(self._episodes) + (1 if self._open else 0)

    def append(self, record: StepRecord):
        record.validate()
        self._open.append(record)
        self.total_appended += 1
        if record.continuation == 0.0:
            self._close_open()
        self._evict()

    def _close_open(self):
        if not self._open:
            return
        self._episodes.append(_stack_records(self._open))
        self._open = []

    def _evict(self):
        while len(self) > self.capacity and self._episodes:
            self._episodes.pop(0)

    def episodes(self):
        """Snapshot of stored episodes (stacked arrays), open tail included."""
        eps = list(self._episodes)
        if self._open:
            eps.append(_stack_records(self._open))
        return eps

    def _windows(self, horizon):
        counts = []
        eps = self.episodes()
        for ep in eps:
            length = ep["reward"].shape[0]
            counts.append(max(length - horizon + 1, 1))
        return eps, np.array(counts, dtype=np.int64)

    def sample_segment(self, horizon, rng) -> TrajectorySegment:
        """Draw one segment uniformly over all valid windows."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        eps, counts = self._windows(horizon)
        total = int(counts.sum())
        flat = int(rng.integers(total))
        cum = np.cumsum(counts)
        ep_idx = int(np.searchsorted(cum, flat, side="right"))
        start = flat - (int(cum[ep_idx - 1]) if ep_idx > 0 else 0)
        return _cut_segment(eps[ep_idx], start, horizon)

    def sample_batch(self, batch_size, horizon, rng):
        return [self.sample_segment(horizon, rng) for _ in range(batch_size)]

    def sample_observations(self, batch_size, rng):
        """Uniform observations over all stored steps, as (B, n, obs_dim)."""
        eps = self.episodes()
        lengths = np.array([ep["reward"].shape[0] for ep in eps])
        if lengths.sum() == 0:
            raise ValueError("cannot sample from an empty buffer")
        flat = rng.integers(int(lengths.sum()), size=batch_size)
        cum = np.cumsum(lengths)
        out = []
        for f in flat:
            ep_idx = int(np.searchsorted(cum, f, side="right"))
            t = int(f - (cum[ep_idx - 1] if ep_idx > 0 else 0))
            out.append(eps[ep_idx]["obs"][:, t])
        return np.stack(out)

    def sample_initial_states(self, batch_size, rng):
        """Uniform (obs, avail) pairs used to seed imagination."""
        eps = self.episodes()
        lengths = np.array([ep["reward"].shape[0] for ep in eps])
        if lengths.sum() == 0:
            raise ValueError("cannot sample from an empty buffer")
        flat = rng.integers(int(lengths.sum()), size=batch_size)
        cum = np.cumsum(lengths)
        obs, avail = [], []
        for f in flat:
            ep_idx = int(np.searchsorted(cum, f, side="right"))
            t = int(f - (cum[ep_idx - 1] if ep_idx > 0 else 0))
            obs.append(eps[ep_idx]["obs"][:, t])
            avail.append(eps[ep_idx]["avail"][:, t])
        return np.stack(obs), np.stack(avail)

    def first_observations(self, k):
        """Chronologically first k stored joint observations, flattened to
        (min(k, len), n, obs_dim); used to freeze bins ranges."""
        out = []
        for ep in self.episodes():
            for t in range(ep["reward"].shape[0]):
                out.append(ep["obs"][:, t])
                if len(out) >= k:
                    return np.stack(out)
        if not out:
            raise ValueError("empty buffer")
        return np.stack(out)

    def state_dict(self):
        return {
            "capacity": self.capacity,
            "episodes": self.episodes()[: len(self._episodes)],
            "open": [vars(r) for r in self._open],
            "total_appended": self.total_appended,
        }

    def load_state_dict(self, state):
        self.capacity = state["capacity"]
        self._episodes = [dict(ep) for ep in state["episodes"]]
        self._open = [StepRecord(**r) for r in state["open"]]
        self.total_appended = state["total_appended"]


def _stack_records(records):
    return {
        "obs": np.stack([r.obs for r in records], axis=1),
        "avail": np.stack([r.avail for r in records], axis=1),
        "actions": np.stack([r.actions for r in records], axis=1),
        "reward": np.array([r.reward for r in records], dtype=np.float32),
        "continuation": np.array([r.continuation for r in records], dtype=np.float32),
    }


def _cut_segment(ep, start, horizon):
    length = ep["reward"].shape[0]
    take = min(horizon, length - start)
    n, _, obs_dim = ep["obs"].shape
    n_actions = ep["avail"].shape[2]
    obs = np.zeros((n, horizon, obs_dim), dtype=np.float32)
    actions = np.zeros((n, horizon), dtype=np.int64)
    reward = np.zeros(horizon, dtype=np.float32)
    continuation = np.zeros(horizon, dtype=np.float32)
    avail = np.ones((n, horizon, n_actions), dtype=bool)
    pad = np.ones(horizon, dtype=bool)
    obs[:, :take] = ep["obs"][:, start : start + take]
    actions[:, :take] = ep["actions"][:, start : start + take]
    reward[:take] = ep["reward"][start : start + take]
    continuation[:take] = ep["continuation"][start : start + take]
    avail[:, :take] = ep["avail"][:, start : start + take]
    pad[:take] = False
    return TrajectorySegment(obs, actions, reward, continuation, avail, pad)


# ---------------------------------------------------------------------------
# Episode logs: line-delimited JSON, one record per step.
#
# Schema per line:
#   {"episode": int, "t": int, "obs": [[float]*obs_dim]*n,
#    "actions": [int]*n, "reward": float, "continuation": float,
#    "avail": [[0/1]*n_actions]*n}


def write_episode_log(path, episodes):
    """Write episodes (lists of StepRecords) as JSON lines."""
    with open(path, "w") as f:
        for e, records in enumerate(episodes):
            for t, r in enumerate(records):
                f.write(
                    json.dumps(
                        {
                            "episode": e,
                            "t": t,
                            "obs": np.asarray(r.obs, dtype=float).round(7).tolist(),
                            "actions": np.asarray(r.actions).tolist(),
                            "reward": float(r.reward),
                            "continuation": float(r.continuation),
                            "avail": np.asarray(r.avail, dtype=int).tolist(),
                        },
                        separators=(",", ":"),
                    )
                    + "\n"
                )


def read_episode_log(path):
    """Read a JSONL episode log back into lists of StepRecords."""
    episodes = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            rec = StepRecord(
                obs=np.asarray(row["obs"], dtype=np.float32),
                avail=np.asarray(row["avail"], dtype=bool),
                actions=np.asarray(row["actions"], dtype=np.int64),
                reward=float(row["reward"]),
                continuation=float(row["continuation"]),
            )
            episodes.setdefault(row["episode"], []).append((row["t"], rec))
    out = []
    for e in sorted(episodes):
        steps = sorted(episodes[e], key=lambda kv: kv[0])
        out.append([rec for _, rec in steps])
    return out


def random_policy(rng):
    """Uniform policy over available actions, for seeding and logging."""

    def act(obs, avail):
        n = avail.shape[0]
        actions = np.empty(n, dtype=np.int64)
        for i in range(n):
            choices = np.flatnonzero(avail[i])
            actions[i] = choices[rng.integers(len(choices))]
        return actions

    return act


def run_episodes(env, policy, n_episodes):
    """Roll full episodes with ``policy(obs, avail) -> actions``.

    Returns a list of episodes, each a list of StepRecords.
    """
    episodes = []
    for _ in range(n_episodes):
        obs, avail = env.reset()
        records = []
        while True:
            actions = policy(obs, avail)
            next_obs, reward, continuation, next_avail = env.step(actions)
            records.append(
                StepRecord(
                    obs=obs.copy(),
                    avail=avail.copy(),
                    actions=np.asarray(actions, dtype=np.int64).copy(),
                    reward=float(reward),
                    continuation=float(continuation),
                )
            )
            obs, avail = next_obs, next_avail
            if continuation == 0.0:
                break
        episodes.append(records)
    return episodes
