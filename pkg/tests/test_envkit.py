import numpy as np
import pytest
from scipy import stats

from mawm.buffer import (
    ReplayBuffer,
    StepRecord,
    random_policy,
    read_episode_log,
    run_episodes,
    write_episode_log,
)
from mawm.envs import (
    CoupledChainEnv,
    StepCountingEnv,
    UnavailableActionError,
    make_env,
)


def walk_to_switch(env, obs, agent):
    """Greedy action toward the agent's own switch, from its observation."""
    scale = env.w - 1
    dx = round(float(obs[agent, 2]) * scale)
    dy = round(float(obs[agent, 3]) * scale)
    if dx > 0:
        return 3  # east
    if dx < 0:
        return 4  # west
    if dy > 0:
        return 2  # south
    if dy < 0:
        return 1  # north
    return 0  # stay


class TestMakeEnv:
    def test_coop_switch_spec(self):
        env = make_env("coop-switch", n_agents=2, seed=0)
        assert env.spec.obs_dim == 12
        assert env.spec.n_actions == 5

    def test_coupled_chain_spec(self):
        env = make_env("coupled-chain", n_agents=3, seed=0)
        assert env.spec.obs_dim == 4
        assert env.spec.n_actions == 5

    def test_single_agent_rejected(self):
        with pytest.raises(ValueError):
            make_env("coop-switch", n_agents=1)
        with pytest.raises(ValueError):
            make_env("coupled-chain", n_agents=1)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            make_env("atari-pong")


class TestCoopSwitch:
    def test_success_gives_reward_and_terminates(self):
        env = make_env("coop-switch", n_agents=2, seed=3)
        obs, avail = env.reset()
        reward = cont = None
        for _ in range(40):
            a0 = walk_to_switch(env, obs, 0)
            actions = [a0, 0]
            obs, reward, cont, avail = env.step(actions)
            if a0 == 0:
                break
        for _ in range(40):
            a1 = walk_to_switch(env, obs, 1)
            obs, reward, cont, avail = env.step([0, a1])
            if reward == 1.0:
                break
        assert reward == 1.0
        assert cont == 0.0

    def test_pre_success_steps(self):
        env = make_env("coop-switch", n_agents=2, seed=0)
        env.reset()
        obs, reward, cont, avail = env.step([0, 0])
        assert reward == 0.0
        assert cont == 0.99

    def test_time_limit_termination(self):
        env = make_env("coop-switch", n_agents=2, seed=0, episode_limit=5)
        env.reset()
        for t in range(5):
            obs, reward, cont, avail = env.step([0, 0])
        assert cont == 0.0

    def test_wall_moves_masked(self):
        env = make_env("coop-switch", n_agents=2, seed=0)
        env.reset()
        # drive agent 0 to the west wall, then west must be unavailable
        for _ in range(4):
            avail = env.avail_mask()
            if not avail[0, 4]:
                break
            env.step([4, 0])
        assert not env.avail_mask()[0, 4]
        with pytest.raises(UnavailableActionError):
            env.step([4, 0])

    def test_mask_always_has_stay(self):
        env = make_env("coop-switch", n_agents=2, seed=1)
        env.reset()
        rng = np.random.default_rng(0)
        policy = random_policy(rng)
        obs, avail = env.reset()
        for _ in range(30):
            assert avail.any(axis=1).all()
            assert avail[:, 0].all()
            obs, _, cont, avail = env.step(policy(obs, avail))
            if cont == 0.0:
                break


class TestDeterminism:
    @pytest.mark.parametrize("name", ["coop-switch", "coupled-chain"])
    def test_same_seed_same_stream(self, name):
        def collect(seed):
            env = make_env(name, n_agents=2, seed=seed)
            rng = np.random.default_rng(7)
            out = []
            obs, avail = env.reset()
            for _ in range(60):
                actions = random_policy(rng)(obs, avail)
                obs, r, c, avail = env.step(actions)
                out.append((obs.copy(), r, c, avail.copy()))
                if c == 0.0:
                    obs, avail = env.reset()
            return out

        a, b = collect(5), collect(5)
        for (oa, ra, ca, ma), (ob, rb, cb, mb) in zip(a, b):
            assert np.array_equal(oa, ob)
            assert ra == rb and ca == cb
            assert np.array_equal(ma, mb)

    def test_state_roundtrip(self):
        env = make_env("coupled-chain", n_agents=3, seed=2)
        env.reset()
        env.step([0, 1, 2])
        state = env.get_state()
        o1, r1, c1, _ = env.step([1, 1, 1])
        env.set_state(state)
        o2, r2, c2, _ = env.step([1, 1, 1])
        assert np.array_equal(o1, o2) and r1 == r2


class TestCoupledChain:
    def test_cross_agent_coupling(self):
        # identical env state and rng; only agent 1's action differs
        env_a = make_env("coupled-chain", n_agents=3, seed=4)
        env_b = make_env("coupled-chain", n_agents=3, seed=4)
        env_a.reset()
        env_b.reset()
        oa, *_ = env_a.step([2, 0, 2])
        ob, *_ = env_b.step([2, 4, 2])
        assert not np.allclose(oa[0], ob[0])
        assert not np.allclose(oa[2], ob[2])

    def test_all_actions_available(self):
        env = make_env("coupled-chain", n_agents=3, seed=0)
        _, avail = env.reset()
        assert avail.all()

    def test_reward_is_negative_mean_norm(self):
        env = make_env("coupled-chain", n_agents=3, seed=0)
        env.reset()
        obs, reward, *_ = env.step([2, 2, 2])
        expected = -np.mean(np.linalg.norm(obs.astype(np.float64), axis=1))
        assert reward == pytest.approx(expected, rel=1e-5)

    def test_configurable_state_dim(self):
        env = make_env("coupled-chain", n_agents=3, seed=0, state_dim=16)
        assert env.spec.obs_dim == 16


class TestReplayBuffer:
    def _fill_episode(self, buf, length, n=2, obs_dim=3, n_actions=4, tag=0.0):
        for t in range(length):
            buf.append(
                StepRecord(
                    obs=np.full((n, obs_dim), t + tag, dtype=np.float32),
                    avail=np.ones((n, n_actions), dtype=bool),
                    actions=np.zeros(n, dtype=np.int64),
                    reward=float(t),
                    continuation=0.0 if t == length - 1 else 0.99,
                )
            )

    def test_window_count_uniform(self):
        buf = ReplayBuffer(1000)
        self._fill_episode(buf, 20)
        rng = np.random.default_rng(0)
        counts = np.zeros(13)
        for _ in range(2600):
            seg = buf.sample_segment(8, rng)
            assert not seg.pad.any()
            counts[int(seg.reward[0])] += 1
        assert counts.sum() == 2600
        p = stats.chisquare(counts).pvalue
        assert p > 0.01

    def test_short_episode_padded(self):
        buf = ReplayBuffer(1000)
        self._fill_episode(buf, 5)
        rng = np.random.default_rng(0)
        seg = buf.sample_segment(8, rng)
        assert seg.pad.tolist() == [False] * 5 + [True] * 3
        assert seg.avail[:, 5:].all()  # padded masks stay non-empty
        assert (seg.obs[:, 5:] == 0).all()

    def test_segments_never_mix_episodes(self):
        buf = ReplayBuffer(1000)
        self._fill_episode(buf, 10, tag=0.0)
        self._fill_episode(buf, 10, tag=100.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            seg = buf.sample_segment(4, rng)
            vals = seg.obs[0, :, 0]
            assert (vals >= 100).all() or (vals < 100).all()

    def test_eviction_keeps_capacity(self):
        buf = ReplayBuffer(25)
        for _ in range(5):
            self._fill_episode(buf, 10)
        assert len(buf) <= 25
        assert buf.n_episodes == 2

    def test_empty_buffer_errors(self):
        buf = ReplayBuffer(10)
        with pytest.raises(ValueError):
            buf.sample_segment(4, np.random.default_rng(0))

    def test_mask_invariant_checked(self):
        buf = ReplayBuffer(10)
        rec = StepRecord(
            obs=np.zeros((2, 3), dtype=np.float32),
            avail=np.zeros((2, 4), dtype=bool),
            actions=np.zeros(2, dtype=np.int64),
            reward=0.0,
            continuation=0.99,
        )
        with pytest.raises(ValueError):
            buf.append(rec)


class TestEpisodeLog:
    def test_round_trip(self, tmp_path):
        env = make_env("coop-switch", n_agents=2, seed=0)
        rng = np.random.default_rng(0)
        episodes = run_episodes(env, random_policy(rng), 3)
        path = tmp_path / "log.jsonl"
        write_episode_log(path, episodes)
        back = read_episode_log(path)
        assert len(back) == len(episodes)
        for ea, eb in zip(episodes, back):
            assert len(ea) == len(eb)
            for ra, rb in zip(ea, eb):
                assert np.allclose(ra.obs, rb.obs, atol=1e-6)
                assert np.array_equal(ra.actions, rb.actions)
                assert ra.reward == rb.reward
                assert ra.continuation == rb.continuation
                assert np.array_equal(ra.avail, rb.avail)


def test_step_counter_wrapper():
    env = StepCountingEnv(make_env("coop-switch", n_agents=2, seed=0))
    obs, avail = env.reset()
    assert env.step_count == 0
    env.step([0, 0])
    assert env.step_count == 1
