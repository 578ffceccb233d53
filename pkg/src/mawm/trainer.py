"""Training orchestration: collect real experience, fit the tokenizer, train
the world model (dynamics + aggregator jointly), and train the actor-critic
in imagination, with deterministic seeding, JSONL metrics, and resumable
checkpoints.

One outer epoch collects a fixed number of transitions, then runs the
tokenizer, world-model, and behavior phases in that order (the tokenizer
always updates before the dynamics so the codebook is never stale-fresh).
During collection the policy acts on reconstructed observations to avoid a
train/execute distribution shift; recorded continuation labels are 0.99 on
non-terminal steps and 0 on terminal ones.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mawm import aggregator as agg
from mawm.behavior import BehaviorLearner, CriticNet, PolicyNet, act
from mawm.buffer import ReplayBuffer, StepRecord
from mawm.dynamics import LocalDynamics, SequenceLayout, WorldModel
from mawm.envs import make_env
from mawm.tokenizer import BinsTokenizer, VQTokenizer

CHECKPOINT_VERSION = 1


@dataclass
class EnvConfig:
    name: str = "coop-switch"
    n_agents: int = 2
    episode_limit: int = 50
    grid_size: int = 5  # coop-switch
    state_dim: int = 4  # coupled-chain
    noise: float = 0.01  # coupled-chain

    def make(self, seed):
        kwargs = {"n_agents": self.n_agents, "episode_limit": self.episode_limit, "seed": seed}
        if self.name == "coop-switch":
            kwargs["grid_size"] = self.grid_size
        else:
            kwargs["state_dim"] = self.state_dim
            kwargs["noise"] = self.noise
        return make_env(self.name, **kwargs)


@dataclass
class TokenizerConfig:
    kind: str = "vq"  # vq | bins
    n_codes: int = 512
    n_tokens: int = 16
    code_dim: int = 128
    hidden: int = 512
    layers: int = 3
    beta: float = 10.0
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    lr: float = 3e-4
    batch_size: int = 256
    grad_clip: float = 10.0
    bins_fit_samples: int = 1000


@dataclass
class AggregatorConfig:
    kind: str = "perceiver"  # perceiver | self_attention | none
    cross_heads: int = 8
    inner_layers: int = 2
    inner_heads: int = 8
    head_dim: int = 64
    ff_mult: int = 4
    dropout: float = 0.1
    self_attn_layers: int = 3


@dataclass
class DynamicsConfig:
    dim: int = 256
    layers: int = 10
    heads: int = 4
    horizon: int = 15
    dropout: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    batch_size: int = 30
    centralized: bool = False


@dataclass
class BehaviorConfig:
    hidden: int = 256
    stack: int = 5
    lam: float = 0.95
    entropy_coef: float = 0.001
    clip_eps: float = 0.2
    ppo_epochs: int = 5
    lr: float = 5e-4
    grad_clip: float = 100.0
    n_rollouts: int = 600
    policy_updates: int = 4
    normalize_adv: bool = False
    critic_heads: int = 4


@dataclass
class ScheduleConfig:
    total_env_steps: int = 20000
    collect_per_epoch: int = 200
    tokenizer_updates: int = 200
    world_model_updates: int = 200
    eval_every: int = 1000
    eval_episodes: int = 10
    buffer_capacity: int = 50000
    checkpoint_every_epochs: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "env": EnvConfig,
    "tokenizer": TokenizerConfig,
    "aggregator": AggregatorConfig,
    "dynamics": DynamicsConfig,
    "behavior": BehaviorConfig,
    "schedule": ScheduleConfig,
}


def config_from_dict(data):
    """Build a RunConfig from nested dicts, rejecting unknown keys."""
    data = dict(data)
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = data.pop("seed")
    for name, cls in _SECTIONS.items():
        if name in data:
            section = dict(data.pop(name))
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(section) - known
            if unknown:
                raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = cls(**section)
    if data:
        raise ValueError(f"unknown top-level config keys: {sorted(data)}")
    return RunConfig(**kwargs)


def load_config(path):
    """Load a TOML run config (documented key = value sections)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as f:
        return config_from_dict(tomllib.load(f))


def build_world_model(cfg: RunConfig, obs_dim, n_agents, n_actions):
    """Construct tokenizer, aggregator, and dynamics per the config."""
    t = cfg.tokenizer
    if t.kind == "vq":
        tokenizer = VQTokenizer(
            obs_dim,
            n_codes=t.n_codes,
            n_tokens=t.n_tokens,
            code_dim=t.code_dim,
            hidden=t.hidden,
            layers=t.layers,
            beta=t.beta,
            ema_decay=t.ema_decay,
            ema_eps=t.ema_eps,
        )
    elif t.kind == "bins":
        tokenizer = BinsTokenizer(obs_dim, n_bins=t.n_codes)
    else:
        raise ValueError(f"unknown tokenizer kind {t.kind!r}")

    d = cfg.dynamics
    if d.centralized:
        layout = SequenceLayout(
            obs_tokens=n_agents * tokenizer.n_tokens,
            action_slots=n_agents,
            feature_slot=False,
        )
        aggregator = None
    else:
        layout = SequenceLayout(obs_tokens=tokenizer.n_tokens, action_slots=1, feature_slot=True)
        a = cfg.aggregator
        aggregator = agg.build_aggregator(
            a.kind,
            d.dim,
            n_agents,
            tokenizer.n_tokens + 1,
            cfg=dataclasses.asdict(a),
        )
    dynamics = LocalDynamics(
        n_codes=tokenizer.n_codes,
        n_actions=n_actions,
        layout=layout,
        horizon=d.horizon,
        dim=d.dim,
        layers=d.layers,
        heads=d.heads,
        dropout=d.dropout,
    )
    return WorldModel(tokenizer, dynamics, aggregator, n_agents, centralized=d.centralized)


class Trainer:
    """Owns the environment, buffer, models, optimizers, and RNG streams."""

    def __init__(self, config: RunConfig, out_dir=None, env=None):
        self.cfg = config
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        ss = np.random.SeedSequence(config.seed)
        env_seed, torch_seed, np_seed, act_seed, imag_seed = [
            int(s.generate_state(1)[0]) for s in ss.spawn(5)
        ]
        torch.manual_seed(torch_seed)
        self.env = env if env is not None else config.env.make(env_seed)
        spec = self.env.spec
        self.buffer = ReplayBuffer(config.schedule.buffer_capacity)
        self.np_rng = np.random.default_rng(np_seed)
        self.act_gen = torch.Generator().manual_seed(act_seed)
        self.imag_gen = torch.Generator().manual_seed(imag_seed)

        self.world_model = build_world_model(
            config, spec.obs_dim, spec.n_agents, spec.n_actions
        )
        b = config.behavior
        self.policy = PolicyNet(spec.obs_dim * b.stack, spec.n_actions, hidden=b.hidden)
        self.critic = CriticNet(
            spec.obs_dim * b.stack, spec.n_agents, hidden=b.hidden, heads=b.critic_heads
        )
        self.learner = BehaviorLearner(
            self.policy,
            self.critic,
            lam=b.lam,
            clip_eps=b.clip_eps,
            entropy_coef=b.entropy_coef,
            ppo_epochs=b.ppo_epochs,
            lr=b.lr,
            grad_clip=b.grad_clip,
            normalize_adv=b.normalize_adv,
        )
        tok = self.world_model.tok
        self.tok_opt = (
            torch.optim.AdamW(tok.parameters(), lr=config.tokenizer.lr)
            if isinstance(tok, torch.nn.Module)
            else None
        )
        wm_params = list(self.world_model.dynamics.parameters())
        if self.world_model.aggregator is not None:
            wm_params += list(self.world_model.aggregator.parameters())
        self.wm_opt = torch.optim.AdamW(
            wm_params, lr=config.dynamics.lr, weight_decay=config.dynamics.weight_decay
        )

        self.env_steps = 0
        self.epoch = 0
        self._cur = None  # (obs, avail, stack) during collection
        self._last_eval_step = -1

    # -- helpers ---------------------------------------------------------------

    def _log(self, phase, **metrics):
        row = {"step": self.env_steps, "epoch": self.epoch, "phase": phase, **metrics}
        if self.out_dir:
            with open(self.out_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(row) + "\n")
        return row

    def _reconstruct(self, obs_np):
        obs = torch.from_numpy(np.asarray(obs_np, dtype=np.float32))
        return self.world_model.tok.reconstruct(obs)

    def _reset_collection(self):
        obs, avail = self.env.reset()
        recon = self._reconstruct(obs)
        stack = recon.unsqueeze(1).repeat(1, self.cfg.behavior.stack, 1)
        self._cur = {"obs": obs, "avail": avail, "stack": stack}

    # -- phases ----------------------------------------------------------------

    def collect_experience(self, n_transitions):
        """Append n real transitions, acting on reconstructed observations."""
        self.world_model.eval()
        reward_sum, episodes_done = 0.0, 0
        with torch.no_grad():
            for _ in range(n_transitions):
                if self._cur is None:
                    self._reset_collection()
                cur = self._cur
                avail_t = torch.from_numpy(cur["avail"])
                actions, _ = act(
                    self.policy,
                    cur["stack"].flatten(1),
                    avail_t,
                    mode="sample",
                    generator=self.act_gen,
                )
                actions_np = actions.numpy()
                next_obs, reward, cont, next_avail = self.env.step(actions_np)
                self.buffer.append(
                    StepRecord(
                        obs=np.asarray(cur["obs"], dtype=np.float32),
                        avail=np.asarray(cur["avail"], dtype=bool),
                        actions=np.asarray(actions_np, dtype=np.int64),
                        reward=float(reward),
                        continuation=float(cont),
                    )
                )
                self.env_steps += 1
                reward_sum += float(reward)
                if cont == 0.0:
                    episodes_done += 1
                    self._cur = None
                else:
                    recon = self._reconstruct(next_obs)
                    stack = torch.cat([cur["stack"][:, 1:], recon.unsqueeze(1)], dim=1)
                    self._cur = {"obs": next_obs, "avail": next_avail, "stack": stack}
        return self._log(
            "collect",
            transitions=n_transitions,
            reward_sum=reward_sum,
            episodes_done=episodes_done,
            buffer_size=len(self.buffer),
        )

    def train_tokenizer(self, updates=None):
        updates = updates if updates is not None else self.cfg.schedule.tokenizer_updates
        tok = self.world_model.tok
        if isinstance(tok, BinsTokenizer):
            if not tok.fitted and len(self.buffer) > 0:
                obs = self.buffer.first_observations(self.cfg.tokenizer.bins_fit_samples)
                tok.fit(obs.reshape(-1, obs.shape[-1]))
            return self._log("tokenizer", kind="bins", fitted=tok.fitted)
        tok.train()
        last = {}
        used = set()
        for _ in range(updates):
            obs = self.buffer.sample_observations(
                self.cfg.tokenizer.batch_size, self.np_rng
            )
            batch = torch.from_numpy(obs.reshape(-1, obs.shape[-1]))
            if not bool(tok.codes_initialized):
                tok.init_codes(batch)
            total, parts, tokens, z_e = tok.loss(batch)
            self.tok_opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(tok.parameters(), self.cfg.tokenizer.grad_clip)
            self.tok_opt.step()
            tok.ema_update(z_e, tokens)
            used.update(torch.unique(tokens).tolist())
            last = {k: float(v.detach()) for k, v in parts.items()}
        return self._log(
            "tokenizer",
            kind="vq",
            updates=updates,
            utilization=len(used) / tok.n_codes,
            **last,
        )

    def segment_batch(self, batch_size, horizon):
        """Sample segments and stack them into training tensors."""
        segs = self.buffer.sample_batch(batch_size, horizon, self.np_rng)
        to = lambda arr, dt: torch.from_numpy(np.stack(arr).astype(dt))
        return {
            "obs": to([s.obs for s in segs], np.float32),
            "actions": to([s.actions for s in segs], np.int64),
            "reward": to([s.reward for s in segs], np.float32),
            "cont": to([s.continuation for s in segs], np.float32),
            "avail": to([s.avail for s in segs], np.float32),
            "pad": to([s.pad for s in segs], bool),
        }

    def world_model_update(self, batch):
        """One gradient step on dynamics + aggregator; returns loss parts."""
        parts = self.world_model.loss(
            batch["obs"], batch["actions"], batch["reward"],
            batch["cont"], batch["avail"], batch["pad"],
        )
        self.wm_opt.zero_grad(set_to_none=True)
        parts["total"].backward()
        torch.nn.utils.clip_grad_norm_(
            [p for g in self.wm_opt.param_groups for p in g["params"]],
            self.cfg.dynamics.grad_clip,
        )
        self.wm_opt.step()
        return parts

    def train_world_model(self, updates=None):
        updates = updates if updates is not None else self.cfg.schedule.world_model_updates
        self.world_model.train()
        last = {}
        try:
            for _ in range(updates):
                batch = self.segment_batch(
                    self.cfg.dynamics.batch_size, self.cfg.dynamics.horizon
                )
                parts = self.world_model_update(batch)
                last = {k: float(v.detach()) for k, v in parts.items()}
        except RuntimeError:
            if self.out_dir:
                self.save_checkpoint(self.out_dir / "last_good.pt")
            raise
        return self._log("world_model", updates=updates, **last)

    def train_agents(self, updates=None):
        """Imagination + PPO; never touches the real environment."""
        from mawm.imagination import imagine

        updates = updates if updates is not None else self.cfg.behavior.policy_updates
        self.world_model.eval()
        b = self.cfg.behavior
        last = {}
        for _ in range(updates):
            obs, avail = self.buffer.sample_initial_states(b.n_rollouts, self.np_rng)
            rollout = imagine(
                self.world_model,
                self.policy,
                torch.from_numpy(obs.astype(np.float32)),
                torch.from_numpy(avail),
                horizon=self.cfg.dynamics.horizon,
                n_stack=b.stack,
                generator=self.imag_gen,
            )
            last = self.learner.update(rollout)
        return self._log("behavior", updates=updates, **last)

    # -- evaluation and main loop ----------------------------------------------

    def evaluate(self, episodes=None, greedy=True):
        episodes = episodes if episodes is not None else self.cfg.schedule.eval_episodes
        seed = int(
            np.random.SeedSequence((self.cfg.seed, self.env_steps, 0xE7A1)).generate_state(1)[0]
        )
        env = self.cfg.env.make(seed)
        self.world_model.eval()
        successes, returns = [], []
        with torch.no_grad():
            for _ in range(episodes):
                obs, avail = env.reset()
                recon = self._reconstruct(obs)
                stack = recon.unsqueeze(1).repeat(1, self.cfg.behavior.stack, 1)
                total, last_reward = 0.0, 0.0
                while True:
                    actions, _ = act(
                        self.policy,
                        stack.flatten(1),
                        torch.from_numpy(avail),
                        mode="greedy" if greedy else "sample",
                        generator=self.act_gen,
                    )
                    obs, reward, cont, avail = env.step(actions.numpy())
                    total += float(reward)
                    last_reward = float(reward)
                    if cont == 0.0:
                        break
                    recon = self._reconstruct(obs)
                    stack = torch.cat([stack[:, 1:], recon.unsqueeze(1)], dim=1)
                successes.append(1.0 if last_reward >= 1.0 else 0.0)
                returns.append(total)
        result = {
            "success_rate": float(np.mean(successes)),
            "mean_return": float(np.mean(returns)),
            "std_return": float(np.std(returns)),
            "episodes": episodes,
        }
        self._log("eval", **result)
        return result

    def run(self, stop_at_success_rate=None):
        """Full training loop up to the env-step budget."""
        sched = self.cfg.schedule
        best = {"success_rate": 0.0, "mean_return": -np.inf}
        while self.env_steps < sched.total_env_steps:
            self.epoch += 1
            t0 = time.monotonic()
            remaining = sched.total_env_steps - self.env_steps
            self.collect_experience(min(sched.collect_per_epoch, remaining))
            self.train_tokenizer()
            self.train_world_model()
            self.train_agents()
            if (
                self.env_steps // sched.eval_every
                > self._last_eval_step // sched.eval_every
            ):
                self._last_eval_step = self.env_steps
                result = self.evaluate()
                best["success_rate"] = max(best["success_rate"], result["success_rate"])
                best["mean_return"] = max(best["mean_return"], result["mean_return"])
                if (
                    stop_at_success_rate is not None
                    and result["success_rate"] >= stop_at_success_rate
                ):
                    break
            self._log("epoch", seconds=time.monotonic() - t0)
            if self.out_dir and self.epoch % sched.checkpoint_every_epochs == 0:
                self.save_checkpoint(self.out_dir / "checkpoint.pt")
        if self.out_dir:
            self.save_checkpoint(self.out_dir / "checkpoint.pt")
        return {"env_steps": self.env_steps, "epoch": self.epoch, **best}

    # -- checkpointing -----------------------------------------------------------

    def save_checkpoint(self, path):
        tok = self.world_model.tok
        state = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "env_steps": self.env_steps,
            "epoch": self.epoch,
            "last_eval_step": self._last_eval_step,
            "models": {
                "tokenizer": tok.state_dict(),
                "dynamics": self.world_model.dynamics.state_dict(),
                "aggregator": (
                    self.world_model.aggregator.state_dict()
                    if self.world_model.aggregator is not None
                    else None
                ),
                "policy": self.policy.state_dict(),
                "critic": self.critic.state_dict(),
            },
            "opts": {
                "tokenizer": self.tok_opt.state_dict() if self.tok_opt else None,
                "world_model": self.wm_opt.state_dict(),
                "learner": self.learner.state_dict(),
            },
            "rngs": {
                "torch_global": torch.get_rng_state(),
                "act_gen": self.act_gen.get_state(),
                "imag_gen": self.imag_gen.get_state(),
                "np_rng": self.np_rng.bit_generator.state,
                "env": self.env.get_state(),
            },
            "buffer": self.buffer.state_dict(),
            "collect_cur": self._cur,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(state, path)
        return path

    def load_checkpoint(self, path):
        state = torch.load(path, weights_only=False)
        if state["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state['version']}")
        if state["config_hash"] != self.cfg.hash():
            raise ValueError("checkpoint was produced by a different config")
        self.env_steps = state["env_steps"]
        self.epoch = state["epoch"]
        self._last_eval_step = state["last_eval_step"]
        self.world_model.tok.load_state_dict(state["models"]["tokenizer"])
        self.world_model.dynamics.load_state_dict(state["models"]["dynamics"])
        if self.world_model.aggregator is not None:
            self.world_model.aggregator.load_state_dict(state["models"]["aggregator"])
        self.policy.load_state_dict(state["models"]["policy"])
        self.critic.load_state_dict(state["models"]["critic"])
        if self.tok_opt:
            self.tok_opt.load_state_dict(state["opts"]["tokenizer"])
        self.wm_opt.load_state_dict(state["opts"]["world_model"])
        self.learner.load_state_dict(state["opts"]["learner"])
        torch.set_rng_state(state["rngs"]["torch_global"])
        self.act_gen.set_state(state["rngs"]["act_gen"])
        self.imag_gen.set_state(state["rngs"]["imag_gen"])
        self.np_rng.bit_generator.state = state["rngs"]["np_rng"]
        self.env.set_state(state["rngs"]["env"])
        self.buffer.load_state_dict(state["buffer"])
        self._cur = state["collect_cur"]
        return self

    @classmethod
    def from_checkpoint(cls, path, out_dir=None):
        state = torch.load(path, weights_only=False)
        trainer = cls(config_from_dict(state["config"]), out_dir=out_dir)
        trainer.load_checkpoint(path)
        return trainer


# -- desk-scale presets ---------------------------------------------------------


def desk_coop_switch_config(seed=0):
    """Small-model schedule that solves 2-agent coop-switch on a CPU."""
    return RunConfig(
        seed=seed,
        env=EnvConfig(name="coop-switch", n_agents=2, grid_size=5, episode_limit=50),
        tokenizer=TokenizerConfig(
            n_codes=64, n_tokens=4, code_dim=16, hidden=128, batch_size=256
        ),
        aggregator=AggregatorConfig(
            cross_heads=4, inner_layers=2, inner_heads=4, head_dim=16
        ),
        dynamics=DynamicsConfig(
            dim=64, layers=3, heads=4, horizon=8, lr=3e-4, batch_size=16
        ),
        behavior=BehaviorConfig(hidden=128, n_rollouts=64, policy_updates=4),
        schedule=ScheduleConfig(
            total_env_steps=20000,
            collect_per_epoch=200,
            tokenizer_updates=40,
            world_model_updates=40,
            eval_every=1000,
            eval_episodes=10,
        ),
    )


def desk_coupled_chain_config(seed=0, state_dim=4, n_agents=3):
    """Small-model config for the coupled-chain prediction studies."""
    return RunConfig(
        seed=seed,
        env=EnvConfig(
            name="coupled-chain",
            n_agents=n_agents,
            state_dim=state_dim,
            episode_limit=50,
        ),
        tokenizer=TokenizerConfig(
            n_codes=64, n_tokens=4, code_dim=16, hidden=128, batch_size=256
        ),
        aggregator=AggregatorConfig(
            cross_heads=4, inner_layers=2, inner_heads=4, head_dim=16
        ),
        dynamics=DynamicsConfig(
            dim=64, layers=3, heads=4, horizon=8, lr=3e-4, batch_size=16
        ),
        behavior=BehaviorConfig(hidden=128, n_rollouts=64, policy_updates=4),
        schedule=ScheduleConfig(
            total_env_steps=10000,
            collect_per_epoch=200,
            tokenizer_updates=40,
            world_model_updates=40,
            eval_every=2000,
            eval_episodes=10,
        ),
    )
