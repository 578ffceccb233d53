"""Actor-critic trained purely on imagined rollouts.

The actor is a 3-layer ReLU MLP over stacked reconstructed observations with
availability-masked logits; the critic adds one self-attention layer across
agents on top of a 3-layer MLP so each agent's value conditions on the whole
team's reconstructed observations. Targets are recursive lambda-returns and
updates use the PPO clipped surrogate with an entropy bonus; parameters are
shared across agents.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from mawm.nets import MultiheadAttention, mlp


class PolicyNet(nn.Module):
    """Shared actor: stacked observation in, masked action logits out."""

    def __init__(self, obs_dim, n_actions, hidden=256):
        super().__init__()
        self.net = mlp(obs_dim, hidden, n_actions, layers=3, act=nn.ReLU)

    def forward(self, obs):
        return self.net(obs)


class CriticNet(nn.Module):
    """Per-agent value over all agents' observations.

    A 3-layer MLP encodes each agent's stacked observation; one residual
    self-attention layer (agents ordered by index, learned id embeddings)
    mixes the team before a linear value head.
    """

    def __init__(self, obs_dim, n_agents, hidden=256, heads=4):
        super().__init__()
        self.n_agents = n_agents
        self.encoder = mlp(obs_dim, hidden, hidden, layers=3, act=nn.ReLU)
        self.agent_emb = nn.Embedding(n_agents, hidden)
        self.ln = nn.LayerNorm(hidden)
        self.attn = MultiheadAttention(hidden, heads)
        self.value_head = nn.Linear(hidden, 1)

    def forward(self, joint_obs, agent_ids=None):
        """joint_obs (B, n, obs_dim) -> values (B, n)."""
        B, n, _ = joint_obs.shape
        if agent_ids is None:
            agent_ids = torch.arange(n, device=joint_obs.device)
        h = self.encoder(joint_obs) + self.agent_emb(agent_ids)
        h = h + self.attn(self.ln(h))
        return self.value_head(h).squeeze(-1)


def masked_logits(logits, avail):
    """Set unavailable actions to -inf so they get exactly zero probability."""
    if not avail.any(dim=-1).all():
        raise ValueError("availability mask with no available action")
    return logits.masked_fill(~avail, float("-inf"))


def masked_distribution(logits, avail):
    """Probabilities, log-probabilities, and entropy of the masked softmax.

    Log-probabilities are -inf at masked actions; entropy sums only over
    available actions so it is finite.
    """
    ml = masked_logits(logits, avail)
    logp = F.log_softmax(ml, dim=-1)
    p = logp.exp()
    ent = -(p * logp.masked_fill(~avail, 0.0)).sum(-1)
    return p, logp, ent


def act(policy, obs, avail, mode="sample", generator=None):
    """Pick actions under the availability mask.

    mode="sample" draws from the masked softmax; mode="greedy" takes the
    masked argmax (evaluation protocol).
    """
    logits = policy(obs)
    p, logp, _ = masked_distribution(logits, avail)
    if mode == "greedy":
        actions = p.argmax(dim=-1)
    elif mode == "sample":
        flat = p.reshape(-1, p.shape[-1])
        actions = torch.multinomial(flat, 1, generator=generator).view(p.shape[:-1])
    else:
        raise ValueError(f"unknown act mode {mode!r}")
    return actions, logp.gather(-1, actions.unsqueeze(-1)).squeeze(-1)


def lambda_returns(rewards, discounts, values, lam):
    """Recursive exponentially-weighted mixture of TD targets.

    rewards/discounts: (..., M); values: (..., M + 1). Returns (..., M + 1)
    with base case ``ret[M] = values[M]`` and, for t < M,
    ``ret[t] = r[t] + g[t] * ((1 - lam) * values[t] + lam * ret[t + 1])``
    (the one-step bootstrap reads the value at the same index t).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    M = rewards.shape[-1]
    if discounts.shape[-1] != M or values.shape[-1] != M + 1:
        raise ValueError("need rewards/discounts of length M and values of length M+1")
    out = torch.empty_like(values)
    out[..., M] = values[..., M]
    for t in range(M - 1, -1, -1):
        out[..., t] = rewards[..., t] + discounts[..., t] * (
            (1.0 - lam) * values[..., t] + lam * out[..., t + 1]
        )
    return out


def critic_loss(values, targets, weight):
    """Mean squared error against gradient-stopped lambda-returns.

    values/targets/weight: (..., T) with weight zeroing padded or dead steps
    and the excluded final step.
    """
    se = (values - targets.detach()) ** 2
    return _weighted_mean(se, weight)


def ppo_actor_loss(new_logp, old_logp, advantages, entropy, weight, clip_eps=0.2, entropy_coef=0.001):
    """Negative clipped surrogate plus entropy bonus, averaged over valid
    steps. Advantages are treated as constants."""
    adv = advantages.detach()
    ratio = (new_logp - old_logp.detach()).exp()
    surr = torch.minimum(
        ratio * adv, ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv
    )
    return -_weighted_mean(surr + entropy_coef * entropy, weight)


def _weighted_mean(x, w):
    w = w.to(x.dtype)
    return (x * w).sum() / w.sum().clamp_min(1.0)


class BehaviorLearner:
    """PPO updates for shared actor and attention critic on imagined rollouts.

    Lambda-return targets and advantages are computed once per rollout from
    the pre-update critic and held fixed across the PPO epochs. The critic
    regresses every step except the last (which only serves as the
    bootstrap); the actor term covers all steps, its advantage at the last
    step being identically zero.
    """

    def __init__(
        self,
        policy,
        critic,
        lam=0.95,
        clip_eps=0.2,
        entropy_coef=0.001,
        ppo_epochs=5,
        lr=5e-4,
        grad_clip=100.0,
        normalize_adv=False,
    ):
        self.policy = policy
        self.critic = critic
        self.lam = lam
        self.clip_eps = clip_eps
        self.entropy_coef = entropy_coef
        self.ppo_epochs = ppo_epochs
        self.grad_clip = grad_clip
        self.normalize_adv = normalize_adv
        self.actor_opt = torch.optim.Adam(policy.parameters(), lr=lr)
        self.critic_opt = torch.optim.Adam(critic.parameters(), lr=lr)

    def _joint_obs(self, rollout):
        # (B, n, H, D_in) -> (B*H, n, D_in) so the critic attends across agents
        B, n, H, d = rollout.stacked_obs.shape
        return rollout.stacked_obs.permute(0, 2, 1, 3).reshape(B * H, n, d)

    def _values(self, rollout):
        B, n, H, _ = rollout.stacked_obs.shape
        v = self.critic(self._joint_obs(rollout))
        return v.view(B, H, n).permute(0, 2, 1)

    def targets(self, rollout):
        """Frozen lambda-return targets and advantages, plus loss weights."""
        with torch.no_grad():
            values = self._values(rollout)
        H = rollout.horizon
        returns = lambda_returns(
            rollout.rewards[..., : H - 1],
            rollout.discounts[..., : H - 1],
            values,
            self.lam,
        )
        advantages = returns - values
        alive = rollout.alive.to(values.dtype)
        actor_w = alive
        critic_w = alive.clone()
        critic_w[..., -1] = 0.0
        if self.normalize_adv:
            m = _weighted_mean(advantages, actor_w)
            var = _weighted_mean((advantages - m) ** 2, actor_w)
            advantages = (advantages - m) / (var.sqrt() + 1e-8)
        return returns, advantages, actor_w, critic_w

    def update(self, rollout):
        returns, advantages, actor_w, critic_w = self.targets(rollout)
        B, n, H, d = rollout.stacked_obs.shape
        flat_obs = rollout.stacked_obs.reshape(-1, d)
        flat_avail = rollout.avail.reshape(-1, rollout.avail.shape[-1])
        flat_actions = rollout.actions.reshape(-1)
        metrics = {}
        for _ in range(self.ppo_epochs):
            logits = self.policy(flat_obs)
            _, logp, ent = masked_distribution(logits, flat_avail)
            new_logp = logp.gather(-1, flat_actions.unsqueeze(-1)).squeeze(-1)
            a_loss = ppo_actor_loss(
                new_logp.view(B, n, H),
                rollout.old_logp,
                advantages,
                ent.view(B, n, H),
                actor_w,
                clip_eps=self.clip_eps,
                entropy_coef=self.entropy_coef,
            )
            self.actor_opt.zero_grad(set_to_none=True)
            a_loss.backward()
            torch.nn.utils.clip_grad_norm_(self.policy.parameters(), self.grad_clip)
            self.actor_opt.step()

            values = self._values(rollout)
            c_loss = critic_loss(values, returns, critic_w)
            self.critic_opt.zero_grad(set_to_none=True)
            c_loss.backward()
            torch.nn.utils.clip_grad_norm_(self.critic.parameters(), self.grad_clip)
            self.critic_opt.step()
            metrics = {
                "actor_loss": float(a_loss.detach()),
                "critic_loss": float(c_loss.detach()),
                "entropy": float(_weighted_mean(ent.view(B, n, H), actor_w).detach()),
                "mean_return_target": float(_weighted_mean(returns, actor_w)),
                "mean_imagined_reward": float(
                    _weighted_mean(rollout.rewards, actor_w)
                ),
            }
        return metrics

    def state_dict(self):
        return {
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
        }

    def load_state_dict(self, state):
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
