"""Parallel rollout engine inside the world model.

Starting from buffered joint observations, the policy acts on reconstructed
observations restricted to predicted availability masks, the aggregator
fuses the joint sampled tokens and actions each step, and the dynamics
transformer predicts rewards, discounts, masks, and next tokens for all
agents in one batch. No real environment is touched and no gradients flow
into world-model weights.

The engine only needs the following world-model surface, so tests can drive
it with hand-built stand-ins: ``window``, ``n_agents``, ``encode_obs``,
``decode_tokens``, ``new_rollout``, ``append_obs``, ``predict_step``, and
``sample_next_tokens``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from mawm.behavior import act


@dataclass
class ImaginedRollout:
    """H imagined steps per agent; everything below has a leading (B, n, H).

    ``alive[t]`` marks steps before any predicted termination; downstream
    losses weight by it. ``avail`` is the mask the policy obeyed at each
    step. The final step carries reward/discount reads but no decoded
    successor (the recursion bootstraps at its value instead).
    """

    obs: torch.Tensor  # (B, n, H, obs_dim) reconstructed
    stacked_obs: torch.Tensor  # (B, n, H, stack * obs_dim) policy inputs
    actions: torch.Tensor  # (B, n, H) long
    old_logp: torch.Tensor  # (B, n, H)
    rewards: torch.Tensor  # (B, n, H)
    discounts: torch.Tensor  # (B, n, H) = 0.99 * continue probability
    cont_probs: torch.Tensor  # (B, n, H)
    avail: torch.Tensor  # (B, n, H, n_actions) bool
    alive: torch.Tensor  # (B, n, H) bool

    @property
    def horizon(self):
        return self.obs.shape[2]


def repair_avail(mask, probs):
    """Guarantee at least one available action by forcing the head's argmax
    where a predicted mask came out all-false."""
    empty = ~mask.any(dim=-1)
    if empty.any():
        forced = probs.argmax(dim=-1, keepdim=True)
        mask = mask.clone()
        mask.scatter_(-1, forced, mask.gather(-1, forced) | empty.unsqueeze(-1))
    return mask


@torch.no_grad()
def imagine(
    world_model,
    policy,
    init_obs,
    init_avail,
    horizon,
    n_stack=5,
    generator=None,
    temperature=1.0,
    discount_scale=0.99,
    term_threshold=0.5,
):
    """Roll ``horizon`` imagined steps for a batch of initial joint states.

    init_obs (B, n, obs_dim) raw observations drawn from the buffer;
    init_avail (B, n, n_actions) their recorded availability masks.
    """
    B, n, _ = init_obs.shape
    if n != world_model.n_agents:
        raise ValueError("initial observations disagree with the agent count")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    if horizon > world_model.window:
        raise ValueError(
            f"horizon {horizon} exceeds the world model's {world_model.window}-step window"
        )
    tokens = world_model.encode_obs(init_obs)
    recon = world_model.decode_tokens(tokens)
    stack = recon.unsqueeze(2).repeat(1, 1, n_stack, 1)
    avail = init_avail.bool().clone()
    alive = torch.ones(B, n, dtype=torch.bool, device=recon.device)
    ctx = world_model.new_rollout(B)

    steps = {k: [] for k in (
        "obs", "stacked_obs", "actions", "old_logp", "rewards",
        "discounts", "cont_probs", "avail", "alive",
    )}
    world_model.append_obs(ctx, tokens)  # sampled tokens self-append later
    for t in range(horizon):
        stacked = stack.flatten(2)
        actions, logp = act(policy, stacked, avail, mode="sample", generator=generator)
        reward, cont_prob, avail_prob = world_model.predict_step(ctx, tokens, actions)

        steps["obs"].append(recon)
        steps["stacked_obs"].append(stacked)
        steps["actions"].append(actions)
        steps["old_logp"].append(logp)
        steps["rewards"].append(reward)
        steps["discounts"].append(discount_scale * cont_prob)
        steps["cont_probs"].append(cont_prob)
        steps["avail"].append(avail)
        steps["alive"].append(alive)

        if t < horizon - 1:
            tokens = world_model.sample_next_tokens(
                ctx, generator=generator, temperature=temperature
            )
            recon = world_model.decode_tokens(tokens)
            stack = torch.cat([stack[:, :, 1:], recon.unsqueeze(2)], dim=2)
            avail = repair_avail(avail_prob >= term_threshold, avail_prob)
            alive = alive & (cont_prob >= term_threshold)

    return ImaginedRollout(**{k: torch.stack(v, dim=2) for k, v in steps.items()})


@torch.no_grad()
def replay_segment(world_model, obs, actions, horizon=None, greedy=False, generator=None):
    """Teacher-forced action replay for compounding-error measurement.

    obs (B, n, S, obs_dim) and actions (B, n, S) come from real segments;
    the model predicts observations for steps 1..horizon given the recorded
    actions. Returns predicted observations (B, n, horizon, obs_dim)
    aligned with obs[:, :, 1 : horizon + 1].
    """
    B, n, S, _ = obs.shape
    max_pred = min(S - 1, world_model.window - 1)
    horizon = max_pred if horizon is None else horizon
    if horizon > max_pred:
        raise ValueError(
            f"replay horizon {horizon} exceeds the decodable window ({max_pred})"
        )
    tokens = world_model.encode_obs(obs[:, :, 0])
    ctx = world_model.new_rollout(B)
    world_model.append_obs(ctx, tokens)
    preds = []
    for t in range(horizon):
        world_model.predict_step(ctx, tokens, actions[:, :, t])
        tokens = world_model.sample_next_tokens(ctx, generator=generator, greedy=greedy)
        preds.append(world_model.decode_tokens(tokens))
    return torch.stack(preds, dim=2)
