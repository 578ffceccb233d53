"""Autoregressive transformer over interleaved token sequences.

Each agent's trajectory segment becomes one sequence of per-timestep blocks
``[obs tokens | action token(s) | aggregated-feature slot]``. A shared
causal transformer predicts, per step: the next observation tokens (one at
a time, conditioned on the tokens already emitted within that step), the
individual reward, a continue/terminate Bernoulli, and the next step's
availability mask. Reward/discount/availability heads read the hidden state
at each block's final slot, which has seen the whole step including the
aggregated feature.

A ``WorldModel`` bundles tokenizer, aggregator, and transformer, exposing
teacher-forced loss computation and an incremental (KV-cached) interface
used by the imagination engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mawm.nets import TransformerBlock


@dataclass(frozen=True)
class SequenceLayout:
    """Composition of one timestep block in the embedded sequence."""

    obs_tokens: int
    action_slots: int = 1
    feature_slot: bool = True

    @property
    def block(self):
        return self.obs_tokens + self.action_slots + (1 if self.feature_slot else 0)

    def end_positions(self, n_steps, device=None):
        """Index of the final slot of each step block (head read points)."""
        return (
            torch.arange(n_steps, device=device) * self.block + self.block - 1
        )

    def token_query_positions(self, n_steps, device=None):
        """Positions whose hidden state predicts the NEXT step's obs tokens.

        Row s lists the obs_tokens query positions for targets of step s+1:
        the end slot of step s, then that step's first obs_tokens-1 token
        positions. Shape (n_steps - 1, obs_tokens).
        """
        s = torch.arange(n_steps - 1, device=device).unsqueeze(1)
        j = torch.arange(self.obs_tokens, device=device).unsqueeze(0)
        start_next = (s + 1) * self.block
        qpos = torch.where(j == 0, s * self.block + self.block - 1, start_next + j - 1)
        return qpos


class ContextOverflowError(RuntimeError):
    """Appending would exceed the model's trained context window."""


class RolloutContext:
    """KV cache plus the hidden state of the last appended position."""

    def __init__(self, batch_size):
        self.batch_size = batch_size
        self.past = None
        self.pos = 0
        self.h_last = None


class LocalDynamics(nn.Module):
    """GPT-style causal transformer with token/reward/discount/availability
    heads over the interleaved block layout."""

    def __init__(
        self,
        n_codes,
        n_actions,
        layout: SequenceLayout,
        horizon,
        dim=256,
        layers=10,
        heads=4,
        dropout=0.1,
    ):
        super().__init__()
        self.n_codes = n_codes
        self.n_actions = n_actions
        self.layout = layout
        self.horizon = horizon
        self.dim = dim
        self.max_pos = horizon * layout.block
        self.tok_emb = nn.Embedding(n_codes, dim)
        self.act_emb = nn.Embedding(n_actions, dim)
        self.pos_emb = nn.Parameter(torch.zeros(self.max_pos, dim))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.null_feature = nn.Parameter(torch.zeros(dim))
        self.emb_drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(
                dim,
                heads,
                causal=True,
                attn_dropout=dropout,
                resid_dropout=dropout,
            )
            for _ in range(layers)
        )
        self.ln_f = nn.LayerNorm(dim)
        self.token_head = nn.Linear(dim, n_codes)
        self.reward_head = nn.Linear(dim, 1)
        self.discount_head = nn.Linear(dim, 1)
        self.avail_head = nn.Linear(dim, layout.action_slots * n_actions)

    def embed_steps(self, tokens, actions, features=None, start_pos=0):
        """Interleave per-step blocks and add positional embeddings.

        tokens: (B, S, obs_tokens) long; actions: (B, S, action_slots) long;
        features: (B, S, dim) or None (learned null fills the slot).
        Returns (B, S * block, dim).
        """
        lo = self.layout
        B, S, T_o = tokens.shape
        if T_o != lo.obs_tokens or actions.shape[2] != lo.action_slots:
            raise ValueError("token/action shapes do not match the layout")
        parts = [self.tok_emb(tokens), self.act_emb(actions)]
        if lo.feature_slot:
            if features is None:
                feat = self.null_feature.expand(B, S, 1, self.dim)
            else:
                feat = features.unsqueeze(2)
            parts.append(feat.to(self.tok_emb.weight.dtype))
        x = torch.cat(parts, dim=2).reshape(B, S * lo.block, self.dim)
        end = start_pos + S * lo.block
        if end > self.max_pos:
            raise ContextOverflowError(
                f"sequence of {S} steps exceeds the {self.horizon}-step window"
            )
        return x + self.pos_emb[start_pos:end]

    def forward_hidden(self, x, past=None, use_cache=False):
        x = self.emb_drop(x)
        new_past = [] if use_cache else None
        for i, block in enumerate(self.blocks):
            pk = past[i] if past is not None else None
            if use_cache:
                x, kv = block(x, past_kv=pk, return_kv=True)
                new_past.append(kv)
            else:
                x = block(x, past_kv=pk)
        return self.ln_f(x), new_past

    def forward(self, tokens, actions, features=None):
        """Teacher-forced full pass; returns hidden states (B, L, dim)."""
        x = self.embed_steps(tokens, actions, features)
        h, _ = self.forward_hidden(x)
        return h

    # -- incremental decoding -------------------------------------------------

    def new_context(self, batch_size):
        return RolloutContext(batch_size)

    def _append(self, ctx: RolloutContext, x):
        if ctx.pos + x.shape[1] > self.max_pos:
            raise ContextOverflowError(
                f"context window overflow past {self.horizon} timesteps"
            )
        x = x + self.pos_emb[ctx.pos : ctx.pos + x.shape[1]]
        h, ctx.past = self.forward_hidden(x, past=ctx.past, use_cache=True)
        ctx.pos += x.shape[1]
        ctx.h_last = h[:, -1]
        return h

    def append_obs(self, ctx, tokens):
        """tokens: (B, obs_tokens) long."""
        self._append(ctx, self.tok_emb(tokens))

    def append_action_feature(self, ctx, actions, feature=None):
        """Append action slot(s) and the feature slot, then read the heads.

        actions: (B, action_slots) long; feature: (B, dim) or None.
        Returns reward (B,), continue probability (B,), availability
        probabilities (B, action_slots * n_actions).
        """
        x = self.act_emb(actions)
        if self.layout.feature_slot:
            feat = self.null_feature.expand(ctx.batch_size, self.dim) if feature is None else feature
            x = torch.cat([x, feat.unsqueeze(1).to(x.dtype)], dim=1)
        self._append(ctx, x)
        h = ctx.h_last
        return (
            self.reward_head(h).squeeze(-1),
            torch.sigmoid(self.discount_head(h)).squeeze(-1),
            torch.sigmoid(self.avail_head(h)),
        )

    def sample_obs_tokens(self, ctx, generator=None, temperature=1.0, greedy=False):
        """Sample the next step's obs tokens one at a time, appending each to
        the context before predicting the next (intra-step autoregression).
        Must be called right after ``append_action_feature``."""
        out = []
        for _ in range(self.layout.obs_tokens):
            logits = self.token_head(ctx.h_last)
            if greedy:
                tok = logits.argmax(dim=-1)
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                tok = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            out.append(tok)
            self._append(ctx, self.tok_emb(tok).unsqueeze(1))
        return torch.stack(out, dim=1)

    def token_logits_at(self, h, n_steps):
        """Token logits at every next-token query position.

        h: (B, L, dim) from a teacher-forced pass over n_steps blocks.
        Returns (B, n_steps - 1, obs_tokens, n_codes) aligned with the
        targets tokens[:, 1:].
        """
        qpos = self.layout.token_query_positions(n_steps, device=h.device)
        hq = h[:, qpos.reshape(-1)]
        logits = self.token_head(hq)
        return logits.view(h.shape[0], n_steps - 1, self.layout.obs_tokens, self.n_codes)


def dynamics_loss(model: LocalDynamics, tokens, actions, features, reward, cont, avail, pad):
    """Teacher-forced loss over a batch of flattened agent sequences.

    tokens (B, S, T_o) long; actions (B, S, T_a) long; features (B, S, D) or
    None; reward/cont (B, S); avail (B, S, T_a * n_actions) float targets;
    pad (B, S) bool marking padded steps.

    Components are means over valid positions: cross-entropy on next-step
    observation tokens, smooth-L1 on reward, Bernoulli NLL on the
    continuation label (0 or 0.99), and per-action Bernoulli NLL on the
    next step's availability mask. Total is their sum.
    """
    B, S, _ = tokens.shape
    h = model(tokens, actions, features)
    reward = reward.to(h.dtype)
    cont = cont.to(h.dtype)
    avail = avail.to(h.dtype)
    end_pos = model.layout.end_positions(S, device=h.device)
    h_end = h[:, end_pos]
    valid = (~pad).to(h.dtype)

    reward_pred = model.reward_head(h_end).squeeze(-1)
    reward_term = _masked_mean(
        F.smooth_l1_loss(reward_pred, reward, reduction="none"), valid
    )
    disc_logit = model.discount_head(h_end).squeeze(-1)
    discount_term = _masked_mean(
        F.binary_cross_entropy_with_logits(disc_logit, cont, reduction="none"), valid
    )

    zero = reward_term.new_zeros(())
    token_term, avail_term = zero, zero
    if S > 1:
        valid_next = (~pad[:, 1:]).to(h.dtype)
        logits = model.token_logits_at(h, S)
        ce = F.cross_entropy(
            logits.reshape(-1, model.n_codes),
            tokens[:, 1:].reshape(-1),
            reduction="none",
        ).view(B, S - 1, model.layout.obs_tokens)
        token_term = _masked_mean(ce, valid_next.unsqueeze(-1).expand_as(ce))

        avail_logits = model.avail_head(h_end[:, :-1])
        bce = F.binary_cross_entropy_with_logits(
            avail_logits, avail[:, 1:], reduction="none"
        )
        avail_term = _masked_mean(bce, valid_next.unsqueeze(-1).expand_as(bce))

    total = token_term + reward_term + discount_term + avail_term
    parts = {
        "total": total,
        "token_ce": token_term,
        "reward": reward_term,
        "discount": discount_term,
        "avail": avail_term,
    }
    if not torch.isfinite(total):
        raise RuntimeError(
            "non-finite dynamics loss: "
            + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        )
    return parts


def _masked_mean(x, w):
    denom = w.sum().clamp_min(1.0)
    return (x * w).sum() / denom


class WorldModel(nn.Module):
    """Tokenizer + aggregator + shared dynamics transformer.

    In the decentralized mode every agent contributes one sequence (batched
    together through shared weights) and the aggregator injects one global
    feature per agent per step. The centralized variant concatenates all
    agents into a single joint sequence per step and disables aggregation.
    """

    def __init__(self, tokenizer, dynamics: LocalDynamics, aggregator, n_agents, centralized=False):
        super().__init__()
        self.tokenizer = tokenizer if isinstance(tokenizer, nn.Module) else None
        self._tokenizer_ref = tokenizer
        self.dynamics = dynamics
        self.aggregator = aggregator
        self.n_agents = n_agents
        self.centralized = centralized
        if centralized and aggregator is not None:
            raise ValueError("the centralized variant disables aggregation")

    @property
    def tok(self):
        return self._tokenizer_ref

    @property
    def window(self):
        return self.dynamics.horizon

    @property
    def tokens_per_obs(self):
        return self.tok.n_tokens

    # -- token/observation plumbing ------------------------------------------

    def encode_obs(self, obs):
        """obs (B, n, obs_dim) -> tokens (B, n, T) via the frozen tokenizer."""
        return self.tok.encode(obs)

    def decode_tokens(self, tokens):
        return self.tok.decode(tokens)

    # -- aggregation ----------------------------------------------------------

    def joint_step_embedding(self, tokens, actions):
        """Assemble the per-timestep joint sequence of all agents' token and
        action embeddings: (B, n, T) + (B, n) -> (B, n*(T+1), D)."""
        te = self.dynamics.tok_emb(tokens)
        ae = self.dynamics.act_emb(actions).unsqueeze(2)
        return torch.cat([te, ae], dim=2).flatten(1, 2)

    def aggregate_step(self, tokens, actions):
        """One timestep of agent-wise aggregation; None when disabled."""
        if self.aggregator is None:
            return None
        return self.aggregator(self.joint_step_embedding(tokens, actions))

    def features_for_segments(self, tokens, actions):
        """Teacher-forced aggregation over whole segments.

        tokens (B, n, S, T), actions (B, n, S) -> (B, n, S, D) or None.
        """
        if self.aggregator is None:
            return None
        B, n, S, T = tokens.shape
        flat_t = tokens.permute(0, 2, 1, 3).reshape(B * S, n, T)
        flat_a = actions.permute(0, 2, 1).reshape(B * S, n)
        feats = self.aggregate_step(flat_t, flat_a)
        return feats.view(B, S, n, -1).permute(0, 2, 1, 3)

    # -- incremental rollout interface (decentralized layout) -----------------

    def new_rollout(self, batch_size):
        if self.centralized:
            raise NotImplementedError("imagination runs on the decentralized layout")
        return self.dynamics.new_context(batch_size * self.n_agents)

    def append_obs(self, ctx, tokens):
        """tokens (B, n, T): append the current step's observation tokens."""
        self.dynamics.append_obs(ctx, tokens.flatten(0, 1))

    def predict_step(self, ctx, tokens, actions):
        """Append actions plus aggregated features and read the step heads.

        tokens (B, n, T) are the current step's (already appended) tokens,
        needed again here for the joint aggregation with the chosen actions.
        Returns reward (B, n), continue probability (B, n), and availability
        probabilities (B, n, n_actions) for the next step.
        """
        B, n = actions.shape
        feats = self.aggregate_step(tokens, actions)
        flat_feat = None if feats is None else feats.flatten(0, 1)
        r, c, av = self.dynamics.append_action_feature(
            ctx, actions.flatten(0, 1).unsqueeze(-1), flat_feat
        )
        return r.view(B, n), c.view(B, n), av.view(B, n, -1)

    def sample_next_tokens(self, ctx, generator=None, temperature=1.0, greedy=False):
        """Intra-step autoregressive decode of the next observation tokens."""
        toks = self.dynamics.sample_obs_tokens(
            ctx, generator=generator, temperature=temperature, greedy=greedy
        )
        return toks.view(-1, self.n_agents, self.dynamics.layout.obs_tokens)

    # -- training loss ---------------------------------------------------------

    def loss(self, obs, actions, reward, cont, avail, pad):
        """Dynamics loss on one segment batch (observations still raw).

        obs (B, n, S, obs_dim); actions (B, n, S) long; reward/cont (B, S);
        avail (B, n, S, A) float; pad (B, S) bool.
        """
        B, n, S, _ = obs.shape
        with torch.no_grad():
            tokens = self.tok.encode(obs)
        if self.centralized:
            seq_tokens = tokens.permute(0, 2, 1, 3).reshape(B, S, -1)
            seq_actions = actions.permute(0, 2, 1).reshape(B, S, n)
            features = None
            seq_reward, seq_cont, seq_pad = reward, cont, pad
            seq_avail = avail.permute(0, 2, 1, 3).reshape(B, S, -1)
        else:
            features = self.features_for_segments(tokens, actions)
            seq_tokens = tokens.flatten(0, 1)
            seq_actions = actions.flatten(0, 1).unsqueeze(-1)
            features = None if features is None else features.flatten(0, 1)
            seq_reward = reward.repeat_interleave(n, dim=0)
            seq_cont = cont.repeat_interleave(n, dim=0)
            seq_pad = pad.repeat_interleave(n, dim=0)
            seq_avail = avail.flatten(0, 1)
        return dynamics_loss(
            self.dynamics,
            seq_tokens,
            seq_actions,
            features,
            seq_reward,
            seq_cont,
            seq_avail,
            seq_pad,
        )
