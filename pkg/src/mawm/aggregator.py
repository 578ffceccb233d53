"""Agent-wise representation aggregation over the joint per-timestep
token-embedding sequence.

The Perceiver aggregator cross-attends a learned per-agent query array onto
the joint sequence of all agents' observation-token and action embeddings
(length ``n_agents * block_len``), then refines the compressed sequence with
a small bidirectional transformer, yielding one global feature per agent.
A plain self-attention aggregator over the full joint sequence is kept as
the baseline for cost/quality comparisons, plus an analytic cost model for
both.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from mawm.nets import FeedForward, MultiheadAttention, TransformerBlock

PERCEIVER = "perceiver"
SELF_ATTENTION = "self_attention"
NONE = "none"


class PerceiverAggregator(nn.Module):
    """Compress the joint sequence into one feature vector per agent.

    Queries are per-run parameters sized by the number of agents; learned
    agent-index and slot embeddings are added to the inputs so the module
    can tell agents and token positions apart.
    """

    def __init__(
        self,
        dim,
        n_agents,
        block_len,
        cross_heads=8,
        inner_layers=2,
        inner_heads=8,
        head_dim=64,
        ff_mult=4,
        dropout=0.1,
    ):
        super().__init__()
        self.dim = dim
        self.n_agents = n_agents
        self.block_len = block_len
        self.queries = nn.Parameter(torch.randn(n_agents, dim) * 0.02)
        self.agent_emb = nn.Embedding(n_agents, dim)
        self.slot_emb = nn.Embedding(block_len, dim)
        self.emb_drop = nn.Dropout(dropout)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = MultiheadAttention(
            dim,
            cross_heads,
            head_dim=head_dim,
            attn_dropout=dropout,
            resid_dropout=dropout,
        )
        self.norm_ff = nn.LayerNorm(dim)
        self.cross_ff = FeedForward(dim, mult=ff_mult, dropout=dropout)
        self.inner = nn.ModuleList(
            TransformerBlock(
                dim,
                inner_heads,
                head_dim=head_dim,
                causal=False,
                attn_dropout=dropout,
                resid_dropout=dropout,
                ff_mult=ff_mult,
            )
            for _ in range(inner_layers)
        )
        self.ln_out = nn.LayerNorm(dim)

    def _tag(self, joint):
        B, L, _ = joint.shape
        if L != self.n_agents * self.block_len:
            raise ValueError(
                f"joint sequence length {L} is not n_agents({self.n_agents}) "
                f"x block({self.block_len})"
            )
        device = joint.device
        agent_ids = torch.arange(self.n_agents, device=device).repeat_interleave(
            self.block_len
        )
        slots = torch.arange(self.block_len, device=device).repeat(self.n_agents)
        return joint + self.agent_emb(agent_ids) + self.slot_emb(slots)

    def forward(self, joint):
        """joint: (B, n_agents * block_len, dim) -> (B, n_agents, dim)."""
        x = self.emb_drop(self._tag(joint))
        lat = self.queries.unsqueeze(0).expand(joint.shape[0], -1, -1)
        lat = lat + self.cross(self.norm_q(lat), kv=self.norm_kv(x))
        lat = lat + self.cross_ff(self.norm_ff(lat))
        for block in self.inner:
            lat = block(lat)
        return self.ln_out(lat)


class SelfAttentionAggregator(nn.Module):
    """Baseline: bidirectional self-attention over the joint sequence,
    returning one output per input position."""

    def __init__(
        self,
        dim,
        n_agents,
        block_len,
        layers=3,
        heads=8,
        head_dim=64,
        ff_mult=4,
        dropout=0.1,
    ):
        super().__init__()
        self.dim = dim
        self.n_agents = n_agents
        self.block_len = block_len
        self.agent_emb = nn.Embedding(n_agents, dim)
        self.slot_emb = nn.Embedding(block_len, dim)
        self.emb_drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(
                dim,
                heads,
                head_dim=head_dim,
                causal=False,
                attn_dropout=dropout,
                resid_dropout=dropout,
                ff_mult=ff_mult,
            )
            for _ in range(layers)
        )
        self.ln_out = nn.LayerNorm(dim)

    def forward_sequence(self, joint):
        """joint: (B, n_agents * block_len, dim) -> same shape."""
        B, L, _ = joint.shape
        if L != self.n_agents * self.block_len:
            raise ValueError(
                f"joint sequence length {L} is not n_agents({self.n_agents}) "
                f"x block({self.block_len})"
            )
        device = joint.device
        agent_ids = torch.arange(self.n_agents, device=device).repeat_interleave(
            self.block_len
        )
        slots = torch.arange(self.block_len, device=device).repeat(self.n_agents)
        x = self.emb_drop(joint + self.agent_emb(agent_ids) + self.slot_emb(slots))
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)

    def forward(self, joint):
        """Reduce to one feature per agent: the output at each agent's last
        slot (its action position), which attends over the whole sequence."""
        out = self.forward_sequence(joint)
        B = out.shape[0]
        idx = (
            torch.arange(self.n_agents, device=out.device) * self.block_len
            + self.block_len
            - 1
        )
        return out[:, idx]


def build_aggregator(kind, dim, n_agents, block_len, cfg=None):
    """Factory over aggregator kinds; ``none`` returns None (the dynamics
    model then fills the feature slot with its learned null embedding)."""
    cfg = cfg or {}
    if kind == NONE:
        return None
    if kind == PERCEIVER:
        return PerceiverAggregator(
            dim,
            n_agents,
            block_len,
            cross_heads=cfg.get("cross_heads", 8),
            inner_layers=cfg.get("inner_layers", 2),
            inner_heads=cfg.get("inner_heads", 8),
            head_dim=cfg.get("head_dim", 64),
            ff_mult=cfg.get("ff_mult", 4),
            dropout=cfg.get("dropout", 0.1),
        )
    if kind == SELF_ATTENTION:
        return SelfAttentionAggregator(
            dim,
            n_agents,
            block_len,
            layers=cfg.get("self_attn_layers", 3),
            heads=cfg.get("inner_heads", 8),
            head_dim=cfg.get("head_dim", 64),
            ff_mult=cfg.get("ff_mult", 4),
            dropout=cfg.get("dropout", 0.1),
        )
    raise ValueError(f"unknown aggregator kind {kind!r}")


# ---------------------------------------------------------------------------
# Analytic cost model. Counts one FLOP per multiply-accumulate in attention
# projections, score/value matmuls, and feed-forward layers; layer norms and
# softmaxes are ignored (dominant-term accounting).


def _attn_flops(q_len, kv_len, dim, inner, ff_len, ff_mult):
    proj_q = q_len * dim * inner
    proj_kv = 2 * kv_len * dim * inner
    scores = q_len * kv_len * inner
    values = q_len * kv_len * inner
    proj_out = q_len * inner * dim
    ff = ff_len * 2 * dim * (ff_mult * dim)
    return proj_q + proj_kv + scores + values + proj_out + ff


def flops_estimate(
    kind,
    n_agents,
    tokens_per_obs,
    dim=256,
    cross_heads=8,
    inner_layers=2,
    inner_heads=8,
    head_dim=64,
    ff_mult=4,
    self_attn_layers=3,
):
    """Aggregation cost for one timestep of a joint sequence of
    ``n_agents * (tokens_per_obs + 1)`` embeddings."""
    L = n_agents * (tokens_per_obs + 1)
    if kind == PERCEIVER:
        total = _attn_flops(n_agents, L, dim, cross_heads * head_dim, n_agents, ff_mult)
        for _ in range(inner_layers):
            total += _attn_flops(
                n_agents, n_agents, dim, inner_heads * head_dim, n_agents, ff_mult
            )
        return float(total)
    if kind == SELF_ATTENTION:
        total = 0
        for _ in range(self_attn_layers):
            total += _attn_flops(L, L, dim, inner_heads * head_dim, L, ff_mult)
        return float(total)
    raise ValueError(f"unknown aggregator kind {kind!r}")
