"""Shared network building blocks: MLPs, multi-head attention with optional
KV caching and attention-map capture, and pre-norm transformer blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp(in_dim, hidden, out_dim, layers, act=nn.ReLU):
    """Stack of ``layers`` Linear layers with activations between them."""
    if layers < 1:
        raise ValueError("need at least one layer")
    if layers == 1:
        return nn.Sequential(nn.Linear(in_dim, out_dim))
    mods = [nn.Linear(in_dim, hidden), act()]
    for _ in range(layers - 2):
        mods += [nn.Linear(hidden, hidden), act()]
    mods.append(nn.Linear(hidden, out_dim))
    return nn.Sequential(*mods)


class MultiheadAttention(nn.Module):
    """Multi-head attention over explicit score matrices.

    Supports cross-attention (separate key/value input), causal masking
    aligned to the end of the key sequence (so cached decoding works),
    incremental KV caching, and capture of softmax maps for analysis.
    """

    def __init__(
        self,
        dim,
        n_heads,
        head_dim=None,
        kv_dim=None,
        attn_dropout=0.0,
        resid_dropout=0.0,
    ):
        super().__init__()
        head_dim = head_dim or dim // n_heads
        inner = n_heads * head_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.to_q = nn.Linear(dim, inner)
        self.to_k = nn.Linear(kv_dim or dim, inner)
        self.to_v = nn.Linear(kv_dim or dim, inner)
        self.proj = nn.Linear(inner, dim)
        self.attn_drop = nn.Dropout(attn_dropout)
        self.resid_drop = nn.Dropout(resid_dropout)
        self.capture = None  # set to a list to record softmax maps

    def forward(self, x, kv=None, causal=False, past_kv=None, return_kv=False):
        kv_in = x if kv is None else kv
        B, T, _ = x.shape
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(kv_in))
        v = self._split(self.to_v(kv_in))
        if past_kv is not None:
            k = torch.cat([past_kv[0], k], dim=2)
            v = torch.cat([past_kv[1], v], dim=2)
        S = k.shape[2]
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            q_pos = torch.arange(T, device=x.device) + (S - T)
            k_pos = torch.arange(S, device=x.device)
            allowed = k_pos[None, :] <= q_pos[:, None]
            att = att.masked_fill(~allowed, float("-inf"))
        att = F.softmax(att, dim=-1)
        if self.capture is not None:
            self.capture.append(att.detach())
        att = self.attn_drop(att)
        y = att @ v
        y = y.transpose(1, 2).reshape(B, T, -1)
        y = self.resid_drop(self.proj(y))
        if return_kv:
            return y, (k, v)
        return y

    def _split(self, t):
        B, T, _ = t.shape
        return t.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4, dropout=0.0, act=nn.GELU):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult),
            act(),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm block: attention then feed-forward, both residual."""

    def __init__(
        self,
        dim,
        n_heads,
        head_dim=None,
        causal=False,
        attn_dropout=0.0,
        resid_dropout=0.0,
        ff_mult=4,
    ):
        super().__init__()
        self.causal = causal
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(
            dim, n_heads, head_dim, attn_dropout=attn_dropout, resid_dropout=resid_dropout
        )
        self.ln2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult=ff_mult, dropout=resid_dropout)

    def forward(self, x, past_kv=None, return_kv=False):
        if return_kv:
            a, kv = self.attn(
                self.ln1(x), causal=self.causal, past_kv=past_kv, return_kv=True
            )
            x = x + a
            x = x + self.ff(self.ln2(x))
            return x, kv
        x = x + self.attn(self.ln1(x), causal=self.causal, past_kv=past_kv)
        x = x + self.ff(self.ln2(x))
        return x
