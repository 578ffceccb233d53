"""Observation tokenizers: learned vector quantization and fixed-width bins.

The VQ path maps each agent's continuous observation to a short sequence of
discrete codebook indices via an MLP encoder and nearest-neighbour lookup,
with a mirrored decoder for reconstruction. Codes are maintained by
exponential-moving-average updates rather than gradients. The bins path is
the baseline that quantizes every observation dimension independently,
producing one token per dimension.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from mawm.nets import mlp


class VQTokenizer(nn.Module):
    """MLP encoder/decoder with a shared EMA codebook.

    The encoder emits one ``n_tokens * code_dim`` vector that is reshaped to
    ``n_tokens`` latents; each latent is snapped to its nearest code (ties
    broken by lowest index). Gradients pass the quantizer as identity.
    """

    def __init__(
        self,
        obs_dim,
        n_codes=512,
        n_tokens=16,
        code_dim=128,
        hidden=512,
        layers=3,
        beta=10.0,
        ema_decay=0.99,
        ema_eps=1e-5,
    ):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_codes = n_codes
        self.n_tokens = n_tokens
        self.code_dim = code_dim
        self.beta = beta
        self.ema_decay = ema_decay
        self.ema_eps = ema_eps
        self.encoder = mlp(obs_dim, hidden, n_tokens * code_dim, layers, nn.GELU)
        self.decoder = mlp(n_tokens * code_dim, hidden, obs_dim, layers, nn.GELU)
        codes = torch.randn(n_codes, code_dim)
        self.register_buffer("codes", codes)
        self.register_buffer("ema_counts", torch.ones(n_codes))
        self.register_buffer("ema_sums", codes.clone())
        self.register_buffer("codes_initialized", torch.tensor(False))

    @torch.no_grad()
    def init_codes(self, obs):
        """Warm-start the codebook from encoder latents of a data batch.

        Random-normal codes can sit far outside the encoder's initial latent
        cloud, in which case a single code captures every assignment and the
        EMA can never recover; seeding codes from real latents keeps the
        whole book reachable. Idempotent once applied (checkpoint-safe).
        """
        if bool(self.codes_initialized):
            return
        latents = self.encode_latents(obs).reshape(-1, self.code_dim)
        m = latents.shape[0]
        reps = (self.n_codes + m - 1) // m
        pool = latents.repeat(reps, 1)[: self.n_codes]
        jitter = 1e-3 * (latents.std() + 1e-6) * torch.randn_like(pool)
        self.codes.copy_(pool + jitter)
        self.ema_sums.copy_(self.codes)
        self.ema_counts.fill_(1.0)
        self.codes_initialized.fill_(True)

    def encode_latents(self, obs):
        if not torch.isfinite(obs).all():
            raise ValueError("non-finite observation passed to tokenizer")
        out = self.encoder(obs)
        return out.view(*obs.shape[:-1], self.n_tokens, self.code_dim)

    def nearest_codes(self, latents):
        """Lowest-index nearest neighbour per latent. Returns token ids."""
        flat = latents.reshape(-1, self.code_dim)
        d = (
            flat.pow(2).sum(1, keepdim=True)
            - 2.0 * flat @ self.codes.t()
            + self.codes.pow(2).sum(1)
        )
        dmin = d.min(dim=1, keepdim=True).values
        idx = torch.arange(self.n_codes, device=d.device).expand_as(d)
        tokens = torch.where(d == dmin, idx, self.n_codes).min(dim=1).values
        return tokens.view(latents.shape[:-1])

    def quantize(self, latents):
        """Nearest-code snap with the straight-through gradient path.

        Returns (straight-through latents, token ids, raw quantized codes).
        """
        tokens = self.nearest_codes(latents.detach())
        z_q = self.codes[tokens]
        z_st = latents + (z_q - latents).detach()
        return z_st, tokens, z_q

    def encode(self, obs):
        with torch.no_grad():
            return self.nearest_codes(self.encode_latents(obs))

    def decode(self, tokens):
        z = self.codes[tokens]
        return self.decoder(z.reshape(*tokens.shape[:-1], self.n_tokens * self.code_dim))

    def encode_tokens(self, obs):
        """Tokenize and reconstruct in one pass (no gradients)."""
        with torch.no_grad():
            tokens = self.encode(obs)
            return tokens, self.decode(tokens)

    def reconstruct(self, obs):
        with torch.no_grad():
            return self.decode(self.encode(obs))

    def loss(self, obs):
        """Reconstruction + codebook + beta * commitment, each a mean squared
        error per element. Codes carry no gradient (EMA-updated), so the
        codebook term is reported but constant w.r.t. parameters.
        """
        z_e = self.encode_latents(obs)
        z_st, tokens, z_q = self.quantize(z_e)
        recon = self.decoder(z_st.reshape(*obs.shape[:-1], -1))
        recon_term = (obs - recon).pow(2).mean()
        codebook_term = (z_e.detach() - z_q).pow(2).mean()
        commit_term = (z_q.detach() - z_e).pow(2).mean()
        total = recon_term + codebook_term + self.beta * commit_term
        parts = {
            "total": total,
            "recon": recon_term,
            "codebook": codebook_term,
            "commitment": commit_term,
        }
        return total, parts, tokens, z_e

    @torch.no_grad()
    def ema_update(self, latents, tokens):
        """Decay-and-accumulate code statistics from one encode pass, then
        refresh codes as Laplace-smoothed means."""
        flat = latents.detach().reshape(-1, self.code_dim)
        ids = tokens.reshape(-1)
        counts = torch.bincount(ids, minlength=self.n_codes).to(flat.dtype)
        sums = torch.zeros_like(self.ema_sums)
        sums.index_add_(0, ids, flat)
        d = self.ema_decay
        self.ema_counts.mul_(d).add_(counts, alpha=1 - d)
        self.ema_sums.mul_(d).add_(sums, alpha=1 - d)
        n = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.ema_eps) / (n + self.n_codes * self.ema_eps) * n
        self.codes.copy_(self.ema_sums / smoothed.unsqueeze(1))

    def utilization(self, tokens):
        """Fraction of codes referenced by a batch of token ids."""
        return torch.unique(tokens.reshape(-1)).numel() / self.n_codes


class BinsTokenizer:
    """Per-dimension fixed-width quantization over ranges fit from data.

    Produces ``obs_dim`` tokens per observation; detokenization returns bin
    centers. Out-of-range values clamp to the edge bins.
    """

    def __init__(self, obs_dim, n_bins=512):
        self.obs_dim = obs_dim
        self.n_codes = n_bins
        self.n_tokens = obs_dim
        self.low = None
        self.high = None

    @property
    def fitted(self):
        return self.low is not None

    def fit(self, observations):
        obs = torch.as_tensor(observations, dtype=torch.float32).reshape(-1, self.obs_dim)
        self.low = obs.min(dim=0).values
        self.high = obs.max(dim=0).values
        span = (self.high - self.low).clamp_min(1e-8)
        self._width = span / self.n_codes
        return self

    def encode(self, obs):
        if not self.fitted:
            raise RuntimeError("BinsTokenizer.fit must run before encoding")
        idx = torch.floor((obs - self.low) / self._width).long()
        return idx.clamp_(0, self.n_codes - 1)

    def decode(self, tokens):
        return self.low + (tokens.to(torch.float32) + 0.5) * self._width

    def encode_tokens(self, obs):
        tokens = self.encode(obs)
        return tokens, self.decode(tokens)

    def reconstruct(self, obs):
        return self.decode(self.encode(obs))

    def state_dict(self):
        return {
            "obs_dim": self.obs_dim,
            "n_bins": self.n_codes,
            "low": self.low,
            "high": self.high,
        }

    def load_state_dict(self, state):
        self.obs_dim = state["obs_dim"]
        self.n_codes = state["n_bins"]
        self.n_tokens = self.obs_dim
        self.low = state["low"]
        self.high = state["high"]
        if self.low is not None:
            span = (self.high - self.low).clamp_min(1e-8)
            self._width = span / self.n_codes


class ActionDiscretizer:
    """Fixed-width binning for bounded continuous actions (per dimension)."""

    def __init__(self, low, high, n_bins=256):
        self.low = torch.as_tensor(low, dtype=torch.float32)
        self.high = torch.as_tensor(high, dtype=torch.float32)
        self.n_bins = n_bins
        self._width = (self.high - self.low).clamp_min(1e-8) / n_bins

    def tokenize(self, u):
        u = torch.as_tensor(u, dtype=torch.float32)
        idx = torch.floor((u - self.low) / self._width).long()
        return idx.clamp_(0, self.n_bins - 1)

    def detokenize(self, tokens):
        return self.low + (tokens.to(torch.float32) + 0.5) * self._width
