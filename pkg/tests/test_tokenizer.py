import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mawm.buffer import random_policy, run_episodes
from mawm.envs import make_env
from mawm.tokenizer import ActionDiscretizer, BinsTokenizer, VQTokenizer


def tiny_identity_vq(beta=10.0):
    """obs_dim=2, K=1, n_z=2 tokenizer with identity encoder/decoder and a
    fixed 2-code codebook, so every loss term is hand-computable."""
    tok = VQTokenizer(2, n_codes=2, n_tokens=1, code_dim=2, hidden=2, layers=1, beta=beta)
    with torch.no_grad():
        tok.encoder[0].weight.copy_(torch.eye(2))
        tok.encoder[0].bias.zero_()
        tok.decoder[0].weight.copy_(torch.eye(2))
        tok.decoder[0].bias.zero_()
        tok.codes.copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
        tok.ema_sums.copy_(tok.codes)
        tok.ema_counts.fill_(1.0)
    return tok


class TestNearestNeighbour:
    def test_spec_example(self):
        tok = tiny_identity_vq()
        latent = torch.tensor([[[0.2, 0.1]]])
        assert tok.nearest_codes(latent).item() == 0

    def test_tie_breaks_to_lowest_index(self):
        tok = tiny_identity_vq()
        latent = torch.tensor([[[0.5, 0.5]]])  # exactly equidistant
        assert tok.nearest_codes(latent).item() == 0

    def test_exact_against_bruteforce_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n_codes = int(rng.integers(2, 9))
            tok = VQTokenizer(2, n_codes=n_codes, n_tokens=1, code_dim=2, hidden=4, layers=1)
            codes = rng.normal(size=(n_codes, 2)).astype(np.float32)
            with torch.no_grad():
                tok.codes.copy_(torch.from_numpy(codes))
            queries = rng.normal(size=(50, 1, 2)).astype(np.float32)
            got = tok.nearest_codes(torch.from_numpy(queries)).numpy().ravel()
            expect = np.array(
                [np.argmin(((q - codes) ** 2).sum(1)) for q in queries[:, 0]]
            )
            assert np.array_equal(got, expect)

    def test_untrained_model_token_shape_and_range(self):
        tok = VQTokenizer(30, n_codes=512, n_tokens=16, code_dim=128, hidden=512)
        obs = torch.randn(8, 30)
        tokens = tok.encode(obs)
        assert tokens.shape == (8, 16)
        assert tokens.min() >= 0 and tokens.max() < 512

    def test_quantization_idempotent_on_codes(self):
        tok = VQTokenizer(6, n_codes=16, n_tokens=4, code_dim=8, hidden=16)
        tokens = tok.encode(torch.randn(10, 6))
        requant = tok.nearest_codes(tok.codes[tokens])
        assert torch.equal(requant, tokens)

    def test_non_finite_rejected(self):
        tok = tiny_identity_vq()
        with pytest.raises(ValueError):
            tok.encode(torch.tensor([[float("nan"), 0.0]]))


class TestVQLoss:
    def test_hand_computed_oracle(self):
        tok = tiny_identity_vq(beta=10.0)
        obs = torch.tensor([[0.2, 0.1]])
        total, parts, tokens, _ = tok.loss(obs)
        # independent recomputation: z_e=(0.2,0.1), nearest code (0,0)
        z_e = np.array([0.2, 0.1], dtype=np.float32)
        z_q = np.zeros(2, dtype=np.float32)
        recon = z_q  # identity decoder on straight-through value
        expect_recon = float(((obs.numpy()[0] - recon) ** 2).mean())
        expect_code = float(((z_e - z_q) ** 2).mean())
        expect_commit = expect_code
        assert tokens.item() == 0
        assert float(parts["recon"].detach()) == pytest.approx(expect_recon, rel=1e-6)
        assert float(parts["codebook"].detach()) == pytest.approx(expect_code, rel=1e-6)
        assert float(parts["commitment"].detach()) == pytest.approx(expect_commit, rel=1e-6)
        assert float(total.detach()) == pytest.approx(0.3, rel=1e-5)

    def test_perfect_autoencoder_zero_loss(self):
        tok = tiny_identity_vq()
        obs = torch.tensor([[1.0, 1.0]])  # latent lands exactly on code 1
        total, parts, tokens, _ = tok.loss(obs)
        assert tokens.item() == 1
        assert float(total.detach()) == 0.0

    def test_beta_scales_only_commitment(self):
        obs = torch.tensor([[0.3, -0.2]])
        t1 = tiny_identity_vq(beta=10.0)
        t2 = tiny_identity_vq(beta=20.0)
        _, p1, _, _ = t1.loss(obs)
        _, p2, _, _ = t2.loss(obs)
        assert float(p1["recon"].detach()) == float(p2["recon"].detach())
        assert float(p1["codebook"].detach()) == float(p2["codebook"].detach())
        d1 = float(p1["total"].detach()) - float(p1["recon"].detach()) - float(p1["codebook"].detach())
        d2 = float(p2["total"].detach()) - float(p2["recon"].detach()) - float(p2["codebook"].detach())
        assert d2 == pytest.approx(2 * d1, rel=1e-6)

    def test_straight_through_matches_decoder_path_fd(self):
        torch.manual_seed(1)
        tok = VQTokenizer(3, n_codes=4, n_tokens=2, code_dim=2, hidden=8, layers=2).double()
        obs = torch.randn(1, 3, dtype=torch.float64)
        z_e = tok.encode_latents(obs).detach().requires_grad_(True)
        z_st, tokens, z_q = tok.quantize(z_e)
        recon = tok.decoder(z_st.reshape(1, -1))
        loss = (obs - recon).pow(2).sum()
        loss.backward()
        grad = z_e.grad.reshape(-1).numpy()

        def decoder_loss(z_flat):
            with torch.no_grad():
                r = tok.decoder(torch.from_numpy(z_flat).reshape(1, -1))
                return float((obs - r).pow(2).sum())

        z0 = z_q.detach().reshape(-1).numpy().copy()
        eps = 1e-6
        fd = np.zeros_like(z0)
        for k in range(z0.size):
            up, dn = z0.copy(), z0.copy()
            up[k] += eps
            dn[k] -= eps
            fd[k] = (decoder_loss(up) - decoder_loss(dn)) / (2 * eps)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestEMA:
    def test_decay_one_freezes_codes(self):
        tok = VQTokenizer(4, n_codes=8, n_tokens=2, code_dim=4, hidden=8, ema_decay=1.0)
        before = tok.codes.clone()
        z = torch.randn(16, 2, 4)
        tok.ema_update(z, tok.nearest_codes(z))
        assert torch.allclose(tok.codes, before)

    def test_unassigned_code_decays(self):
        tok = VQTokenizer(2, n_codes=4, n_tokens=1, code_dim=2, hidden=4, ema_decay=0.9)
        with torch.no_grad():
            tok.codes.copy_(torch.tensor([[0.0, 0.0], [5.0, 5.0], [9.0, 9.0], [30.0, 30.0]]))
            tok.ema_sums.copy_(tok.codes)
        latents = torch.zeros(32, 1, 2)  # all map to code 0
        norm0 = tok.codes[3].norm().item()
        count0 = tok.ema_counts[3].item()
        for _ in range(20):
            tok.ema_update(latents, tok.nearest_codes(latents))
        assert tok.ema_counts[3].item() < count0
        assert tok.codes[3].norm().item() < norm0

    def test_all_assignments_converge_to_mean(self):
        decay, eps, n_codes = 0.99, 1e-5, 4
        tok = VQTokenizer(
            2, n_codes=n_codes, n_tokens=1, code_dim=2, hidden=4,
            ema_decay=decay, ema_eps=eps,
        )
        mu = np.array([2.0, -1.0])
        batch = torch.tensor(mu, dtype=torch.float32).expand(64, 1, 2).contiguous()
        with torch.no_grad():
            tok.codes.copy_(torch.tensor([[2.0, -1.0], [9.0, 9.0], [9.0, -9.0], [-9.0, 9.0]]))
            tok.ema_sums.copy_(tok.codes)
        # independent oracle replaying the stated update rule
        counts = np.ones(n_codes)
        sums = tok.codes.numpy().astype(np.float64).copy()
        for _ in range(300):
            tokens = tok.nearest_codes(batch)
            tok.ema_update(batch, tokens)
            b_counts = np.bincount(tokens.numpy().ravel(), minlength=n_codes)
            b_sums = np.zeros_like(sums)
            for t in tokens.numpy().ravel():
                b_sums[t] += mu
            counts = decay * counts + (1 - decay) * b_counts
            sums = decay * sums + (1 - decay) * b_sums
        n = counts.sum()
        smoothed = (counts + eps) / (n + n_codes * eps) * n
        oracle_codes = sums / smoothed[:, None]
        assert np.allclose(tok.codes.numpy(), oracle_codes, atol=1e-4)
        assert np.allclose(tok.codes[0].numpy(), mu, atol=1e-2)

    def test_utilization_above_collapse_floor_on_coupled_chain(self):
        env = make_env("coupled-chain", n_agents=3, seed=0)
        rng = np.random.default_rng(0)
        obs = []
        for ep in run_episodes(env, random_policy(rng), 10):
            obs.extend(r.obs for r in ep)
        obs = torch.from_numpy(np.concatenate(obs).astype(np.float32))
        torch.manual_seed(0)
        tok = VQTokenizer(4, n_codes=64, n_tokens=4, code_dim=8, hidden=64)
        tok.init_codes(obs[:512])
        opt = torch.optim.AdamW(tok.parameters(), lr=3e-4)
        for _ in range(300):
            idx = rng.integers(len(obs), size=128)
            total, _, tokens, z_e = tok.loss(obs[idx])
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            tok.ema_update(z_e, tokens)
        final_tokens = tok.encode(obs)
        assert tok.utilization(final_tokens) > 0.10


class TestBins:
    def test_spec_fixed_width_example(self):
        tok = BinsTokenizer(1, n_bins=4)
        tok.fit(torch.tensor([[0.0], [1.0]]))
        assert tok.encode(torch.tensor([[0.3]])).item() == 1

    def test_sequence_length_is_obs_dim(self):
        tok = BinsTokenizer(30, n_bins=512)
        tok.fit(torch.randn(100, 30))
        assert tok.encode(torch.randn(5, 30)).shape == (5, 30)

    def test_out_of_range_clamps(self):
        tok = BinsTokenizer(1, n_bins=4)
        tok.fit(torch.tensor([[0.0], [1.0]]))
        assert tok.encode(torch.tensor([[-5.0]])).item() == 0
        assert tok.encode(torch.tensor([[7.0]])).item() == 3

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    def test_round_trip_within_half_bin(self, x):
        tok = BinsTokenizer(1, n_bins=64)
        tok.fit(torch.tensor([[0.0], [1.0]]))
        rec = tok.reconstruct(torch.tensor([[x]], dtype=torch.float32)).item()
        assert abs(rec - x) <= (1.0 / 64) / 2 + 1e-6

    def test_encode_before_fit_errors(self):
        with pytest.raises(RuntimeError):
            BinsTokenizer(2, n_bins=4).encode(torch.zeros(1, 2))


class TestActionDiscretizer:
    def test_midpoint_and_edges(self):
        d = ActionDiscretizer(-1.0, 1.0, n_bins=256)
        assert d.tokenize(torch.tensor([0.0])).item() == 128
        assert d.tokenize(torch.tensor([-1.0])).item() == 0
        assert d.tokenize(torch.tensor([1.0])).item() == 255

    def test_round_trip_bound(self):
        d = ActionDiscretizer(-1.0, 1.0, n_bins=256)
        u = torch.linspace(-1, 1, 999)
        err = (d.detokenize(d.tokenize(u)) - u).abs().max().item()
        assert err <= 2.0 / 256
