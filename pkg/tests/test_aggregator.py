import numpy as np
import pytest
import torch

from mawm.aggregator import (
    PERCEIVER,
    SELF_ATTENTION,
    PerceiverAggregator,
    SelfAttentionAggregator,
    build_aggregator,
    flops_estimate,
)

# published aggregation costs (GFLOPs) for the paper configuration
PAPER_FLOPS = {
    PERCEIVER: {2: 0.016e9, 3: 0.024e9, 5: 0.041e9, 9: 0.073e9},
    SELF_ATTENTION: {2: 0.133e9, 3: 0.201e9, 5: 0.335e9, 9: 0.603e9},
}


def make_perceiver(n_agents, block=17, dim=32):
    return PerceiverAggregator(
        dim, n_agents, block, cross_heads=4, inner_layers=2, inner_heads=4,
        head_dim=8, dropout=0.1,
    ).eval()


class TestPerceiverShapes:
    def test_single_agent_degenerates(self):
        agg = make_perceiver(1)
        out = agg(torch.randn(3, 17, 32))
        assert out.shape == (3, 1, 32)

    def test_five_agents_paper_lengths(self):
        agg = make_perceiver(5)
        out = agg(torch.randn(2, 85, 32))
        assert out.shape == (2, 5, 32)

    @pytest.mark.parametrize("n", [1, 2, 3, 7])
    def test_output_shape_any_agent_count(self, n):
        agg = make_perceiver(n)
        out = agg(torch.randn(2, n * 17, 32))
        assert out.shape == (2, n, 32)

    def test_bad_length_rejected(self):
        agg = make_perceiver(3)
        with pytest.raises(ValueError):
            agg(torch.randn(2, 50, 32))


class TestInformationFlow:
    def test_cross_agent_sensitivity(self):
        torch.manual_seed(0)
        agg = make_perceiver(3)
        x = torch.randn(1, 51, 32)
        base = agg(x)
        y = x.clone()
        y[0, 17 + 16] += 1.0  # agent 1's action slot
        out = agg(y)
        assert not torch.allclose(base[0, 0], out[0, 0])

    def test_jacobian_block_nonzero_across_agents(self):
        torch.manual_seed(0)
        agg = make_perceiver(2)
        x = torch.randn(1, 34, 32, requires_grad=True)
        out = agg(x)
        out[0, 0].sum().backward()
        other_block = x.grad[0, 17:]
        assert other_block.abs().sum() > 0

    def test_eval_forward_deterministic(self):
        agg = make_perceiver(2)
        x = torch.randn(2, 34, 32)
        assert torch.equal(agg(x), agg(x))

    def test_train_mode_dropout_active(self):
        agg = make_perceiver(2).train()
        x = torch.randn(2, 34, 32)
        torch.manual_seed(1)
        a = agg(x)
        torch.manual_seed(2)
        b = agg(x)
        assert not torch.allclose(a, b)


class TestSelfAttentionAggregator:
    def test_sequence_shape_preserved(self):
        agg = SelfAttentionAggregator(32, 2, 17, layers=3, heads=4, head_dim=8).eval()
        x = torch.randn(2, 34, 32)
        assert agg.forward_sequence(x).shape == (2, 34, 32)

    def test_three_layers_match_perceiver_depth(self):
        agg = SelfAttentionAggregator(32, 2, 17, layers=3, heads=4, head_dim=8)
        assert len(agg.blocks) == 3

    def test_cross_agent_sensitivity(self):
        torch.manual_seed(0)
        agg = SelfAttentionAggregator(32, 2, 17, layers=3, heads=4, head_dim=8).eval()
        x = torch.randn(1, 34, 32)
        base = agg.forward_sequence(x)
        y = x.clone()
        y[0, 17:] = 0.0  # blank agent 1's block
        out = agg.forward_sequence(y)
        assert not torch.allclose(base[0, :17], out[0, :17])

    def test_reduction_picks_one_feature_per_agent(self):
        agg = SelfAttentionAggregator(32, 3, 17, layers=1, heads=4, head_dim=8).eval()
        x = torch.randn(2, 51, 32)
        assert agg(x).shape == (2, 3, 32)


class TestBuildAggregator:
    def test_none_kind(self):
        assert build_aggregator("none", 32, 2, 17) is None

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_aggregator("mixer", 32, 2, 17)


class TestFlops:
    @pytest.mark.parametrize("kind", [PERCEIVER, SELF_ATTENTION])
    @pytest.mark.parametrize("n", [2, 3, 5, 9])
    def test_matches_published_within_20pct(self, kind, n):
        got = flops_estimate(kind, n, tokens_per_obs=16, dim=256)
        expect = PAPER_FLOPS[kind][n]
        assert abs(got - expect) / expect < 0.20

    def test_perceiver_cheaper_for_all_n(self):
        for n in range(2, 16):
            p = flops_estimate(PERCEIVER, n, 16, 256)
            s = flops_estimate(SELF_ATTENTION, n, 16, 256)
            assert p < s

    def test_ratio_grows_with_agents(self):
        ratios = [
            flops_estimate(SELF_ATTENTION, n, 16, 256)
            / flops_estimate(PERCEIVER, n, 16, 256)
            for n in (2, 3, 5, 9)
        ]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_perceiver_linear_in_agents(self):
        ns = np.array([2, 3, 5, 9])
        vals = np.array([flops_estimate(PERCEIVER, int(n), 16, 256) for n in ns])
        slope, intercept = np.polyfit(ns, vals, 1)
        pred = slope * ns + intercept
        ss_res = ((vals - pred) ** 2).sum()
        ss_tot = ((vals - vals.mean()) ** 2).sum()
        assert 1 - ss_res / ss_tot > 0.99

    def test_self_attention_quadratic_in_sequence(self):
        # doubling n(K+1) should more than double the cost
        c1 = flops_estimate(SELF_ATTENTION, 4, 16, 256)
        c2 = flops_estimate(SELF_ATTENTION, 8, 16, 256)
        assert c2 > 2.0 * c1

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            flops_estimate("gnn", 2, 16)
