import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scalar_softmax_attention
from scenevg.attention import (
    GradCheckError, LayerParams, attn, cross_layer, grad_check, multi_head, self_layer,
)
from scenevg.geometry import grounding_loss_tensor

D = torch.float64


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=D)


def layer(d=8, heads=2, seed=0):
    torch.manual_seed(seed)
    return LayerParams(d, heads).double()


class TestAttn:
    def test_single_key_returns_value(self):
        q, k, v = rand(5, 4), rand(1, 4, seed=1), rand(1, 3, seed=2)
        assert torch.allclose(attn(q, k, v), v.expand(5, 3))

    def test_zero_query_averages_values(self):
        v = rand(6, 3)
        out = attn(torch.zeros(2, 4, dtype=D), rand(6, 4, seed=1), v)
        assert torch.allclose(out, v.mean(0).expand(2, 3))

    def test_hand_computed_two_by_two(self):
        q = [[1.0, 0.0], [0.0, 2.0]]
        k = [[1.0, 1.0], [0.0, -1.0]]
        v = [[1.0, 2.0], [3.0, 5.0]]
        # row 0 logits (1, 0)/sqrt2, row 1 logits (2, -2)/sqrt2
        w0 = 1 / (1 + math.exp(-1 / math.sqrt(2)))
        w1 = 1 / (1 + math.exp(-4 / math.sqrt(2)))
        want = [[w0 * 1 + (1 - w0) * 3, w0 * 2 + (1 - w0) * 5],
                [w1 * 1 + (1 - w1) * 3, w1 * 2 + (1 - w1) * 5]]
        got = attn(torch.tensor(q, dtype=D), torch.tensor(k, dtype=D), torch.tensor(v, dtype=D))
        assert got.tolist() == pytest.approx([pytest.approx(r, abs=1e-14) for r in want])
        assert scalar_softmax_attention(q, k, v) == pytest.approx(
            [pytest.approx(r, abs=1e-14) for r in want])

    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
    @settings(max_examples=40)
    def test_matches_scalar_oracle(self, nq, nk, dv, seed):
        q, k, v = rand(nq, 3, seed=seed), rand(nk, 3, seed=seed + 1), rand(nk, dv, seed=seed + 2)
        got = attn(q, k, v)
        want = torch.tensor(scalar_softmax_attention(q.tolist(), k.tolist(), v.tolist()), dtype=D)
        assert torch.allclose(got, want, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_convex_hull_on_projections(self, seed):
        q, k, v = rand(4, 3, seed=seed), rand(5, 3, seed=seed + 1), rand(5, 6, seed=seed + 2)
        out = attn(q, k, v)
        direction = rand(6, seed=seed + 3)
        proj_v, proj_o = v @ direction, out @ direction
        assert torch.all(proj_o <= proj_v.max() + 1e-12)
        assert torch.all(proj_o >= proj_v.min() - 1e-12)

    def test_shift_invariance(self):
        # adding a vector to every key shifts each query row's logits by a constant
        q, k, v = rand(3, 4), rand(5, 4, seed=1), rand(5, 2, seed=2)
        shift = rand(4, seed=3)
        assert torch.allclose(attn(q, k + shift, v), attn(q, k, v), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            attn(rand(2, 3), rand(4, 2), rand(4, 2))
        with pytest.raises(ValueError):
            attn(rand(2, 3), rand(4, 3), rand(3, 2))

    def test_key_mask_ignores_masked_rows(self):
        q, k, v = rand(2, 4), rand(5, 4, seed=1), rand(5, 3, seed=2)
        mask = torch.tensor([True, True, False, True, False])
        k2, v2 = k.clone(), v.clone()
        k2[~mask] = 99.0
        v2[~mask] = -99.0
        assert torch.allclose(attn(q, k, v, mask), attn(q, k2, v2, mask), atol=1e-12)
        assert torch.allclose(attn(q, k, v, mask), attn(q, k[mask], v[mask]), atol=1e-12)


class TestLayers:
    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            LayerParams(10, 3)

    def test_single_head_identity_projections_is_attn(self):
        p = layer(d=4, heads=1)
        with torch.no_grad():
            for lin in (p.q_proj, p.k_proj, p.v_proj, p.o_proj):
                lin.weight.copy_(torch.eye(4))
                lin.bias.zero_()
        xq, xkv = rand(3, 4), rand(5, 4, seed=1)
        assert torch.allclose(multi_head(p, xq, xkv), attn(xq, xkv, xkv), atol=1e-13)

    def test_output_rows_follow_queries(self):
        p = layer()
        assert multi_head(p, rand(7, 8), rand(3, 8, seed=1)).shape == (7, 8)
        assert cross_layer(p, rand(2, 7, 8), rand(2, 3, 8, seed=1)).shape == (2, 7, 8)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_context_permutation_invariance(self, seed):
        p = layer(seed=seed % 7)
        x, ctx = rand(4, 8, seed=seed), rand(6, 8, seed=seed + 1)
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
        assert torch.allclose(multi_head(p, x, ctx), multi_head(p, x, ctx[perm]), atol=1e-12)
        assert torch.allclose(cross_layer(p, x, ctx), cross_layer(p, x, ctx[perm]), atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_self_layer_equivariance(self, seed):
        p = layer(seed=seed % 5)
        x = rand(6, 8, seed=seed)
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
        assert torch.allclose(self_layer(p, x)[perm], self_layer(p, x[perm]), atol=1e-12)
        ctx = rand(3, 8, seed=seed + 1)
        assert torch.allclose(cross_layer(p, x, ctx)[perm], cross_layer(p, x[perm], ctx), atol=1e-12)

    def test_single_row_no_leakage(self):
        p = layer()
        x = rand(1, 8)
        assert torch.equal(self_layer(p, x), self_layer(p, x.clone()))

    def test_cross_with_self_context_is_self_layer(self):
        p = layer()
        x = rand(5, 8)
        assert torch.equal(cross_layer(p, x, x), self_layer(p, x))

    def test_single_row_context_shared(self):
        p = layer()
        x, ctx = rand(4, 8), rand(1, 8, seed=1)
        # with one context row every query receives the same attention message
        msg = multi_head(p, p.norm_attn(x), p.norm_attn(ctx))
        assert torch.allclose(msg, msg[0].expand_as(msg), atol=1e-13)

    def test_zero_feed_forward_leaves_attention_residual(self):
        p = layer()
        with torch.no_grad():
            p.ff_out.weight.zero_()
            p.ff_out.bias.zero_()
        x, ctx = rand(3, 8), rand(4, 8, seed=1)
        want = x + multi_head(p, p.norm_attn(x), p.norm_attn(ctx))
        assert torch.allclose(cross_layer(p, x, ctx), want, atol=1e-13)

    def test_masked_context_rows_ignored(self):
        p = layer()
        x, ctx = rand(3, 8), rand(5, 8, seed=1)
        mask = torch.tensor([True, True, True, False, False])
        noisy = ctx.clone()
        noisy[3:] = rand(2, 8, seed=9) * 50
        assert torch.allclose(cross_layer(p, x, ctx, mask), cross_layer(p, x, noisy, mask), atol=1e-12)


class TestGradCheck:
    def test_quadratic_is_exact(self):
        w = torch.randn(5, dtype=D, requires_grad=True)
        a = torch.randn(5, 5, dtype=D)
        a = a @ a.T
        err = grad_check(lambda: w @ a @ w + w.sum(), [w])
        assert err < 1e-8

    def test_layer_under_grounding_loss(self):
        p = layer(d=8, heads=2, seed=1)
        x, ctx = rand(4, 8, seed=2), rand(3, 8, seed=3)
        head = torch.nn.Linear(8, 4).double()
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.3]] * 4, dtype=D)

        def loss():
            out = torch.sigmoid(head(cross_layer(p, x, ctx)))
            return grounding_loss_tensor(out * 0.5 + 0.25, gt)

        assert grad_check(loss, list(p.parameters()) + list(head.parameters()), 1e-4) < 1e-3

    def test_planted_fault_reports_one(self):
        p = layer(d=4, heads=1)
        x = rand(3, 4)

        def loss():
            return (self_layer(p, x) ** 2).sum()

        def doubled(fn, params):
            grads = torch.autograd.grad(fn(), params)
            return [2 * g for g in grads]

        err = grad_check(loss, list(p.parameters()), 1e-4, gradient_fn=doubled)
        assert err == pytest.approx(1.0, abs=1e-4)

    def test_non_finite_loss(self):
        w = torch.ones(2, dtype=D, requires_grad=True)
        with pytest.raises(GradCheckError):
            grad_check(lambda: (w / 0).sum(), [w])

    def test_epsilon_must_be_positive(self):
        w = torch.ones(2, dtype=D, requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: w.sum(), [w], epsilon=0)
