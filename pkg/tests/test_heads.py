"""Pooling baselines: values, invariances, and gradient checks."""

import numpy as np
import pytest
from conftest import fd_grad, max_rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmprobe.features import FeatureSample
from ssmprobe.heads import (
    Classifier,
    attention_pool,
    attention_pool_backward,
    classify,
    classify_backward,
    cls_head,
    content_weighted_backward,
    content_weighted_pool,
    count_params,
    gap,
    init_classifier,
    topk_pool,
    topk_pool_backward,
)


def rand_tokens(n=6, d=4, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


class TestGap:
    def test_two_rows(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 5.0])
        np.testing.assert_allclose(gap(np.stack([a, b])), (a + b) / 2)

    def test_single_row(self):
        row = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(gap(row), row[0])

    def test_permutation_invariance(self):
        tokens = rand_tokens()
        perm = np.random.default_rng(1).permutation(6)
        np.testing.assert_allclose(gap(tokens), gap(tokens[perm]), atol=1e-12)


class TestCls:
    def test_returns_cls_untouched(self):
        s = FeatureSample(rand_tokens(), np.array([9.0, 8.0, 7.0, 6.0]), 0)
        np.testing.assert_array_equal(cls_head(s), s.cls_token)

    def test_patch_permutation_irrelevant(self):
        tokens = rand_tokens()
        cls = np.arange(4.0)
        a = cls_head(FeatureSample(tokens, cls, 0))
        b = cls_head(FeatureSample(tokens[::-1].copy(), cls, 0))
        np.testing.assert_array_equal(a, b)


class TestAttentionPool:
    def test_zero_query_is_gap(self):
        tokens = rand_tokens()
        np.testing.assert_allclose(attention_pool(np.zeros(4), tokens), gap(tokens))

    def test_saturation_selects_aligned_token(self):
        # one token aligned with q so strongly the softmax saturates
        d = 4
        tokens = np.zeros((5, d))
        tokens[2] = np.array([30.0, 0.0, 0.0, 0.0])  # logit gap >= 20 after 1/sqrt(d)
        q = np.array([2.0, 0.0, 0.0, 0.0])
        out = attention_pool(q, tokens)
        assert np.max(np.abs(out - tokens[2])) < 1e-3

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        tokens, q = rng.normal(size=(7, 3)), rng.normal(size=3)
        perm = rng.permutation(7)
        np.testing.assert_allclose(attention_pool(q, tokens),
                                   attention_pool(q, tokens[perm]), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        tokens = rng.normal(size=(1, 5, 3))
        q = rng.normal(size=3)
        g = rng.normal(size=(1, 3))
        grad_q, grad_tokens = attention_pool_backward(q, tokens, g)
        assert max_rel_err(grad_q, fd_grad(
            lambda qq: float(np.sum(attention_pool(qq, tokens[0]) * g[0])), q)) < 1e-4
        assert max_rel_err(grad_tokens, fd_grad(
            lambda tt: float(np.sum(attention_pool(q, tt[0]) * g[0])), tokens)) < 1e-4


class TestContentWeighted:
    def test_zero_scorer_is_gap(self):
        tokens = rand_tokens()
        np.testing.assert_allclose(content_weighted_pool(np.zeros(4), tokens),
                                   gap(tokens))

    def test_dominant_token_wins(self):
        tokens = np.array([[0.0], [10.0]])
        out = content_weighted_pool(np.array([1.0]), tokens)
        assert out[0] == pytest.approx(10.0, abs=1e-3)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        tokens, w = rng.normal(size=(6, 3)), rng.normal(size=3)
        perm = rng.permutation(6)
        np.testing.assert_allclose(content_weighted_pool(w, tokens),
                                   content_weighted_pool(w, tokens[perm]), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        tokens = rng.normal(size=(1, 5, 3))
        w = rng.normal(size=3)
        g = rng.normal(size=(1, 3))
        grad_w, grad_tokens = content_weighted_backward(w, tokens, g)
        assert max_rel_err(grad_w, fd_grad(
            lambda ww: float(np.sum(content_weighted_pool(ww, tokens[0]) * g[0])), w)) < 1e-4
        assert max_rel_err(grad_tokens, fd_grad(
            lambda tt: float(np.sum(content_weighted_pool(w, tt[0]) * g[0])), tokens)) < 1e-4


class TestTopK:
    def test_k_equals_n_is_gap(self):
        tokens = rand_tokens()
        np.testing.assert_allclose(topk_pool(np.ones(4), 6, tokens), gap(tokens))

    def test_k1_is_argmax_token(self):
        tokens = np.array([[1.0, 0.0], [5.0, 1.0], [2.0, 2.0]])
        out = topk_pool(np.array([1.0, 0.0]), 1, tokens)
        np.testing.assert_array_equal(out, tokens[1])

    def test_tie_breaks_to_lower_index(self):
        tokens = np.zeros((6, 1))
        tokens[2] = tokens[5] = 1.0  # equal scores at indices 2 and 5
        out = topk_pool(np.array([1.0]), 1, tokens)
        np.testing.assert_array_equal(out, tokens[2])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="k must be"):
            topk_pool(np.ones(4), 7, rand_tokens())

    def test_scorer_gets_zero_gradient(self):
        rng = np.random.default_rng(6)
        tokens = rng.normal(size=(1, 5, 3))
        grad_w, grad_tokens = topk_pool_backward(rng.normal(size=3), 2, tokens,
                                                 rng.normal(size=(1, 3)))
        assert np.all(grad_w == 0.0)
        assert np.count_nonzero(np.abs(grad_tokens).sum(axis=2)) == 2

    def test_invariance_with_distinct_scores(self):
        rng = np.random.default_rng(7)
        tokens, w = rng.normal(size=(6, 3)), rng.normal(size=3)
        perm = rng.permutation(6)
        np.testing.assert_allclose(topk_pool(w, 3, tokens),
                                   topk_pool(w, 3, tokens[perm]), atol=1e-12)


class TestClassifier:
    def test_zero_maps_to_zero(self):
        c = init_classifier(4, 3)
        np.testing.assert_array_equal(classify(c, np.ones(4)), np.zeros(3))

    def test_one_hot_copies_column(self):
        rng = np.random.default_rng(8)
        c = Classifier(rng.normal(size=(3, 4)), rng.normal(size=3))
        z = np.zeros(4)
        z[2] = 1.0
        np.testing.assert_allclose(classify(c, z), c.W[:, 2] + c.b)

    def test_affine_property(self):
        # affine in z: convex combinations commute with the map
        rng = np.random.default_rng(9)
        c = Classifier(rng.normal(size=(3, 4)), rng.normal(size=3))
        x, y = rng.normal(size=4), rng.normal(size=4)
        lhs = classify(c, 0.3 * x + 0.7 * y)
        rhs = 0.3 * classify(c, x) + 0.7 * classify(c, y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        c = Classifier(rng.normal(size=(3, 4)), rng.normal(size=3))
        z = rng.normal(size=4)
        g = rng.normal(size=3)
        grad_w, grad_b, grad_z = classify_backward(c, z, g)
        assert max_rel_err(grad_w, fd_grad(
            lambda w: float(classify(Classifier(w, c.b), z) @ g), c.W)) < 1e-4
        assert max_rel_err(grad_b, fd_grad(
            lambda b: float(classify(Classifier(c.W, b), z) @ g), c.b)) < 1e-4
        assert max_rel_err(grad_z, fd_grad(
            lambda zz: float(classify(c, zz) @ g), z)) < 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            classify(init_classifier(4, 3), np.ones(5))


class TestCountParams:
    def test_gap_classifier_reference_count(self):
        params = {"W": np.zeros((1000, 768)), "b": np.zeros(1000)}
        assert count_params(params) == 769_000

    def test_attn_pool_adds_query(self):
        params = {"W": np.zeros((1000, 768)), "b": np.zeros(1000),
                  "q": np.zeros(768)}
        assert count_params(params) == 769_768


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 10), st.integers(0, 500))
def test_softmax_pools_weights_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(n, 3))
    q = rng.normal(size=3)
    # alpha sums to 1 implies pooling a constant sequence returns the constant
    const = np.tile(np.array([2.0, -1.0, 0.5]), (n, 1))
    np.testing.assert_allclose(attention_pool(q, const), const[0], atol=1e-12)
    np.testing.assert_allclose(content_weighted_pool(q, const), const[0], atol=1e-12)
