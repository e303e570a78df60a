import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import naive_attention
from metavit.attention import (
    AttentionConfig,
    MhaParams,
    Scaling,
    entropy_scale,
    multi_head_attention,
    scaled_dot_product_attention,
)
from metavit.errors import ConfigError, DimensionError
from metavit.tensor import Tensor


class TestEntropyScale:
    def test_equal_counts_reduce_to_sqrt_width(self):
        assert_allclose(entropy_scale(100, 100, 32), math.sqrt(32))

    def test_exact_log_ratio_two(self):
        assert_allclose(entropy_scale(16, 4, 64), 16.0)

    def test_sixtyfour_bit_evaluation(self):
        expected = (math.log(3136) / math.log(16)) * math.sqrt(32)
        got = entropy_scale(3136, 16, 32)
        assert_allclose(got, expected, rtol=1e-12)
        assert abs(got - 16.4255) < 1e-3

    def test_base_invariance(self):
        # only the ratio of logs enters, so any base gives the same factor
        base10 = (math.log10(48) / math.log10(12)) * math.sqrt(8)
        assert_allclose(entropy_scale(48, 12, 8), base10, rtol=1e-12)

    @pytest.mark.parametrize("n1,n2", [(1, 10), (10, 1), (0, 5), (5, 0)])
    def test_degenerate_counts_rejected(self, n1, n2):
        with pytest.raises(ConfigError):
            entropy_scale(n1, n2, 8)


class TestScaledDotProductAttention:
    def test_identical_keys_average_values(self, rng):
        q = Tensor(rng.standard_normal((3, 4)))
        k = Tensor(np.tile(rng.standard_normal(4), (5, 1)))
        v = Tensor(rng.standard_normal((5, 4)))
        out = scaled_dot_product_attention(q, k, v, scale=2.0)
        assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-6)

    def test_saturated_softmax_selects_one_value(self, rng):
        k = rng.standard_normal((4, 8)).astype(np.float32)
        q = (k[2] * 1e4 / np.dot(k[2], k[2]))[None, :].astype(np.float32)
        v = rng.standard_normal((4, 8)).astype(np.float32)
        out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), scale=1.0)
        assert np.abs(out.data[0] - v[2]).max() < 1e-4

    def test_against_naive_oracle(self, rng):
        q = rng.standard_normal((4, 8))
        k = rng.standard_normal((4, 8))
        v = rng.standard_normal((4, 8))
        scale = math.sqrt(8)
        out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), scale).data
        assert_allclose(out, naive_attention(q, k, v, scale), atol=1e-5)

    def test_attention_rows_returned(self, rng):
        q, k, v = (Tensor(rng.standard_normal((3, 4))) for _ in range(3))
        out, attn = scaled_dot_product_attention(q, k, v, 2.0, return_attn=True)
        assert attn.shape == (3, 3)
        assert_allclose(attn.data.sum(axis=-1), np.ones(3), atol=1e-6)

    def test_width_mismatch_rejected(self, rng):
        with pytest.raises(DimensionError):
            scaled_dot_product_attention(
                Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                Tensor(np.zeros((2, 4))), 1.0,
            )

    def test_output_rows_are_convex_combinations(self, rng):
        for _ in range(100):
            n1, n2, c = rng.integers(2, 7), rng.integers(2, 7), rng.integers(2, 6)
            q = rng.standard_normal((n1, c)) * 3
            k = rng.standard_normal((n2, c)) * 3
            v = rng.standard_normal((n2, c))
            out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), 1.5).data
            lo = v.min(axis=0) - 1e-6
            hi = v.max(axis=0) + 1e-6
            assert (out >= lo).all() and (out <= hi).all()

    def test_joint_key_value_permutation_invariance(self, rng):
        for _ in range(100):
            n2 = int(rng.integers(3, 8))
            q = rng.standard_normal((4, 6))
            k = rng.standard_normal((n2, 6))
            v = rng.standard_normal((n2, 6))
            perm = rng.permutation(n2)
            base = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), 2.0).data
            shuffled = scaled_dot_product_attention(
                Tensor(q), Tensor(k[perm]), Tensor(v[perm]), 2.0
            ).data
            assert np.abs(base - shuffled).max() < 1e-6

    def test_query_permutation_equivariance(self, rng):
        for _ in range(100):
            n1 = int(rng.integers(3, 8))
            q = rng.standard_normal((n1, 5))
            k = rng.standard_normal((4, 5))
            v = rng.standard_normal((4, 5))
            perm = rng.permutation(n1)
            base = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), 2.0).data
            permuted = scaled_dot_product_attention(
                Tensor(q[perm]), Tensor(k), Tensor(v), 2.0
            ).data
            assert np.abs(base[perm] - permuted).max() < 1e-6


def _identity_params(dim: int) -> MhaParams:
    eye = lambda: Tensor(np.eye(dim, dtype=np.float32))
    zero = lambda: Tensor(np.zeros(dim, dtype=np.float32))
    return MhaParams(eye(), zero(), eye(), zero(), eye(), zero(), eye(), zero())


def _random_params(rng, dim: int) -> MhaParams:
    parts = []
    for _ in range(4):
        parts.append(Tensor(rng.standard_normal((dim, dim)).astype(np.float32) * 0.2))
        parts.append(Tensor(rng.standard_normal(dim).astype(np.float32) * 0.1))
    return MhaParams(*parts)


class TestMultiHeadAttention:
    def test_head_count_from_width(self):
        assert AttentionConfig(64, 32).num_heads == 2
        assert AttentionConfig(320, 32).num_heads == 10

    def test_indivisible_split_rejected(self):
        with pytest.raises(ConfigError):
            AttentionConfig(48, 32)

    def test_single_head_identity_projections_collapse_to_sdpa(self, rng):
        dim = 8
        cfg = AttentionConfig(dim, head_dim=dim)
        q, k, v = (Tensor(rng.standard_normal((5, dim)).astype(np.float32)) for _ in range(3))
        got = multi_head_attention(q, k, v, cfg, _identity_params(dim))
        want = scaled_dot_product_attention(q, k, v, math.sqrt(dim))
        assert_allclose(got.data, want.data, atol=1e-6)

    def test_entropy_invariant_equals_standard_when_counts_match(self, rng):
        dim = 16
        q, k, v = (Tensor(rng.standard_normal((6, dim)).astype(np.float32)) for _ in range(3))
        params = _random_params(rng, dim)
        std = multi_head_attention(q, k, v, AttentionConfig(dim, 8, Scaling.STANDARD), params)
        ent = multi_head_attention(
            q, k, v, AttentionConfig(dim, 8, Scaling.ENTROPY_INVARIANT), params
        )
        assert np.abs(std.data - ent.data).max() <= 1e-6

    def test_batched_matches_per_sample(self, rng):
        dim = 8
        cfg = AttentionConfig(dim, 4)
        params = _random_params(rng, dim)
        qb = rng.standard_normal((3, 5, dim)).astype(np.float32)
        kb = rng.standard_normal((3, 4, dim)).astype(np.float32)
        vb = rng.standard_normal((3, 4, dim)).astype(np.float32)
        batched = multi_head_attention(Tensor(qb), Tensor(kb), Tensor(vb), cfg, params).data
        for i in range(3):
            single = multi_head_attention(
                Tensor(qb[i]), Tensor(kb[i]), Tensor(vb[i]), cfg, params
            ).data
            assert_allclose(batched[i], single, atol=1e-5)

    def test_width_mismatch_rejected(self, rng):
        cfg = AttentionConfig(8, 4)
        params = _random_params(rng, 8)
        with pytest.raises(ConfigError):
            multi_head_attention(
                Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 8))),
                Tensor(np.zeros((3, 8))), cfg, params,
            )

    def test_retained_attention_is_head_averaged(self, rng):
        dim = 8
        cfg = AttentionConfig(dim, 4)
        params = _random_params(rng, dim)
        q = Tensor(rng.standard_normal((5, dim)).astype(np.float32))
        k = Tensor(rng.standard_normal((3, dim)).astype(np.float32))
        retained = {}
        multi_head_attention(q, k, k, cfg, params, retained=retained)
        attn = retained["attn"]
        assert attn.shape == (5, 3)
        assert_allclose(attn.sum(axis=-1), np.ones(5), atol=1e-5)
