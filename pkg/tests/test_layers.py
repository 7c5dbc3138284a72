import numpy as np
import pytest

import segprompt.tensor as T
from segprompt.errors import ConfigurationError, ContractError, DimensionError
from segprompt.layers import (
    ChannelAffine, Conv2d, LayerNorm, Linear, MultiHeadAttention, ResNetStem,
    cross_entropy, linear_forward, mha_forward, resnet_stem_forward, softmax_probs,
)
from segprompt.tensor import Tape, Tensor, backward

from helpers import gradcheck


def rng_for(seed):
    return np.random.default_rng(seed)


class TestLinear:
    def test_identity_weight_zero_bias(self):
        layer = Linear(4, 4, rng_for(0))
        layer.weight.data = np.eye(4)
        layer.bias.data = np.zeros(4)
        x = rng_for(1).normal(size=(3, 4))
        np.testing.assert_allclose(linear_forward(layer, Tensor(x)).data, x)

    def test_zero_weight_gives_bias_rows(self):
        layer = Linear(4, 2, rng_for(0))
        layer.weight.data = np.zeros((2, 4))
        layer.bias.data = np.array([0.5, -1.0])
        out = linear_forward(layer, Tensor(np.ones((3, 4))))
        np.testing.assert_allclose(out.data, np.tile([0.5, -1.0], (3, 1)))

    def test_matches_matmul_oracle(self):
        layer = Linear(5, 3, rng_for(2))
        x = rng_for(3).normal(size=(4, 5))
        expect = x @ layer.weight.data.T + layer.bias.data
        np.testing.assert_allclose(linear_forward(layer, Tensor(x)).data, expect)

    def test_dimension_error(self):
        layer = Linear(5, 3, rng_for(2))
        with pytest.raises(DimensionError):
            linear_forward(layer, Tensor(np.zeros((4, 6))))


class TestLayerNorm:
    def test_normalization_invariants(self):
        ln = LayerNorm(16)
        x = rng_for(4).normal(size=(10, 16)) * 2.0
        out = ln.forward(Tensor(x)).data  # gamma=1, beta=0 at init
        assert np.abs(out.mean(axis=-1)).max() < 1e-7
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_eps_default(self):
        assert LayerNorm(8).eps == 1e-6


class TestMultiHeadAttention:
    def test_single_token_reduces_to_value_path(self):
        attn = MultiHeadAttention(8, 2, rng_for(5))
        token = rng_for(6).normal(size=(1, 8))
        out = mha_forward(attn, Tensor(token))
        expect = (token @ attn.w_v.weight.data.T) @ attn.w_o.weight.data.T
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_identical_tokens_identical_outputs(self):
        attn = MultiHeadAttention(8, 2, rng_for(7))
        row = rng_for(8).normal(size=8)
        out = mha_forward(attn, Tensor(np.stack([row, row])))
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)

    def test_matches_naive_loop_oracle(self):
        d, heads, n = 8, 2, 4
        attn = MultiHeadAttention(d, heads, rng_for(9))
        z = rng_for(10).normal(size=(n, d))
        out = mha_forward(attn, Tensor(z)).data

        hd = d // heads
        q = z @ attn.w_q.weight.data.T + attn.w_q.bias.data
        k = z @ attn.w_k.weight.data.T + attn.w_k.bias.data
        v = z @ attn.w_v.weight.data.T + attn.w_v.bias.data
        merged = np.zeros((n, d))
        for h in range(heads):
            qs, ks, vs = (m[:, h * hd:(h + 1) * hd] for m in (q, k, v))
            for i in range(n):
                scores = np.array([qs[i] @ ks[j] / np.sqrt(hd) for j in range(n)])
                e = np.exp(scores - scores.max())
                w = e / e.sum()
                merged[i, h * hd:(h + 1) * hd] = sum(w[j] * vs[j] for j in range(n))
        expect = merged @ attn.w_o.weight.data.T + attn.w_o.bias.data
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_attention_row_stochastic(self):
        attn = MultiHeadAttention(8, 4, rng_for(11))
        mha_forward(attn, Tensor(rng_for(12).normal(size=(2, 5, 8))))
        sums = attn.last_weights.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_divisibility_error(self):
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(10, 3, rng_for(13))

    def test_gradcheck(self):
        attn = MultiHeadAttention(4, 2, rng_for(14))
        z = Tensor(rng_for(15).normal(size=(3, 4)))
        params = [t for _, t in attn.parameters()]
        gradcheck(lambda: T.reduce_sum(T.tanh(attn.forward(z))), [z] + params)


class TestCrossEntropy:
    def test_confident_correct_goes_to_zero(self):
        logits = Tensor(np.array([[20.0, -20.0], [-20.0, 20.0]]))
        loss = cross_entropy(logits, [0, 1])
        assert loss.item() < 1e-8

    def test_uniform_two_classes_is_ln2(self):
        loss = cross_entropy(Tensor(np.zeros((4, 2))), [0, 1, 0, 1])
        np.testing.assert_allclose(loss.item(), np.log(2.0), atol=1e-12)

    def test_uniform_equals_ln_c(self):
        for c in (2, 3, 5):
            loss = cross_entropy(Tensor(np.zeros((3, c))), [0, 1, 0])
            np.testing.assert_allclose(loss.item(), np.log(c), atol=1e-12)

    def test_matches_per_sample_oracle(self):
        rng = rng_for(16)
        logits = rng.normal(size=(3, 2))
        labels = [1, 0, 1]
        per_sample = []
        for row, label in zip(logits, labels):
            p = np.exp(row) / np.exp(row).sum()
            per_sample.append(-np.log(p[label]))
        loss = cross_entropy(Tensor(logits), labels)
        np.testing.assert_allclose(loss.item(), np.mean(per_sample), atol=1e-12)

    def test_non_negative(self):
        rng = rng_for(17)
        for _ in range(20):
            logits = Tensor(rng.normal(scale=5.0, size=(4, 3)))
            labels = rng.integers(0, 3, size=4)
            assert cross_entropy(logits, labels).item() >= 0.0

    def test_out_of_range_label(self):
        with pytest.raises(ContractError, match="range"):
            cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])

    def test_gradcheck(self):
        rng = rng_for(18)
        logits = Tensor(rng.normal(size=(4, 3)))
        labels = [0, 2, 1, 1]
        gradcheck(lambda: cross_entropy(logits, labels), [logits])

    def test_softmax_probs_rows(self):
        probs = softmax_probs(Tensor(np.array([[0.0, np.log(3.0)]])))
        np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-12)


class TestResNetStem:
    def test_zero_input_gives_zero_output(self):
        stem = ResNetStem(rng_for(19))
        out = resnet_stem_forward(stem, Tensor(np.zeros((3, 16, 16))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_downsample_factor(self):
        stem = ResNetStem(rng_for(20))
        out = resnet_stem_forward(stem, Tensor(np.zeros((2, 3, 32, 32))))
        assert out.shape == (2, 32, 8, 8)

    def test_forward_finite(self):
        stem = ResNetStem(rng_for(21))
        out = resnet_stem_forward(stem, Tensor(rng_for(22).normal(size=(3, 16, 16))))
        assert np.isfinite(out.data).all()

    def test_spatial_divisibility_error(self):
        stem = ResNetStem(rng_for(23))
        with pytest.raises(DimensionError):
            resnet_stem_forward(stem, Tensor(np.zeros((3, 15, 15))))

    def test_channel_error(self):
        stem = ResNetStem(rng_for(23))
        with pytest.raises(DimensionError):
            resnet_stem_forward(stem, Tensor(np.zeros((4, 16, 16))))

    def test_gradcheck_small(self):
        stem = ResNetStem(rng_for(24), widths=(2, 3))
        x = Tensor(rng_for(25).normal(size=(3, 8, 8)))
        params = [t for _, t in stem.parameters()]
        gradcheck(lambda: T.reduce_sum(T.tanh(stem.forward(x))), [x] + params[:4])


class TestParameterProtocol:
    def test_names_unique_and_stable(self):
        stems = [ResNetStem(rng_for(26)), ResNetStem(rng_for(26))]
        names = [[n for n, _ in s.parameters()] for s in stems]
        assert names[0] == names[1]
        assert len(names[0]) == len(set(names[0]))

    def test_attention_names(self):
        attn = MultiHeadAttention(8, 2, rng_for(27))
        names = [n for n, _ in attn.parameters()]
        assert names == ["w_q.weight", "w_q.bias", "w_k.weight", "w_k.bias",
                         "w_v.weight", "w_v.bias", "w_o.weight", "w_o.bias"]


class TestConvLayerAndAffine:
    def test_conv_bias_applied(self):
        conv = Conv2d(1, 2, 1, rng_for(28), bias=True)
        conv.weight.data[:] = 0.0
        conv.bias.data = np.array([1.0, -2.0])
        out = conv.forward(Tensor(np.zeros((1, 3, 3))))
        np.testing.assert_allclose(out.data[0], 1.0)
        np.testing.assert_allclose(out.data[1], -2.0)

    def test_channel_affine(self):
        aff = ChannelAffine(2)
        aff.gamma.data = np.array([2.0, 3.0])
        aff.beta.data = np.array([1.0, 0.0])
        x = np.ones((2, 2, 2))
        out = aff.forward(Tensor(x))
        np.testing.assert_allclose(out.data[0], 3.0)
        np.testing.assert_allclose(out.data[1], 3.0)
