import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtransfer import nn
from vtransfer.nn import (
    ConfigError,
    Conv1d,
    ConvBlock,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    NonFiniteError,
    Parameter,
    ShapeError,
    TransformerLayer,
    conv1d,
    conv_output_length,
    dot_product_attention,
    grad_check,
    l2_normalize,
    softmax,
    softmax_cross_entropy,
)


def conv_oracle(x, kernel, stride, padding):
    """Direct per-output-sample sum, independent of the tap-loop implementation."""
    t, c = x.shape
    w, _, c_out = kernel.shape
    if padding in ("same", "replicate"):
        out_len = -(-t // stride)
        total = max((out_len - 1) * stride + w - t, 0)
        left = total // 2
    else:
        out_len = (t - w) // stride + 1
        left = 0
    y = np.zeros((out_len, c_out))
    for i in range(out_len):
        for k in range(w):
            src = i * stride + k - left
            if padding == "replicate":
                src = min(max(src, 0), t - 1)
            if 0 <= src < t:
                y[i] += x[src] @ kernel[k]
    return y


class TestConv1d:
    def test_identity_kernel(self):
        x = np.arange(8.0).reshape(8, 1)
        y, _ = conv1d(x, np.ones((1, 1, 1)))
        assert np.array_equal(y, x)

    def test_two_stride4_layers_reduce_by_16(self, rng):
        x = rng.normal(size=(32, 3))
        k = rng.normal(size=(8, 3, 3))
        a, _ = conv1d(x, k, stride=4)
        b, _ = conv1d(a, k, stride=4)
        assert (a.shape[0], b.shape[0]) == (8, 2)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (4, "same"), (1, "valid"), (3, "valid"), (4, "replicate"), (1, "replicate")])
    def test_matches_direct_sum(self, rng, stride, padding):
        x = rng.normal(size=(17, 3))
        k = rng.normal(size=(5, 3, 2))
        y, _ = conv1d(x, k, stride=stride, padding=padding)
        np.testing.assert_allclose(y, conv_oracle(x, k, stride, padding), atol=1e-12)

    def test_gradcheck_sum_output(self, rng):
        layer = Conv1d(2, 2, 3, rng)
        err = grad_check(layer, rng.normal(size=(6, 2)), projection="sum", max_entries=None)
        assert err < 1e-4

    def test_channel_mismatch_names_dimensions(self, rng):
        with pytest.raises(ShapeError, match="3.*2|2.*3"):
            conv1d(rng.normal(size=(5, 3)), rng.normal(size=(3, 2, 2)))

    @given(st.integers(1, 200), st.integers(1, 9), st.integers(1, 6))
    def test_same_padding_length_is_ceil(self, t, w, s):
        assert conv_output_length(t, w, s, "same") == math.ceil(t / s)

    def test_replicate_keeps_constant_input_constant(self, rng):
        y, _ = conv1d(np.full((32, 3), 0.7), rng.normal(size=(8, 3, 3)), stride=4, padding="replicate")
        assert np.all(y == y[0])

    def test_deterministic(self, rng):
        x = rng.normal(size=(9, 2))
        k = rng.normal(size=(3, 2, 4))
        assert np.array_equal(conv1d(x, k)[0], conv1d(x, k)[0])


class TestAttention:
    def test_orthogonal_query_gives_uniform_weights(self, rng):
        keys = np.zeros((5, 8))
        keys[:, :4] = rng.normal(size=(5, 4))
        query = np.zeros((1, 8))
        query[0, 4:] = 1.0  # orthogonal to every key
        values = rng.normal(size=(5, 8))
        out, w, _ = dot_product_attention(query, keys, values, heads=1)
        np.testing.assert_allclose(w, 0.2, atol=1e-15)
        np.testing.assert_allclose(out, values.mean(axis=0, keepdims=True), atol=1e-14)

    def test_single_key(self, rng):
        values = rng.normal(size=(1, 8))
        out, w, _ = dot_product_attention(rng.normal(size=(3, 8)), rng.normal(size=(1, 8)), values, heads=4)
        assert np.all(w == 1.0)
        np.testing.assert_allclose(out, np.repeat(values, 3, axis=0), atol=1e-15)

    def test_weights_are_distributions(self, rng):
        _, w, _ = dot_product_attention(rng.normal(size=(1, 8)), rng.normal(size=(5, 8)),
                                        rng.normal(size=(5, 8)), heads=4)
        assert w.shape == (4, 1, 5)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ConfigError):
            dot_product_attention(rng.normal(size=(1, 6)), rng.normal(size=(2, 6)), rng.normal(size=(2, 6)), 4)


class TestGradCheck:
    def test_linear_is_exact_to_roundoff(self, rng):
        assert grad_check(Linear(4, 3, rng), rng.normal(size=(5, 4)), max_entries=None) < 1e-6

    @pytest.mark.parametrize("eps", [1e-8, 1e-2])
    def test_eps_range_enforced(self, rng, eps):
        with pytest.raises(ConfigError):
            grad_check(Linear(2, 2, rng), rng.normal(size=(1, 2)), eps=eps)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_raises(self, rng):
        class Bad(Module):
            def forward(self, x):
                return x * np.inf, None

            def backward(self, dy, ctx):
                return dy

        with pytest.raises(NonFiniteError):
            grad_check(Bad(), rng.normal(size=(2, 2)))

    def test_cross_entropy_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros((1, 4)), [2])
        assert loss == pytest.approx(math.log(4))
        np.testing.assert_allclose(grad, [[0.25, 0.25, -0.75, 0.25]])

    @pytest.mark.parametrize(
        "make,shape,kw",
        [
            (lambda r: LayerNorm(5), (4, 5), {}),
            (lambda r: FeedForward(6, 10, r), (3, 6), {}),
            (lambda r: MultiHeadSelfAttention(8, 2, r), (5, 8), {}),
            (lambda r: TransformerLayer(8, 4, 12, r), (6, 8), {}),
            (lambda r: ConvBlock(4, 3, r), (7, 4), {}),
            (lambda r: Conv1d(3, 2, 8, r, stride=4), (19, 3), {}),
            (lambda r: Conv1d(3, 2, 8, r, stride=4, padding="replicate"), (19, 3), {}),
        ],
    )
    def test_layers(self, rng, make, shape, kw):
        layer = make(rng)
        # move off the init point so e.g. LayerNorm gain/shift gradients are non-trivial
        for p in layer.parameters():
            p.value += rng.normal(0.0, 0.1, size=p.shape)
        assert grad_check(layer, rng.normal(size=shape), **kw) < 1e-4

    def test_embedding_table_gradient(self, rng):
        emb = Embedding(6, 4, rng)

        class Wrap(Module):
            def __init__(self):
                self.emb = emb

            def forward(self, x):
                return self.emb.forward(np.array([0, 3, 3, 5]))

            def backward(self, dy, ctx):
                self.emb.backward(dy, ctx)

        assert grad_check(Wrap(), np.zeros(1), check_input=False, max_entries=None) < 1e-6


class TestPrimitives:
    @settings(max_examples=50)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                  elements=st.floats(-700, 700)))
    def test_softmax_rows_sum_to_one(self, logits):
        p = softmax(logits)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_l2_normalize_rejects_zero(self):
        with pytest.raises(NonFiniteError):
            l2_normalize(np.zeros((1, 3)))

    def test_embedding_out_of_vocab(self, rng):
        with pytest.raises(ValueError, match="outside vocabulary"):
            Embedding(4, 2, rng).forward(np.array([1, 4]))

    def test_parameter_names_hierarchical_and_unique(self, rng):
        class Net(Module):
            def __init__(self):
                self.a = Linear(2, 2, rng)
                self.blocks = [ConvBlock(2, 3, rng), ConvBlock(2, 3, rng)]

        net = Net()
        net.assign_names("net.")
        names = [p.name for p in net.parameters()]
        assert len(set(names)) == len(names)
        assert "net.blocks.1.conv.kernel" in names

    def test_parameter_gradient_matches_value_shape(self):
        p = Parameter(np.ones((2, 3)))
        assert p.grad.shape == p.value.shape

    def test_float64_default(self, rng):
        assert Linear(2, 2, rng).weight.value.dtype == nn.DTYPE == np.float64
