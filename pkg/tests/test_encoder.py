"""
Tests for subsampling, the Conformer modules and the encoder stack.
"""
import numpy as np
import pytest

from conformer_r.encoder import (
    ConformerBlockParams,
    ConvModuleParams,
    ConvSubsampleParams,
    EncoderParams,
    FeedForwardParams,
    conformer_block,
    conv_subsample,
    convolution_module,
    encoder_forward,
    feed_forward_module,
    glu_gate,
    min_input_frames,
    subsampled_length,
)
from conformer_r.errors import DimensionError
from conformer_r.models import ConformerConfig
from conformer_r.tensor import RngState, Tensor, layer_norm, swish
from tests.conftest import leaf, random_features

SMALL = ConformerConfig(n_blocks=1, d_model=4, n_heads=2, ff_expansion=2, depthwise_kernel=3,
                        dropout_p=0.0, subsample_channels=2)


def zero_weights(module):
    """Zero every parameter except normalization gains and shifts."""
    for name, p in module.named_parameters():
        if not name.endswith(("gamma", "beta")):
            p.data[...] = 0.0


class TestSubsampling:
    """Tests for the two-layer convolutional subsampler."""

    @pytest.mark.parametrize("frames, expected", [(16, 3), (7, 1), (6, 0), (2, 0), (100, 24)])
    def test_length_law(self, frames, expected):
        """Test T' = floor((floor((T-3)/2)+1 - 3)/2) + 1."""
        assert subsampled_length(frames) == expected

    def test_doubling_frames_roughly_doubles_output(self):
        """Test that T' grows by about a factor of two."""
        assert subsampled_length(400) / subsampled_length(200) == pytest.approx(2.0, rel=0.02)

    def test_output_shape(self, rng):
        """Test [T' x d_model] output for 16 frames."""
        params = ConvSubsampleParams(rng, 2, 4)
        out, steps = conv_subsample(leaf(random_features(rng, 16)), params)
        assert steps == 3
        assert out.shape == (3, 4)

    def test_too_short_names_minimum(self, rng):
        """Test that a short input raises with the minimum frame count."""
        params = ConvSubsampleParams(rng, 2, 4)
        assert min_input_frames() == 7
        with pytest.raises(DimensionError, match="7"):
            conv_subsample(leaf(random_features(rng, 6)), params)

    def test_wrong_width(self, rng):
        """Test that non-80-dim features are rejected."""
        with pytest.raises(DimensionError):
            conv_subsample(leaf(np.zeros((10, 40))), ConvSubsampleParams(rng, 2, 4))


class TestGluAndModules:
    """Tests for the gate, convolution and feed-forward modules."""

    def test_glu_zero_gate(self, rng):
        """Test that a zero gate halves the linear path."""
        params = ConvModuleParams(rng, 2, 3)
        params.gate.weight.data[...] = 0.0
        x = leaf(rng.normal(size=(1, 2)))
        expected = 0.5 * (x.data @ params.pw_in.weight.data + params.pw_in.bias.data)
        np.testing.assert_allclose(glu_gate(x, params).data, expected)

    def test_glu_zero_input(self, rng):
        """Test that x = 0 leaves b * sigmoid(c)."""
        params = ConvModuleParams(rng, 2, 3)
        params.pw_in.bias.data[...] = [1.0, -2.0]
        params.gate.bias.data[...] = [0.0, 3.0]
        out = glu_gate(leaf(np.zeros((1, 2))), params).data
        np.testing.assert_allclose(out, [[0.5, -2.0 / (1.0 + np.exp(-3.0))]])

    def test_glu_scalar_trace(self, rng):
        """Test a random 1x2 input against an element-wise expansion."""
        params = ConvModuleParams(rng, 2, 3)
        params.pw_in.bias.data[...] = rng.normal(size=2)
        params.gate.bias.data[...] = rng.normal(size=2)
        x = rng.normal(size=(1, 2))
        w, b = params.pw_in.weight.data, params.pw_in.bias.data
        v, c = params.gate.weight.data, params.gate.bias.data
        expected = [
            (x[0, 0] * w[0, j] + x[0, 1] * w[1, j] + b[j])
            / (1.0 + np.exp(-(x[0, 0] * v[0, j] + x[0, 1] * v[1, j] + c[j])))
            for j in range(2)
        ]
        np.testing.assert_allclose(glu_gate(leaf(x), params).data[0], expected, atol=1e-12)

    def test_convolution_module_zero_weights(self, rng):
        """Test that zero weights give zero output."""
        params = ConvModuleParams(rng, 4, 3)
        zero_weights(params)
        out = convolution_module(leaf(rng.normal(size=(5, 4))), params, 0.0, False, None)
        np.testing.assert_array_equal(out.data, np.zeros((5, 4)))

    def test_convolution_module_staged_trace(self, rng):
        """Test T = 2, d = 2 against the module's stages composed by hand."""
        params = ConvModuleParams(rng, 2, 3)
        x = rng.normal(size=(2, 2))
        normed = layer_norm(leaf(x), params.norm.gamma, params.norm.beta).data
        gated = (normed @ params.pw_in.weight.data + params.pw_in.bias.data) / (
            1.0 + np.exp(-(normed @ params.gate.weight.data + params.gate.bias.data)))
        k = params.dw.data
        conv = np.stack([gated[0] * k[1] + gated[1] * k[2], gated[0] * k[0] + gated[1] * k[1]])
        bn = conv / np.sqrt(1.0 + 1e-5)
        act = bn / (1.0 + np.exp(-bn))
        expected = act @ params.pw_out.weight.data + params.pw_out.bias.data
        out = convolution_module(leaf(x), params, 0.0, False, None)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_convolution_module_eval_deterministic(self, rng):
        """Test that eval mode ignores dropout and repeats bit-identically."""
        params = ConvModuleParams(rng, 4, 3)
        x = leaf(rng.normal(size=(5, 4)))
        a = convolution_module(x, params, 0.5, False, None).data
        b = convolution_module(x, params, 0.5, False, None).data
        np.testing.assert_array_equal(a, b)

    def test_feed_forward_zero_and_shape(self, rng):
        """Test zero weights give zero and shapes are preserved."""
        params = FeedForwardParams(rng, 4, 2)
        x = leaf(rng.normal(size=(3, 4)))
        assert feed_forward_module(x, params, 0.0, False, None).shape == (3, 4)
        zero_weights(params)
        np.testing.assert_array_equal(feed_forward_module(x, params, 0.0, False, None).data, np.zeros((3, 4)))

    def test_feed_forward_staged_trace(self, rng):
        """Test identity-like weights against a swish trace."""
        params = FeedForwardParams(rng, 2, 1)
        params.w1.weight.data[...] = np.eye(2)
        params.w2.weight.data[...] = np.eye(2)
        x = rng.normal(size=(2, 2))
        normed = layer_norm(leaf(x), params.norm.gamma, params.norm.beta).data
        out = feed_forward_module(leaf(x), params, 0.0, False, None)
        np.testing.assert_allclose(out.data, swish(Tensor(normed)).data, atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        """Test that the depthwise kernel must be odd."""
        with pytest.raises(DimensionError):
            ConvModuleParams(rng, 4, 4)
        with pytest.raises(ValueError):
            ConformerConfig(depthwise_kernel=4)


class TestConformerBlock:
    """Tests for one macaron block."""

    def test_zero_weights_leave_layer_norm(self, rng):
        """Test that zeroed sub-modules reduce the block to LayerNorm(x)."""
        params = ConformerBlockParams(rng, SMALL)
        zero_weights(params)
        x = rng.normal(size=(3, 4))
        out = conformer_block(leaf(x), params, SMALL, False, None)
        expected = layer_norm(leaf(x), params.final_norm.gamma, params.final_norm.beta).data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_preserved(self, rng):
        """Test [T x d_model] in and out."""
        params = ConformerBlockParams(rng, SMALL)
        assert conformer_block(leaf(rng.normal(size=(2, 4))), params, SMALL, False, None).shape == (2, 4)


class TestEncoder:
    """Tests for the full encoder."""

    def test_zero_blocks_reduce_to_subsample(self, rng):
        """Test that zeroed blocks equal LayerNorm of the subsampled input."""
        params = EncoderParams(rng, SMALL)
        for block in params.blocks:
            zero_weights(block)
        feats = random_features(rng, 16)
        out, steps = encoder_forward(leaf(feats), params, train=False)
        sub, _ = conv_subsample(leaf(feats), params.subsample)
        block = params.blocks[0]
        expected = layer_norm(sub, block.final_norm.gamma, block.final_norm.beta).data
        assert steps == 3
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_eval_idempotent(self, rng):
        """Test that eval mode repeats bit-identically."""
        cfg = SMALL.model_copy(update={"dropout_p": 0.3})
        params = EncoderParams(rng, cfg)
        feats = leaf(random_features(rng, 12))
        a, _ = encoder_forward(feats, params, train=False)
        b, _ = encoder_forward(feats, params, train=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_train_mode_reproducible_from_seed(self, rng):
        """Test that train mode is a function of the rng state."""
        cfg = SMALL.model_copy(update={"dropout_p": 0.3})
        params = EncoderParams(rng, cfg)
        feats = leaf(random_features(rng, 12))
        a, _ = encoder_forward(feats, params, train=True, rng=RngState(5))
        b, _ = encoder_forward(feats, params, train=True, rng=RngState(5))
        c, _ = encoder_forward(feats, params, train=True, rng=RngState(6))
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_batch_norm_stats_change_only_in_train(self, rng):
        """Test that eval leaves running statistics alone."""
        params = EncoderParams(rng, SMALL)
        feats = leaf(random_features(rng, 12))
        before = {name: value.copy() for name, value in params.named_buffers()}
        encoder_forward(feats, params, train=False)
        for name, value in params.named_buffers():
            np.testing.assert_array_equal(value, before[name])
        encoder_forward(feats, params, train=True, rng=RngState(0))
        assert any(not np.array_equal(value, before[name]) for name, value in params.named_buffers())

    @pytest.mark.parametrize("train", [False, True])
    def test_input_gradient(self, rng, grad_error, train):
        """Test the gradient of a scalar readout with respect to the features."""
        params = EncoderParams(rng, SMALL)
        feats = leaf(random_features(rng, 12))
        readout = Tensor(rng.normal(size=(2, 4)))

        def loss():
            out, _ = encoder_forward(feats, params, train=train, rng=RngState(1))
            return (out * readout).sum()

        assert grad_error(loss, [feats], points=30) < 1e-5

    def test_parameter_gradient(self, rng, grad_error):
        """Test the gradient with respect to every encoder parameter."""
        params = EncoderParams(rng, SMALL)
        for name, p in params.named_parameters():
            if name.endswith((".u", ".v")):
                p.data[...] = rng.normal(size=p.shape)
        feats = random_features(rng, 12)
        readout = Tensor(rng.normal(size=(2, 4)))

        def loss():
            out, _ = encoder_forward(Tensor(feats), params, train=False)
            return (out * readout).sum()

        assert grad_error(loss, params.parameters(), points=60) < 1e-5
