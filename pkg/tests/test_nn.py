import numpy as np
import pytest

from dynfusion import gradcheck as gc
from dynfusion import nn
from dynfusion import tensor as T
from dynfusion.errors import ConfigError, ShapeError
from dynfusion.rng import PCG32
from dynfusion.tensor import Tensor


def randn(seed, *shape):
    return PCG32(seed, 99).normal(int(np.prod(shape))).reshape(shape)


class TestParamCounts:
    def test_linear(self):
        assert nn.linear_params(64, 2) == 130

    def test_transformer_layer_768(self):
        assert nn.transformer_layer_params(768, 3072) == 7_087_872

    def test_transformer_layer_1024(self):
        assert nn.transformer_layer_params(1024, 4096) == 12_596_224
        assert 24 * nn.transformer_layer_params(1024, 4096) == 302_309_376

    def test_lstm(self):
        assert nn.lstm_params(10, 4) == 4 * 4 * (10 + 4 + 1)
        assert nn.bilstm_params(10, 4) == 2 * nn.lstm_params(10, 4)

    @pytest.mark.parametrize("layer", [
        nn.Linear(7, 3), nn.Embedding(11, 5), nn.LayerNorm(6), nn.Conv1d(3, 4, 5, 2), nn.Conv2dBlock(2, 5),
        nn.MultiHeadSelfAttention(8, 2), nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 12, 2)),
        nn.LSTM(6, 3), nn.BiLSTM(nn.BiLstmConfig(6, 3)),
    ], ids=lambda m: type(m).__name__)
    def test_analytic_equals_instantiated(self, layer):
        assert layer.param_count() == layer.num_elements()


class TestInitialisation:
    def test_seeded_and_named(self):
        a = nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 12, 2)).initialize(3, "enc.")
        b = nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 12, 2)).initialize(3, "enc.")
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        assert a.attn.w_q.name == "enc.attn.w_q"

    def test_glorot_bounds(self):
        lin = nn.Linear(30, 20).initialize(0)
        bound = np.sqrt(6 / 50)
        assert np.abs(lin.weight.data).max() <= bound
        assert not np.any(lin.bias.data)

    def test_state_dict_round_trip(self):
        a = nn.Conv2dBlock(2, 3).initialize(1)
        b = nn.Conv2dBlock(2, 3).initialize(2)
        b.load_state_dict(a.state_dict())
        assert np.array_equal(a.weight.data, b.weight.data)
        with pytest.raises(ShapeError):
            nn.Conv2dBlock(2, 4).load_state_dict(a.state_dict())
        with pytest.raises(KeyError):
            b.load_state_dict({})


class TestAttention:
    def test_shapes_and_weights(self):
        attn = nn.MultiHeadSelfAttention(8, 2).initialize(0)
        x = Tensor(randn(1, 3, 5, 8))
        assert attn(x).shape == (3, 5, 8)
        assert np.abs(attn.last_weights.sum(axis=-1) - 1).max() <= 1e-12

    def test_padding_gets_no_weight(self):
        attn = nn.MultiHeadSelfAttention(8, 2).initialize(0)
        mask = np.array([[False, False, True, True]])
        attn(Tensor(randn(2, 1, 4, 8)), mask)
        assert np.all(attn.last_weights[0, :, :, 2:] == 0.0)

    def test_padding_does_not_change_real_positions(self):
        layer = nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 12, 2)).initialize(4)
        x = randn(3, 1, 3, 8)
        padded = np.concatenate([x, randn(4, 1, 2, 8)], axis=1)
        short = layer(Tensor(x)).data
        long = layer(Tensor(padded), np.array([[False] * 3 + [True] * 2])).data
        assert np.allclose(short, long[:, :3], atol=1e-12)

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            nn.TransformerEncoderLayerConfig(10, 12, 3)

    def test_positions(self):
        table = nn.sinusoidal_positions(5, 6)
        assert table.shape == (5, 6)
        assert np.array_equal(table[0], [0, 1, 0, 1, 0, 1])

    def test_wrong_width(self):
        layer = nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 12, 2)).initialize(0)
        with pytest.raises(ShapeError):
            layer(Tensor(np.zeros((1, 3, 6))))


class TestBiLSTM:
    def cfg(self):
        return nn.BiLstmConfig(input_size=4, hidden_size=3)

    def test_output_length(self):
        lstm = nn.BiLSTM(self.cfg()).initialize(0)
        assert lstm(Tensor(randn(0, 2, 6, 4))).shape == (2, 6)

    def test_single_frame(self):
        lstm = nn.BiLSTM(self.cfg()).initialize(0)
        lstm.bwd.load_state_dict(lstm.fwd.state_dict())
        out = lstm(Tensor(randn(1, 1, 4))).data
        assert np.array_equal(out[:3], out[3:])

    def test_reversal_swaps_halves(self):
        lstm = nn.BiLSTM(self.cfg()).initialize(5)
        lstm.bwd.load_state_dict(lstm.fwd.state_dict())
        for seed in range(10):
            x = randn(seed, 7, 4)
            a = lstm(Tensor(x)).data
            b = lstm(Tensor(x[::-1].copy())).data
            assert np.allclose(a[:3], b[3:], atol=1e-14)
            assert np.allclose(a[3:], b[:3], atol=1e-14)

    def test_gate_order(self):
        # with zero recurrent weights and bias, one step is o*tanh(i*g) from x @ w_ih
        cell = nn.LSTM(2, 1).initialize(0)
        cell.w_hh.data[:] = 0
        x = np.array([[0.3, -0.7]])
        z = x @ cell.w_ih.data
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        i, o, g = sig(z[0, 0]), sig(z[0, 2]), np.tanh(z[0, 3])
        h = cell(Tensor(x[None])).data
        assert h[0, 0] == pytest.approx(o * np.tanh(i * g), rel=1e-12)

    def test_bad_input(self):
        lstm = nn.BiLSTM(self.cfg()).initialize(0)
        with pytest.raises(ShapeError):
            lstm(Tensor(np.zeros((1, 3, 5))))


class TestConvBlock:
    def test_first_block_shape(self):
        block = nn.Conv2dBlock(1, 16).initialize(0)
        out = block(Tensor(randn(0, 1, 1, 128, 48)))
        assert out.shape == (1, 16, 64, 24)

    def test_three_blocks(self):
        blocks = [nn.Conv2dBlock(1, 16), nn.Conv2dBlock(16, 32), nn.Conv2dBlock(32, 64)]
        x = Tensor(randn(1, 1, 1, 128, 48))
        for b in blocks:
            x = b.initialize(0)(x)
        assert x.shape == (1, 64, 16, 6)

    def test_zero_input(self):
        block = nn.Conv2dBlock(1, 4).initialize(0)
        assert not np.any(block(Tensor(np.zeros((1, 1, 8, 8)))).data)

    def test_too_small(self):
        block = nn.Conv2dBlock(1, 4).initialize(0)
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 1, 1, 8))))


class TestLayerGradients:
    @pytest.mark.parametrize("layer", gc.LAYERS)
    def test_layer(self, layer):
        result = gc.check_layer(layer, instances=20)
        assert result.max_error < 1e-6, result

    def test_linear_single_vector(self):
        lin = nn.Linear(4, 3).initialize(0)
        x = Tensor(randn(2, 4), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(lin(x)))  # noqa: E731
        assert T.grad_check(fn, [x] + lin.parameters()) < 1e-6
