import numpy as np
import pytest

from freqasr import tensor as T
from freqasr.layers import (LSTM, BiLSTM, Conv2d, Linear, MultiHeadSelfAttention, TransformerEncoderLayer,
                            attention_core, bilstm_param_count, conv2d, conv2d_param_count, dropout,
                            encoder_layer_param_count, layer_norm, linear_param_count, mask_time,
                            max_pool_time, reverse_time)
from freqasr.tensor import Tensor, grad_check

SEEDS = range(5)


def _probe(shape, seed):
    """Random projection turning any output into a scalar loss."""
    return np.random.default_rng(seed + 500).normal(size=shape)


def _params_as_inputs(module):
    """grad_check helper: lets the parameter tensors themselves be perturbed.

    The key-projection bias is left out: it shifts every score in a row
    equally, so its true gradient is exactly zero and a relative error
    between two round-off values carries no information.  It gets its own
    absolute check below.
    """
    return [p for name, p in module.named_parameters() if not name.endswith("k.bias")]


# -- conv2d -------------------------------------------------------------------

def test_conv_1x1_unit_kernel_is_identity():
    conv = Conv2d(1, 1, kernel=1)
    conv.weight.data[...] = 1.0
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7))
    np.testing.assert_array_equal(conv(Tensor(x)).data, x)


def test_conv_all_ones_on_constant_interior():
    conv = Conv2d(1, 1, kernel=3)
    conv.weight.data[...] = 1.0
    out = conv(Tensor(np.ones((1, 1, 6, 6)))).data
    np.testing.assert_array_equal(out[0, 0, 1:-1, 1:-1], 9.0)
    assert out[0, 0, 0, 0] == 4.0


def test_conv_same_padding_keeps_40_bins():
    assert Conv2d(3, 5)(Tensor(np.zeros((2, 3, 7, 40)))).shape == (2, 5, 7, 40)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        Conv2d(2, 4)(Tensor(np.zeros((1, 3, 4, 4))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), (1, 1)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("padding", [(1, 1), (0, 0), (2, 1)])
def test_conv_gradient(seed, padding):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 2, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    probe = _probe(conv2d(Tensor(x), Tensor(w), Tensor(b), padding).shape, seed)
    assert grad_check(lambda a, c, d: (conv2d(a, c, d, padding) * probe).sum(), [x, w, b]) < 1e-6


# -- pooling ---------------------------------------------------------------------

def test_pool_even_length():
    assert max_pool_time(Tensor(np.zeros((1, 2, 10, 3)))).shape == (1, 2, 5, 3)


def test_pool_odd_length_drops_last_frame():
    x = np.zeros((1, 1, 11, 2))
    x[0, 0, 10] = 99.0
    out = max_pool_time(Tensor(x))
    assert out.shape == (1, 1, 5, 2)
    assert out.data.max() == 0.0


def test_pool_takes_pairwise_max():
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 4))
    ref = np.maximum(x[:, :, 0::2], x[:, :, 1::2])
    np.testing.assert_array_equal(max_pool_time(Tensor(x)).data, ref)


def test_pool_too_short():
    with pytest.raises(ValueError):
        max_pool_time(Tensor(np.zeros((1, 1, 1, 4))))


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_path_gradient(seed):
    # conv -> relu -> pool, the front-end path of the acoustic model
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(1, 2, 7, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    probe = _probe((1, 2, 3, 4), seed)
    fn = lambda a, c, d: (max_pool_time(T.relu(conv2d(a, c, d, (1, 1)))) * probe).sum()
    assert grad_check(fn, [x, w, b]) < 1e-4


# -- LSTM / BiLSTM -------------------------------------------------------------------

def test_bilstm_zero_weights_give_zero_output():
    layer = BiLSTM(3, 2)
    for p in layer.parameters():
        p.data[...] = 0.0
    out = layer(Tensor(np.random.default_rng(0).normal(size=(2, 5, 3))))
    assert out.shape == (2, 5, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_bilstm_empty_sequence():
    with pytest.raises(ValueError):
        BiLSTM(3, 2)(Tensor(np.zeros((1, 0, 3))))


def test_lstm_matches_reference_cell():
    rng = np.random.default_rng(4)
    cell = LSTM(3, 2, rng)
    x = rng.normal(size=(1, 4, 3))
    W, U, b = cell.W.data, cell.U.data, cell.b.data
    sig = lambda z: 1 / (1 + np.exp(-z))
    h, c = np.zeros(2), np.zeros(2)
    for t in range(4):
        z = x[0, t] @ W + h @ U + b
        i, f, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
        c = f * c + i * g
        h = o * np.tanh(c)
    np.testing.assert_allclose(cell(Tensor(x)).data[0, -1], h, atol=1e-14)


def test_bilstm_direction_symmetry():
    rng = np.random.default_rng(2)
    layer = BiLSTM(3, 2, rng)
    swapped = BiLSTM(3, 2)
    swapped.fwd, swapped.bwd = layer.bwd, layer.fwd
    x = rng.normal(size=(1, 6, 3))
    out = layer(Tensor(x)).data
    out_rev = swapped(Tensor(x[:, ::-1].copy())).data
    np.testing.assert_allclose(out[:, :, 2:], out_rev[:, ::-1, :2], atol=1e-14)


def test_bilstm_padding_does_not_leak_into_valid_frames():
    rng = np.random.default_rng(3)
    layer = BiLSTM(3, 2, rng)
    x = rng.normal(size=(1, 4, 3))
    padded = np.concatenate([x, rng.normal(size=(1, 3, 3))], axis=1)
    short = layer(Tensor(x)).data
    long = layer(Tensor(padded), lengths=[4]).data
    np.testing.assert_allclose(long[:, :4], short, atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_bilstm_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = BiLSTM(3, 2, rng)
    x = rng.normal(size=(1, 4, 3))
    probe = _probe((1, 4, 4), seed)
    params = _params_as_inputs(layer)
    fn = lambda xin, *_: (layer(xin) * probe).sum()
    assert grad_check(fn, [x] + params) < 1e-5


def test_reverse_time_respects_lengths():
    x = np.arange(10.0).reshape(2, 5, 1)
    out = reverse_time(Tensor(x), [3, 5]).data[..., 0]
    np.testing.assert_array_equal(out, [[2, 1, 0, 3, 4], [9, 8, 7, 6, 5]])


# -- attention -----------------------------------------------------------------------

def test_attention_identical_tokens_uniform():
    attn = MultiHeadSelfAttention(16, 4, np.random.default_rng(0))
    x = np.tile(np.random.default_rng(1).normal(size=16), (1, 40, 1))
    _, w = attn(Tensor(x), collect=True)
    np.testing.assert_allclose(w, 1 / 40, atol=1e-15)


def test_attention_weight_shape_at_d16_h4():
    attn = MultiHeadSelfAttention(16, 4, np.random.default_rng(0))
    _, w = attn(Tensor(np.random.default_rng(1).normal(size=(1, 40, 16))), collect=True)
    assert w.shape == (1, 4, 40, 40)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all((w >= 0) & (w <= 1))


def test_attention_heads_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadSelfAttention(10, 4)


def test_attention_core_matches_softmax_formula():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(2, 3, 5, 4)) for _ in range(3))
    s = q @ np.swapaxes(k, -1, -2) / 2.0
    w = np.exp(s - s.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    out, weights = attention_core(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_allclose(weights, w, atol=1e-14)
    np.testing.assert_allclose(out.data, w @ v, atol=1e-13)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradient(seed):
    rng = np.random.default_rng(seed)
    attn = MultiHeadSelfAttention(4, 2, rng)
    x = rng.normal(size=(2, 3, 4))
    probe = _probe((2, 3, 4), seed)
    fn = lambda xin, *_: (attn(xin)[0] * probe).sum()
    assert grad_check(fn, [x] + _params_as_inputs(attn)) < 1e-5


def test_attention_key_bias_gradient_is_zero():
    rng = np.random.default_rng(0)
    attn = MultiHeadSelfAttention(4, 2, rng)
    attn.k.bias.data[...] = rng.normal(size=4)
    loss = (attn(Tensor(rng.normal(size=(2, 3, 4))))[0] * _probe((2, 3, 4), 0)).sum()
    T.backward(loss)
    assert np.abs(attn.k.bias.grad).max() < 1e-12


# -- encoder layer -------------------------------------------------------------------

def test_encoder_layer_shape_and_determinism():
    layer = TransformerEncoderLayer(16, 4, 64, 0.1, np.random.default_rng(0))
    layer.eval()
    x = Tensor(np.random.default_rng(1).normal(size=(3, 40, 16)))
    a, _ = layer(x)
    b, _ = layer(x)
    assert a.shape == (3, 40, 16)
    assert a.data.tobytes() == b.data.tobytes()


def test_encoder_layer_dim_mismatch():
    with pytest.raises(ValueError):
        TransformerEncoderLayer(16, 4, 64)(Tensor(np.zeros((1, 5, 8))))


def test_encoder_layer_dropout_active_in_training():
    layer = TransformerEncoderLayer(16, 4, 64, 0.5, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 6, 16)))
    a, _ = layer(x, rng=np.random.default_rng(0))
    layer.eval()
    b, _ = layer(x)
    assert not np.allclose(a.data, b.data)


@pytest.mark.parametrize("seed", SEEDS)
def test_encoder_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = TransformerEncoderLayer(4, 2, 8, 0.0, rng)
    x = rng.normal(size=(2, 3, 4))
    probe = _probe((2, 3, 4), seed)
    fn = lambda xin, *_: (layer(xin)[0] * probe).sum()
    assert grad_check(fn, [x] + _params_as_inputs(layer)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    probe = _probe((3, 6), seed)
    assert grad_check(lambda a, c, d: (layer_norm(a, c, d) * probe).sum(), [x, g, b]) < 1e-6


# -- linear --------------------------------------------------------------------------

def test_linear_identity():
    lin = Linear(4, 4)
    lin.weight.data[...] = np.eye(4)
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(lin(Tensor(x)).data, x)


def test_linear_dim_mismatch():
    with pytest.raises(ValueError):
        Linear(4, 2)(Tensor(np.zeros((1, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(5, 3, rng)
    lin.bias.data[...] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    probe = _probe((4, 3), seed)
    fn = lambda xin, *_: (lin(xin) * probe).sum()
    assert grad_check(fn, [x] + _params_as_inputs(lin)) < 1e-7


# -- dropout and masking -----------------------------------------------------------

def test_dropout_eval_is_passthrough():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    assert dropout(x, 0.3, False, None) is x


def test_dropout_p0_is_identity_in_training():
    x = Tensor(np.ones(5))
    np.testing.assert_array_equal(dropout(x, 0.0, True, np.random.default_rng(0)).data, x.data)


def test_dropout_rejects_bad_probability():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_preserves_mean():
    x = Tensor(np.full(100_000, 2.0))
    out = dropout(x, 0.1, True, np.random.default_rng(0)).data
    assert abs(out.mean() - 2.0) / 2.0 < 0.01
    assert set(np.unique(out)) <= {0.0, 2.0 / 0.9}


def test_mask_time_zeroes_padding():
    x = Tensor(np.ones((2, 1, 4, 3)))
    out = mask_time(x, [2, 4]).data
    assert out[0, :, 2:].sum() == 0 and out[0, :, :2].all() and out[1].all()


# -- parameter counts ----------------------------------------------------------------

def test_encoder_layer_param_count():
    assert encoder_layer_param_count(16, 64) == 3280
    assert TransformerEncoderLayer(16, 4, 64).num_params() == 3280


def test_linear_param_count():
    assert linear_param_count(16, 64) == 1088 == Linear(16, 64).num_params()


def test_conv_and_bilstm_counts_match_runtime():
    assert conv2d_param_count(3, 5, 3) == Conv2d(3, 5).num_params()
    assert bilstm_param_count(7, 4) == BiLSTM(7, 4).num_params()
