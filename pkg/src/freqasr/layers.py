"""Network layers on top of :mod:`freqasr.tensor`.

Layout conventions: image-like activations are ``(batch, channels, time, freq)``;
sequences are ``(batch, time, features)``; the attention layers take
``(n_sequences, length, d_model)`` where the length axis is whatever the caller
wants to attend over.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_op


class Module:
    """Parameter container; attributes holding Tensors/Modules are discovered in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    return _uniform(rng, shape, math.sqrt(6.0 / (fan_in + fan_out)))


# -- primitive ops with hand-written gradients --------------------------------

def _correlate(xd: np.ndarray, w: np.ndarray, ph: int, pw: int):
    """Stride-1 cross-correlation of (B, C, H, W) with (O, C, kh, kw); returns output and im2col matrix."""
    B, C = xd.shape[:2]
    O, _, kh, kw = w.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ w.reshape(O, -1).T).reshape(B, Ho, Wo, O)
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: tuple[int, int]) -> Tensor:
    """Stride-1 2-D cross-correlation via im2col."""
    C = x.shape[1]
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    ph, pw = padding
    out, cols = _correlate(x.data, weight.data, ph, pw)
    out += bias.data

    def bw(g):
        g_last = g.transpose(0, 2, 3, 1)
        g2 = g_last.reshape(-1, O)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            # input gradient is a correlation of g with the flipped, channel-swapped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dxl, _ = _correlate(g, wflip, kh - 1 - ph, kw - 1 - pw)
            dx = dxl.transpose(0, 3, 1, 2)
        return dx, dw, db

    return make_op(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, weight, bias), bw, "conv2d")


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v over (..., L, d) operands; also returns the weights."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    w = s

    def bw(g):
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw -= (gw * w).sum(axis=-1, keepdims=True)
        gs = gw * w * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return make_op(np.matmul(w, v.data), (q, k, v), bw, "attention"), w


def max_pool_time(x: Tensor, pool: int = 2) -> Tensor:
    """Max over disjoint windows of ``pool`` frames on axis 2; a ragged tail is dropped."""
    B, C, Tn, F = x.shape
    if Tn < pool:
        raise ValueError(f"max_pool_time: {Tn} frames is fewer than pool size {pool}")
    To = Tn // pool
    blocks = x.data[:, :, :To * pool, :].reshape(B, C, To, pool, F)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(g):
        gb = np.zeros((B, C, To, pool, F))
        np.put_along_axis(gb, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = np.zeros(x.shape)
        dx[:, :, :To * pool, :] = gb.reshape(B, C, To * pool, F)
        return (dx,)

    return make_op(out, (x,), bw, "max_pool_time")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mask_time(x: Tensor, lengths) -> Tensor:
    """Zero every frame at or beyond each item's true length (time is axis 2 for 4-D, 1 for 3-D)."""
    if lengths is None:
        return x
    lengths = np.asarray(lengths)
    axis = 2 if x.ndim == 4 else 1
    n = x.shape[axis]
    if np.all(lengths >= n):
        return x
    keep = (np.arange(n)[None, :] < lengths[:, None]).astype(np.float64)
    shape = [x.shape[0]] + [1] * (x.ndim - 1)
    shape[axis] = n
    keep = keep.reshape(shape)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "mask_time")


def reverse_time(x: Tensor, lengths) -> Tensor:
    """Reverse each (batch, time, feat) sequence within its own length; padding stays in place."""
    B, n = x.shape[0], x.shape[1]
    lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
    t = np.arange(n)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(B)[:, None]
    # the index map is an involution, so the gradient uses the same gather
    return make_op(x.data[rows, idx], (x,), lambda g: (g[rows, idx],), "reverse_time")


# -- layers -------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None, padding="same", stride: int = 1):
        rng = rng or np.random.default_rng(0)
        if stride != 1:
            raise ValueError("only stride 1 is supported")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.padding = (kernel // 2, kernel // 2) if padding == "same" else (int(padding), int(padding))
        fan_in = in_ch * kernel * kernel
        self.weight = _uniform(rng, (out_ch, in_ch, kernel, kernel), math.sqrt(6.0 / fan_in))
        self.bias = T.parameter(np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _glorot(rng, in_dim, out_dim, (in_dim, out_dim))
        self.bias = T.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expects last dim {self.in_dim}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class LSTM(Module):
    """Single-direction LSTM; gate order input, forget, candidate, output."""

    def __init__(self, in_dim: int, hidden: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        bound = 1.0 / math.sqrt(hidden)
        self.W = _uniform(rng, (in_dim, 4 * hidden), bound)
        self.U = _uniform(rng, (hidden, 4 * hidden), bound)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = T.parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        if n == 0:
            raise ValueError("LSTM needs a non-empty sequence")
        H = self.hidden
        xw = x @ self.W + self.b
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        outs = []
        for t in range(n):
            z = xw[:, t, :] + h @ self.U
            ifo = T.sigmoid(z[:, :2 * H])
            i, f = ifo[:, :H], ifo[:, H:]
            g = T.tanh(z[:, 2 * H:3 * H])
            o = T.sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            h = o * T.tanh(c)
            outs.append(h)
        return T.stack(outs, axis=1)


class BiLSTM(Module):
    def __init__(self, in_dim: int, hidden: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden
        self.fwd = LSTM(in_dim, hidden, rng)
        self.bwd = LSTM(in_dim, hidden, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        if x.shape[1] == 0:
            raise ValueError("BiLSTM needs a non-empty sequence")
        forward = self.fwd(x)
        backward = reverse_time(self.bwd(reverse_time(x, lengths)), lengths)
        return T.concat([forward, backward], axis=-1)


class MultiHeadSelfAttention(Module):
    """Dense (unmasked) scaled dot-product self-attention over the length axis."""

    def __init__(self, d_model: int, n_heads: int, rng=None):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        rng = rng or np.random.default_rng(0)
        self.d_model, self.n_heads = d_model, n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, collect: bool = False):
        N, L, D = x.shape
        H = self.n_heads
        dk = D // H

        def heads(t):
            return t.reshape(N, L, H, dk).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        ctx, weights = attention_core(q, k, v)
        out = self.o(ctx.transpose(0, 2, 1, 3).reshape(N, L, D))
        return out, (weights.copy() if collect else None)


class TransformerEncoderLayer(Module):
    """Post-norm encoder block: LN(x + attn(x)), then LN(y + FFN(y))."""

    def __init__(self, d_model: int = 16, n_heads: int = 4, d_ff: int = 64, dropout: float = 0.1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.d_model, self.n_heads, self.d_ff, self.dropout_p = d_model, n_heads, d_ff, dropout
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, rng=None, collect: bool = False):
        if x.shape[-1] != self.d_model:
            raise ValueError(f"encoder layer expects token dim {self.d_model}, got {x.shape[-1]}")
        a, weights = self.attn(x, collect)
        y = self.norm1(x + dropout(a, self.dropout_p, self.training, rng))
        f = self.ff2(T.relu(self.ff1(y)))
        out = self.norm2(y + dropout(f, self.dropout_p, self.training, rng))
        return out, weights


# -- analytic parameter counts -----------------------------------------------

def conv2d_param_count(in_ch: int, out_ch: int, kernel: int = 3) -> int:
    return out_ch * in_ch * kernel * kernel + out_ch


def linear_param_count(in_dim: int, out_dim: int) -> int:
    return in_dim * out_dim + out_dim


def bilstm_param_count(in_dim: int, hidden: int) -> int:
    return 2 * 4 * hidden * (in_dim + hidden + 1)


def encoder_layer_param_count(d_model: int, d_ff: int) -> int:
    return (4 * linear_param_count(d_model, d_model)
            + linear_param_count(d_model, d_ff) + linear_param_count(d_ff, d_model)
            + 4 * d_model)
