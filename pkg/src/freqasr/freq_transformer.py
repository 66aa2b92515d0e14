"""Frequency-directional feature converter.

A ``(B, units, T', F)`` activation is split per batch item into ``(T', F, units)``
token grids; every time frame becomes its own length-``F`` sequence of
``units``-dim tokens, so self-attention runs across frequency bins and never
across time.  The encoder output is put back into the original layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, TransformerEncoderLayer, encoder_layer_param_count
from .tensor import Tensor


@dataclass
class FreqAttentionConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 16
    d_ff: int = 64
    dropout: float = 0.1
    collect_attention: bool = False
    positional_encoding: bool = False
    identity: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("need at least one encoder layer")

    def param_count(self) -> int:
        return self.n_layers * encoder_layer_param_count(self.d_model, self.d_ff)


def decompose(x: np.ndarray, units: int | None = None) -> list[np.ndarray]:
    """Split ``(B, units, T', F)`` into B arrays shaped ``(T', F, units)``."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a 4-axis (B, units, T', F) array, got shape {x.shape}")
    if units is not None and x.shape[1] != units:
        raise ValueError(f"channel axis is {x.shape[1]}, expected {units} units")
    return [np.transpose(item, (1, 2, 0)) for item in x]


def compose(items: list[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`decompose`."""
    return np.stack([np.transpose(item, (2, 0, 1)) for item in items], axis=0)


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class FrequencyTransformer(Module):
    """Shared encoder stack applied to each time frame's frequency sequence."""

    def __init__(self, config: FreqAttentionConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.layers = [TransformerEncoderLayer(config.d_model, config.n_heads, config.d_ff,
                                               config.dropout, rng)
                       for _ in range(config.n_layers)]

    def encode(self, tokens: Tensor, rng=None, collect: bool = False):
        """Run the stack on ``(N, F, d_model)`` sequences; returns output and per-layer weights."""
        if self.config.positional_encoding:
            tokens = tokens + sinusoidal_encoding(tokens.shape[1], tokens.shape[2])
        maps = []
        for layer in self.layers:
            tokens, w = layer(tokens, rng, collect)
            maps.append(w)
        return tokens, (np.stack(maps, axis=0) if collect else None)

    def __call__(self, x: Tensor, rng=None, collect: bool | None = None):
        """Apply to ``(B, units, T', F)``.

        Returns ``(y, maps)``; ``maps`` is ``(L, B, T', H, F, F)`` when attention
        is collected (eval mode only), otherwise None.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.d_model:
            raise ValueError(f"frequency transformer expects (B, {cfg.d_model}, T', F), got {x.shape}")
        if cfg.identity:
            return x, None
        collect = cfg.collect_attention if collect is None else collect
        collect = collect and not self.training
        B, U, n, F = x.shape
        # all B*T' frames go through the stack as one batch of independent sequences
        tokens = x.transpose(0, 2, 3, 1).reshape(B * n, F, U)
        out, maps = self.encode(tokens, rng, collect)
        y = out.reshape(B, n, F, U).transpose(0, 3, 1, 2)
        if maps is not None:
            L, _, H = maps.shape[:3]
            maps = maps.reshape(L, B, n, H, F, F)
        return y, maps

    def apply_per_item(self, x: Tensor, rng=None):
        """Literal item-by-item loop; kept as the reference for the batched path."""
        outs = []
        for b in range(x.shape[0]):
            seq = x[b].transpose(1, 2, 0)
            out, _ = self.encode(seq, rng)
            outs.append(out.transpose(2, 0, 1))
        return T.stack(outs, axis=0)


def collect_attention(features: Tensor, transformer: FrequencyTransformer) -> np.ndarray:
    """Time-averaged attention maps ``(L, H, F, F)`` for one utterance's activation.

    ``features`` is the ``(1, units, T', F)`` activation entering the converter.
    """
    if transformer.training:
        raise RuntimeError("attention maps are collected in eval mode only")
    if features.shape[2] == 0:
        raise ValueError("empty section: no frames to average")
    with T.no_grad():
        _, maps = transformer(features, collect=True)
    if maps is None:
        raise RuntimeError("transformer is configured as identity; no attention to collect")
    # maps: (L, 1, T', H, F, F) -> mean over frames
    return maps[:, 0].mean(axis=1)
