"""Baseline and frequency-attention CTC acoustic models.

Both share the same skeleton::

    conv, conv -> time pool /2 -> [frequency transformer] -> conv, conv
      -> flatten(channels x F per frame) -> BiLSTM -> dropout -> FC(vocab)

Padded frames are zeroed after every stage, so an utterance scores the same
alone or inside a padded batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .freq_transformer import FreqAttentionConfig, FrequencyTransformer
from .layers import (BiLSTM, Conv2d, Linear, Module, bilstm_param_count, conv2d_param_count,
                     dropout, linear_param_count, mask_time, max_pool_time)
from .tensor import Tensor

VARIANTS = ("baseline", "proposed")


@dataclass
class ModelConfig:
    variant: str = "proposed"
    conv_channels: list = field(default_factory=lambda: [8, 16, 16, 16])
    bilstm_hidden: int = 32
    vocab_size: int = 32
    n_mels: int = 40
    kernel: int = 3
    dropout: float = 0.1
    freq_attention: FreqAttentionConfig | None = None

    def __post_init__(self):
        self.conv_channels = [int(c) for c in self.conv_channels]
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.conv_channels) != 4:
            raise ValueError("conv_channels needs exactly four entries")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3 (blank, unk, one phoneme)")
        if self.variant == "proposed":
            if self.freq_attention is None:
                self.freq_attention = FreqAttentionConfig(dropout=self.dropout)
            if self.conv_channels[1] != self.freq_attention.d_model:
                raise ValueError(f"second conv layer has {self.conv_channels[1]} channels but the "
                                 f"frequency transformer expects d_model={self.freq_attention.d_model}")
        elif self.freq_attention is not None:
            raise ValueError("baseline variant takes no frequency-attention config")


def toy_config(variant: str = "proposed", vocab_size: int = 32, **overrides) -> ModelConfig:
    """Small CI-sized preset."""
    base = dict(variant=variant, conv_channels=[8, 16, 16, 16], bilstm_hidden=32, vocab_size=vocab_size)
    base.update(overrides)
    return ModelConfig(**base)


# BiLSTM widths picked so the two models land near 13M and 4M parameters.
FULL_BASELINE_HIDDEN = 768
FULL_PROPOSED_HIDDEN = 304


def full_scale_config(variant: str = "proposed", vocab_size: int = 240) -> ModelConfig:
    hidden = FULL_BASELINE_HIDDEN if variant == "baseline" else FULL_PROPOSED_HIDDEN
    return ModelConfig(variant=variant, conv_channels=[32, 16, 32, 32], bilstm_hidden=hidden,
                       vocab_size=vocab_size)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    c = cfg.conv_channels
    n = conv2d_param_count(1, c[0], cfg.kernel) + conv2d_param_count(c[0], c[1], cfg.kernel)
    n += conv2d_param_count(c[1], c[2], cfg.kernel) + conv2d_param_count(c[2], c[3], cfg.kernel)
    n += bilstm_param_count(c[3] * cfg.n_mels, cfg.bilstm_hidden)
    n += linear_param_count(2 * cfg.bilstm_hidden, cfg.vocab_size)
    if cfg.variant == "proposed":
        n += cfg.freq_attention.param_count()
    return n


class AcousticModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.conv_channels
        k = config.kernel
        self.conv1 = Conv2d(1, c[0], k, rng)
        self.conv2 = Conv2d(c[0], c[1], k, rng)
        self.freq = FrequencyTransformer(config.freq_attention, rng) if config.variant == "proposed" else None
        self.conv3 = Conv2d(c[1], c[2], k, rng)
        self.conv4 = Conv2d(c[2], c[3], k, rng)
        self.bilstm = BiLSTM(c[3] * config.n_mels, config.bilstm_hidden, rng)
        self.fc = Linear(2 * config.bilstm_hidden, config.vocab_size, rng)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def front_end(self, feats: Tensor, lengths, rng=None, collect: bool = False):
        """Layers up to and including the frequency converter.

        Returns the (B, units, T', F) activation, pooled lengths, and any
        attention maps.
        """
        x, plens = self.pre_converter(feats, lengths)
        maps = None
        if self.freq is not None:
            x, maps = self.freq(x, rng, collect)
            x = mask_time(x, plens)
        return x, plens, maps

    def pre_converter(self, feats: Tensor, lengths=None) -> tuple[Tensor, np.ndarray | None]:
        """Activation entering the frequency converter (after conv2 and pooling)."""
        x = feats.reshape(feats.shape[0], 1, feats.shape[1], feats.shape[2])
        x = mask_time(T.relu(self.conv1(x)), lengths)
        x = mask_time(T.relu(self.conv2(x)), lengths)
        plens = None if lengths is None else np.asarray(lengths) // 2
        return mask_time(max_pool_time(x, 2), plens), plens

    def __call__(self, feats: Tensor, lengths=None, rng=None, collect: bool = False):
        """Map padded features (B, T, F) to logits (B, floor(T/2), vocab).

        Returns ``(logits, pooled_lengths, attention_maps)``.
        """
        if feats.ndim != 3 or feats.shape[2] != self.config.n_mels:
            raise ValueError(f"expected (B, T, {self.config.n_mels}) features, got {feats.shape}")
        x, plens, maps = self.front_end(feats, lengths, rng, collect)
        x = mask_time(T.relu(self.conv3(x)), plens)
        x = mask_time(T.relu(self.conv4(x)), plens)
        B, C, n, F = x.shape
        seq = x.transpose(0, 2, 1, 3).reshape(B, n, C * F)
        h = self.bilstm(seq, plens)
        h = dropout(h, self.config.dropout, self.training, rng)
        return self.fc(h), plens, maps


def build_baseline(config: ModelConfig, seed: int = 0) -> AcousticModel:
    if config.variant != "baseline":
        raise ValueError("build_baseline needs variant='baseline'")
    return AcousticModel(config, seed)


def build_proposed(config: ModelConfig, seed: int = 0) -> AcousticModel:
    if config.variant != "proposed":
        raise ValueError("build_proposed needs variant='proposed'")
    return AcousticModel(config, seed)


def build_model(config: ModelConfig, seed: int = 0) -> AcousticModel:
    return AcousticModel(config, seed)


def count_params(model: Module) -> int:
    return model.num_params()


def baseline_twin(config: ModelConfig) -> ModelConfig:
    """Baseline config with the same convolution/LSTM/FC shapes as a proposed one."""
    return replace(config, variant="baseline", freq_attention=None)
