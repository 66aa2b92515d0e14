"""Desk-scale baseline vs proposed comparison on the synthetic three-language corpus."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (DecodeConfig, Manifest, ManifestRow, build_vocab, clips_to_utterances, default_languages,
                   evaluate, synth_corpus)
from .freq_transformer import FreqAttentionConfig
from .model import build_model, toy_config
from .train import TrainConfig, fit, pad_batch

DESK_STEPS = 600
DESK_LR = 1e-3
DESK_ENCODER_LAYERS = 2
N_TRAIN, N_TEST = 120, 30


def desk_model_config(variant: str, vocab_size: int):
    kw = {"freq_attention": FreqAttentionConfig(n_layers=DESK_ENCODER_LAYERS)} if variant == "proposed" else {}
    return toy_config(variant, vocab_size, **kw)


def desk_train_config(seed: int) -> TrainConfig:
    # One schedule for both variants so the comparison isolates the architecture.
    return TrainConfig(epochs=10_000, max_steps=DESK_STEPS, schedule="constant", learning_rate=DESK_LR, seed=seed)


def band_attention_mass(model, utts, band: tuple[int, int]) -> float:
    """Mean final-layer attention weight landing on bins ``[lo, hi)``, over heads, queries and valid frames."""
    lo, hi = band
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(utts), 8):
            chunk = sorted(utts[start:start + 8], key=lambda u: -u.num_frames)
            feats, lengths = pad_batch(chunk)
            _, plens, maps = model(T.Tensor(feats), lengths, collect=True)
            final = maps[-1]                                   # (B, T', H, F, F)
            for b, n in enumerate(plens):
                mass = final[b, :n, :, :, lo:hi].sum(axis=-1)  # (n, H, F)
                total += float(mass.sum())
                count += mass.size
    return total / count


@dataclass
class SeedResult:
    seed: int
    per_baseline: float
    per_proposed: float
    low_band_mass: float
    uniform_mass: float
    low_band_map: np.ndarray          # final-layer head-mean map averaged over low-band test frames
    seconds_baseline: float
    seconds_proposed: float


def _low_band_map(model, utts) -> np.ndarray:
    model.eval()
    acc, frames = None, 0
    with T.no_grad():
        for u in utts:
            _, plens, maps = model(T.Tensor(u.features[None]), [u.num_frames], collect=True)
            m = maps[-1, 0, :plens[0]].mean(axis=1).sum(axis=0)
            acc = m if acc is None else acc + m
            frames += int(plens[0])
    return acc / frames


def run_seed(seed: int, steps: int = DESK_STEPS, decode: DecodeConfig = DecodeConfig()) -> SeedResult:
    specs = default_languages()
    low = specs[0]
    train_items, test_items = synth_corpus(specs, N_TRAIN, N_TEST, seed=seed)
    vocab = build_vocab([Manifest([ManifestRow(uid, None, lang, ph) for uid, lang, ph, _ in train_items + test_items])])
    train = clips_to_utterances(train_items, vocab)
    test = clips_to_utterances(test_items, vocab)
    results, seconds, models = {}, {}, {}
    for variant in ("baseline", "proposed"):
        model = build_model(desk_model_config(variant, len(vocab)), seed)
        cfg = desk_train_config(seed)
        cfg.max_steps = steps
        t0 = time.perf_counter()
        fit(model, train, cfg)
        seconds[variant] = time.perf_counter() - t0
        results[variant] = evaluate(model, test, vocab, decode).overall.per
        models[variant] = model
    low_test = [u for u in test if u.language == low.name]
    mass = band_attention_mass(models["proposed"], low_test, low.band)
    width = low.band[1] - low.band[0]
    return SeedResult(seed, results["baseline"], results["proposed"], mass, width / 40,
                      _low_band_map(models["proposed"], low_test), seconds["baseline"], seconds["proposed"])
