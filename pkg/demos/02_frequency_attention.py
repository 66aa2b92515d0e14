"""How the frequency-directional Transformer sees a spectrogram.

Every pooled frame becomes its own sequence of 40 frequency bins, and the
encoder attends across bins only.  Run: python3 demos/02_frequency_attention.py
"""

import numpy as np

from freqasr import tensor as T
from freqasr.freq_transformer import FreqAttentionConfig, compose, decompose
from freqasr.model import build_model, count_params, full_scale_config, toy_config

# The adapter: (B, C, T', F) -> B*T' sequences of F tokens with C features, and back.
x = np.random.default_rng(0).normal(size=(2, 16, 3, 40))
items = decompose(x)
print(f"{x.shape} -> {len(items)} items of shape {items[0].shape} (frames, bins, channels); round trip exact: "
      f"{compose(items).tobytes() == x.tobytes()}")

print(f"encoder stack (4 layers, 4 heads, d=16, ff=64): {FreqAttentionConfig().param_count()} parameters")
for variant in ("baseline", "proposed"):
    print(f"full-scale {variant:>8}: {count_params(build_model(full_scale_config(variant), 0)):>10,} parameters")

# Attention maps of an untrained toy model: rows are query bins, columns key bins.
model = build_model(toy_config("proposed", 32), seed=0)
model.eval()
feats = T.Tensor(np.random.default_rng(1).normal(size=(1, 20, 40)))
with T.no_grad():
    _, plens, maps = model(feats, [20], collect=True)
print(f"\nattention maps: {maps.shape} = (layers, batch, pooled frames, heads, query bin, key bin)")
final = maps[-1, 0, :plens[0]].mean(axis=(0, 1))
print(f"final-layer rows sum to 1: {np.allclose(final.sum(axis=1), 1.0)}; "
      f"mass on bins 1..11 {final[:, 1:12].sum(axis=1).mean():.3f} (uniform {11 / 40:.3f})")
