"""Baseline vs proposed on the synthetic three-language corpus for one seed.

Trains both models (about four minutes on one core), reports test PER and
how much final-layer attention the low-band language puts on its own band,
and writes that attention map as a PGM.

Run: python3 demos/03_desk_comparison.py [seed]
"""

import sys

from freqasr.data import export_heatmap
from freqasr.experiment import DESK_ENCODER_LAYERS, DESK_LR, DESK_STEPS, run_seed

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
print(f"seed {seed}: {DESK_STEPS} steps at constant lr {DESK_LR}, proposed encoder depth {DESK_ENCODER_LAYERS}")
r = run_seed(seed)
print(f"baseline  PER {r.per_baseline:6.2f}%  ({r.seconds_baseline:.0f}s)")
print(f"proposed  PER {r.per_proposed:6.2f}%  ({r.seconds_proposed:.0f}s)")
print(f"low-band attention mass {r.low_band_mass:.4f} vs uniform {r.uniform_mass:.4f}")
out = f"low_band_attention_seed{seed}.pgm"
export_heatmap(r.low_band_map, out)
print(f"wrote {out}")
