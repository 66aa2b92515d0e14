"""From a synthetic utterance to CTC scores and decoded phonemes.

Run: python3 demos/01_features_and_ctc.py
"""

import numpy as np

from freqasr.ctc import beam_search_decode, ctc_brute_force, ctc_loss, greedy_decode
from freqasr.data import default_languages, synth_corpus
from freqasr.features import compute_features
from freqasr.lm import train_ngram_lm
from freqasr.tensor import Tensor

# Three toy languages, each confined to its own band of mel bins.
specs = default_languages()
for s in specs:
    print(f"{s.name:>5}: bins {s.band[0]}..{s.band[1] - 1}, phonemes {' '.join(s.phonemes[:4])} ...")

train, _ = synth_corpus(specs, n_train=6, n_test=0, seed=1)
uid, lang, phonemes, clip = train[0]
raw = compute_features(clip, uid, apply_cmvn=False).frames
print(f"\n{uid}: {clip.duration:.2f}s, {raw.shape[0]} frames x {raw.shape[1]} mel bins, "
      f"transcript {' '.join(phonemes)}")

# Energy sits inside the language's band.
band = next(s.band for s in specs if s.name == lang)
energy = np.exp(raw).sum(axis=0)
print(f"share of energy in bins {band[0]}..{band[1] - 1}: {energy[band[0]:band[1]].sum() / energy.sum():.3f}")

# CTC loss agrees with enumerating every alignment path.
rng = np.random.default_rng(0)
logits = rng.normal(size=(5, 4)) * 2
target = [1, 3]
fast = ctc_loss(Tensor(logits), target).item()
slow = ctc_brute_force(logits, target)
print(f"\nCTC -log P([1, 3]) forward-backward {fast:.12f}, path enumeration {slow:.12f}")

# Greedy best path, beam search, then beam search rescored by a phoneme 3-gram.
symbols = ["<blank>", "a", "b", "c"]
lm = train_ngram_lm([["a", "b"], ["a", "b", "c"], ["c", "a", "b"]], order=3)
print("greedy        :", [symbols[i] for i in greedy_decode(logits)])
print("beam 20       :", [symbols[i] for i in beam_search_decode(logits, 20).best])
with_lm = beam_search_decode(logits, 20, lm=lm, lm_weight=1.0, symbols=symbols)
for h in with_lm.nbest[:3]:
    print(f"beam 20 + LM  : {[symbols[i] for i in h.labels]}  ctc {h.ctc_score:.3f}  lm {h.lm_score:.3f}")
