"""CTC loss (log-space forward-backward), a brute-force oracle, and decoders.

Index 0 is the blank everywhere in this module.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_op

BLANK = 0
NEG_INF = -np.inf


class TargetTooLong(ValueError):
    """The label sequence cannot be aligned to the available frames."""


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _lse(a, b):
    return np.logaddexp(a, b)


def ctc_forward_backward(logp: np.ndarray, target: Sequence[int]):
    """Return ``(-log P(target | x), gamma)`` for one utterance.

    ``logp`` is the (T, V) log-softmax; ``gamma[t, k]`` is the posterior
    occupancy of symbol k at frame t, so the logit gradient is softmax - gamma.
    """
    n_frames, V = logp.shape
    target = list(target)
    if n_frames < min_frames(target):
        raise TargetTooLong(f"target of {len(target)} labels needs {min_frames(target)} frames, got {n_frames}")
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    # transitions from s-2 are allowed onto a label that differs from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    emit = logp[:, ext]                       # (T, S)
    alpha = np.full((n_frames, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lse(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_frames, S), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], _lse(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    if S > 1:
        log_p = _lse(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]
    occ = alpha + beta - emit - log_p          # log posterior of being in state s at t
    gamma = np.zeros((n_frames, V))
    with np.errstate(under="ignore"):
        np.add.at(gamma, (slice(None), ext), np.exp(occ))
    return -float(log_p), gamma


def ctc_loss(logits: Tensor, targets, input_lengths=None, reduction: str = "mean",
             return_per_utt: bool = False):
    """CTC negative log-likelihood with an analytic gradient.

    ``logits`` is (T, V) with a single target, or (B, T, V) with one target per
    item; frames at or beyond ``input_lengths[b]`` are ignored.  With
    ``return_per_utt`` the per-item losses come back alongside the scalar.
    """
    single = logits.ndim == 2
    x = logits.data[None] if single else logits.data
    if single:
        targets = [targets]
    B, n_frames, V = x.shape
    if len(targets) != B:
        raise ValueError(f"{B} logit sequences but {len(targets)} targets")
    lengths = np.full(B, n_frames) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    losses = np.zeros(B)
    grad = np.zeros_like(x)
    for b in range(B):
        n = int(lengths[b])
        lp = _log_softmax(x[b, :n])
        loss, gamma = ctc_forward_backward(lp, targets[b])
        losses[b] = loss
        grad[b, :n] = np.exp(lp) - gamma
    if reduction == "mean":
        value, weight = losses.mean(), 1.0 / B
    elif reduction == "sum":
        value, weight = losses.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single:
        grad = grad[0]

    def bw(g):
        return (grad * (float(g) * weight),)

    out = make_op(np.asarray(value), (logits,), bw, "ctc_loss")
    return (out, losses) if return_per_utt else out


def collapse(path: Sequence[int], blank: int = BLANK) -> tuple[int, ...]:
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return tuple(out)


def ctc_brute_force(logits: np.ndarray, target: Sequence[int], max_paths: int = 10 ** 6) -> float:
    """Exact CTC loss by enumerating all V**T alignments (test oracle)."""
    logits = np.asarray(logits, dtype=np.float64)
    n_frames, V = logits.shape
    if V ** n_frames > max_paths:
        raise ValueError(f"{V}**{n_frames} paths exceeds the enumeration limit {max_paths}")
    lp = _log_softmax(logits)
    target = tuple(target)
    total = NEG_INF
    for path in itertools.product(range(V), repeat=n_frames):
        if collapse(path) == target:
            total = np.logaddexp(total, sum(lp[t, s] for t, s in enumerate(path)))
    return -float(total) if np.isfinite(total) else math.inf


# -- decoding -------------------------------------------------------------------

def greedy_decode(logits: np.ndarray, exclude: Sequence[int] = ()) -> tuple[int, ...]:
    """Best-path decoding: per-frame argmax (lowest index on ties), collapse, drop blanks."""
    scores = np.array(logits, dtype=np.float64)
    if exclude:
        scores[:, list(exclude)] = NEG_INF
    return collapse(np.argmax(scores, axis=1))


@dataclass(order=False)
class Hypothesis:
    labels: tuple[int, ...]
    ctc_score: float
    lm_score: float = 0.0
    final_score: float = 0.0


@dataclass
class _Prefix:
    pb: float = NEG_INF       # summed log prob, paths ending in blank
    pnb: float = NEG_INF      # summed log prob, paths ending in a label
    vb: float = NEG_INF       # best single alignment ending in blank
    vnb: float = NEG_INF      # best single alignment ending in a label
    lm: float = 0.0           # prefix LM log prob (shallow fusion only)

    @property
    def total(self) -> float:
        return float(np.logaddexp(self.pb, self.pnb))

    @property
    def best(self) -> float:
        return max(self.vb, self.vnb)


@dataclass
class DecodeResult:
    best: tuple[int, ...]
    nbest: list[Hypothesis] = field(default_factory=list)


def beam_search_decode(logits: np.ndarray, beam_width: int = 20, lm=None, lm_weight: float = 1.0,
                       symbols: Sequence[str] | None = None, shallow_fusion: bool = False,
                       exclude: Sequence[int] = ()) -> DecodeResult:
    """CTC prefix beam search followed by N-best rescoring with an n-gram LM.

    Each prefix carries summed blank/label-ending probabilities (its CTC score)
    and the best single alignment behind it; pruning ranks by the latter, so a
    width of 1 follows the best path exactly.  Final score is
    ``ctc + lm_weight * lm`` where the LM term includes the end marker.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    lp = _log_softmax(np.asarray(logits, dtype=np.float64))
    n_frames, V = lp.shape
    labels = [c for c in range(1, V) if c not in set(exclude)]
    if symbols is None:
        symbols = [str(i) for i in range(V)]
    use_fusion = shallow_fusion and lm is not None
    lm_cache: dict[tuple[int, ...], float] = {}

    def prefix_lm(prefix):
        if prefix not in lm_cache:
            lm_cache[prefix] = lm.logprob([symbols[i] for i in prefix], eos=False)
        return lm_cache[prefix]

    def rank_key(item):
        prefix, st = item
        score = st.best + (lm_weight * st.lm if use_fusion else 0.0)
        return (-score, prefix)

    beam: dict[tuple[int, ...], _Prefix] = {(): _Prefix(pb=0.0, vb=0.0)}
    for t in range(n_frames):
        row = lp[t]
        nxt: dict[tuple[int, ...], _Prefix] = {}

        def slot(p):
            st = nxt.get(p)
            if st is None:
                st = nxt[p] = _Prefix()
            return st

        for prefix, st in beam.items():
            total, best = st.total, st.best
            here = slot(prefix)
            here.pb = np.logaddexp(here.pb, total + row[BLANK])
            here.vb = max(here.vb, best + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                # repeated label without a blank stays on the same prefix
                here.pnb = np.logaddexp(here.pnb, st.pnb + row[last])
                here.vnb = max(here.vnb, st.vnb + row[last])
            for c in labels:
                ext = prefix + (c,)
                nst = slot(ext)
                if c == last:
                    nst.pnb = np.logaddexp(nst.pnb, st.pb + row[c])
                    nst.vnb = max(nst.vnb, st.vb + row[c])
                else:
                    nst.pnb = np.logaddexp(nst.pnb, total + row[c])
                    nst.vnb = max(nst.vnb, best + row[c])
        if use_fusion:
            for p, st in nxt.items():
                st.lm = prefix_lm(p)
        # a repeat extension from a prefix with no blank-ending mass is impossible
        alive = [item for item in nxt.items() if item[1].best > NEG_INF]
        beam = dict(sorted(alive, key=rank_key)[:beam_width])

    hyps = []
    for prefix, st in beam.items():
        ctc = st.total
        lm_score = lm.logprob([symbols[i] for i in prefix]) if lm is not None else 0.0
        hyps.append(Hypothesis(prefix, ctc, lm_score, ctc + lm_weight * lm_score))
    hyps.sort(key=lambda h: (-h.final_score, h.labels))
    return DecodeResult(hyps[0].labels, hyps)
