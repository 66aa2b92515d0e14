"""Phoneme n-gram language model with Witten-Bell smoothing and ARPA text I/O.

The model is trained as an interpolated Witten-Bell estimate and stored in
back-off form (explicit probabilities for seen n-grams, a back-off weight per
seen context), which is exactly what the ARPA layout holds.  For interpolated
Witten-Bell the back-off weight of a context ``h`` is ``N1+(h .) / (c(h) + N1+(h .))``.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
_LN10 = math.log(10.0)


class PhonemeLM:
    def __init__(self, order: int, vocab: Sequence[str], logprobs: dict, backoffs: dict):
        self.order = order
        self.vocab = list(vocab)              # predictable symbols, includes </s> and <unk>
        self._vocab_set = set(self.vocab)
        self.logprobs = logprobs              # ngram tuple -> natural-log probability
        self.backoffs = backoffs              # context tuple -> natural-log back-off weight

    def _map(self, sym: str) -> str:
        return sym if sym in self._vocab_set else UNK

    def logp(self, word: str, context: Sequence[str] = ()) -> float:
        """Natural-log P(word | context) by standard back-off lookup."""
        word = self._map(word) if word != EOS else EOS
        ctx = tuple(c if c == BOS else self._map(c) for c in context)[-(self.order - 1):] if self.order > 1 else ()
        penalty = 0.0
        while True:
            key = ctx + (word,)
            if key in self.logprobs:
                return penalty + self.logprobs[key]
            if not ctx:
                raise KeyError(f"symbol {word!r} missing from the unigram table")
            penalty += self.backoffs.get(ctx, 0.0)
            ctx = ctx[1:]

    def prob(self, word: str, context: Sequence[str] = ()) -> float:
        return math.exp(self.logp(word, context))

    def logprob(self, sequence: Sequence[str], eos: bool = True) -> float:
        """Sum of ln P(s_i | two previous symbols), starting after <s>; adds </s> when ``eos``."""
        toks = [BOS] + [self._map(s) for s in sequence] + ([EOS] if eos else [])
        total = 0.0
        for i in range(1, len(toks)):
            total += self.logp(toks[i], toks[max(0, i - self.order + 1):i])
        return total

    # -- ARPA ------------------------------------------------------------------
    def to_arpa(self) -> str:
        by_order: dict[int, list[tuple]] = defaultdict(list)
        for ngram in self.logprobs:
            by_order[len(ngram)].append(ngram)
        if (BOS,) not in self.logprobs:
            by_order[1].append((BOS,))
        lines = ["\\data\\"]
        for n in range(1, self.order + 1):
            lines.append(f"ngram {n}={len(by_order[n])}")
        for n in range(1, self.order + 1):
            lines.append("")
            lines.append(f"\\{n}-grams:")
            for ngram in sorted(by_order[n]):
                lp = self.logprobs.get(ngram)
                lp10 = -99.0 if lp is None else lp / _LN10
                fields = [repr(lp10), " ".join(ngram)]
                if n < self.order:
                    fields.append(repr(self.backoffs.get(ngram, 0.0) / _LN10))
                lines.append("\t".join(fields))
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_arpa(), encoding="utf-8")

    @classmethod
    def from_arpa(cls, text: str) -> "PhonemeLM":
        logprobs: dict = {}
        backoffs: dict = {}
        order = 0
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line == "\\data\\":
                section = "data"
                continue
            if line == "\\end\\":
                break
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                continue
            if section == "data":
                if line.startswith("ngram "):
                    order = max(order, int(line[6:].split("=")[0]))
                continue
            if not isinstance(section, int):
                raise ValueError(f"unexpected line outside an n-gram section: {raw!r}")
            fields = line.split("\t")
            if len(fields) < 2:
                raise ValueError(f"malformed ARPA line: {raw!r}")
            ngram = tuple(fields[1].split())
            if len(ngram) != section:
                raise ValueError(f"{section}-gram section holds {len(ngram)} symbols: {raw!r}")
            lp10 = float(fields[0])
            if lp10 > -99.0:
                logprobs[ngram] = lp10 * _LN10
            if len(fields) > 2:
                backoffs[ngram] = float(fields[2]) * _LN10
        if order == 0:
            raise ValueError("ARPA text has no \\data\\ header")
        vocab = sorted(ng[0] for ng in logprobs if len(ng) == 1)
        return cls(order, vocab, logprobs, backoffs)

    @classmethod
    def load(cls, path) -> "PhonemeLM":
        return cls.from_arpa(Path(path).read_text(encoding="utf-8"))


def train_ngram_lm(transcripts: Iterable[Sequence[str]], order: int = 3,
                   extra_vocab: Iterable[str] = ()) -> PhonemeLM:
    """Interpolated Witten-Bell n-gram over phoneme symbols.

    The lowest order interpolates with a uniform distribution over the
    vocabulary (training symbols, ``extra_vocab``, ``</s>`` and ``<unk>``), so
    no symbol ever gets probability zero.
    """
    sentences = [list(s) for s in transcripts]
    if not sentences:
        raise ValueError("cannot train a language model on an empty corpus")
    if order < 1:
        raise ValueError("order must be at least 1")
    follow: dict[tuple, Counter] = defaultdict(Counter)
    for sent in sentences:
        toks = [BOS] + sent + [EOS]
        for i in range(1, len(toks)):
            for k in range(0, order):
                if i - k < 0:
                    break
                follow[tuple(toks[i - k:i])][toks[i]] += 1
    vocab = sorted(set(follow[()]) | set(extra_vocab) | {EOS, UNK})
    vocab = [v for v in vocab if v != BOS]

    cache: dict[tuple, float] = {}

    def wb(word: str, ctx: tuple) -> float:
        key = ctx + (word,)
        if key in cache:
            return cache[key]
        if not ctx:
            counts = follow[()]
            n, types = sum(counts.values()), len(counts)
            p = (counts[word] + types / len(vocab)) / (n + types)
        else:
            counts = follow.get(ctx)
            if not counts:
                p = wb(word, ctx[1:])
            else:
                n, types = sum(counts.values()), len(counts)
                p = (counts[word] + types * wb(word, ctx[1:])) / (n + types)
        cache[key] = p
        return p

    logprobs: dict[tuple, float] = {(w,): math.log(wb(w, ())) for w in vocab}
    backoffs: dict[tuple, float] = {}
    for ctx, counts in follow.items():
        if not ctx:
            continue
        for w in counts:
            logprobs[ctx + (w,)] = math.log(wb(w, ctx))
        n, types = sum(counts.values()), len(counts)
        backoffs[ctx] = math.log(types / (n + types))
    return PhonemeLM(order, vocab, logprobs, backoffs)


def lm_logprob(lm: PhonemeLM, sequence: Sequence[str], eos: bool = True) -> float:
    return lm.logprob(sequence, eos)
