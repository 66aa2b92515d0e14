"""Manifests, phoneme vocabulary, synthetic multilingual audio, PER scoring and heatmap export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .ctc import beam_search_decode, greedy_decode
from .features import AudioClip, build_filterbank, compute_features, load_features, read_wav, write_wav
from .train import Utterance, pad_batch

BLANK_SYM, UNK_SYM = "<blank>", "<unk>"
BLANK_ID, UNK_ID = 0, 1


# -- manifests ------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    uid: str
    path: Path
    language: str
    phonemes: tuple[str, ...]


@dataclass
class Manifest:
    rows: list[ManifestRow]
    source: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def save(self, path) -> None:
        path = Path(path)
        lines = []
        for r in self.rows:
            p = r.path
            try:
                p = p.relative_to(path.parent.resolve()) if p.is_absolute() else p
            except ValueError:
                pass
            lines.append(f"{r.uid}\t{p}\t{r.language}\t{' '.join(r.phonemes)}")
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse ``uid<TAB>path<TAB>language<TAB>phonemes``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.resolve().parent
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        uid, file_, lang, trans = parts
        if uid in seen:
            raise ValueError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        phonemes = tuple(p for p in trans.split(" ") if p)
        if not phonemes:
            raise ValueError(f"{path}:{lineno}: empty transcript for {uid!r}")
        fp = Path(file_)
        fp = fp if fp.is_absolute() else base / fp
        if check_files and not fp.exists():
            raise FileNotFoundError(f"{path}:{lineno}: referenced file {fp} does not exist")
        seen.add(uid)
        rows.append(ManifestRow(uid, fp, lang, phonemes))
    return Manifest(rows, path)


# -- vocabulary ----------------------------------------------------------------------

def tag(language: str, phoneme: str) -> str:
    prefix = f"{language}:"
    return phoneme if phoneme.startswith(prefix) else prefix + phoneme


class PhonemeVocab:
    """``<blank>`` = 0, ``<unk>`` = 1, then language-tagged phonemes in sorted order."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if symbols[:2] != [BLANK_SYM, UNK_SYM]:
            raise ValueError("vocabulary must start with <blank>, <unk>")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, PhonemeVocab) and self.symbols == other.symbols

    def encode(self, phonemes: Iterable[str], language: str) -> tuple[int, ...]:
        return tuple(self.index.get(tag(language, p), UNK_ID) for p in phonemes)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


def build_vocab(manifests: Iterable[Manifest]) -> PhonemeVocab:
    manifests = list(manifests)
    if not manifests:
        raise ValueError("need at least one manifest")
    symbols = {tag(r.language, p) for m in manifests for r in m for p in r.phonemes}
    if not symbols:
        raise ValueError("manifests contain no phoneme symbols")
    return PhonemeVocab([BLANK_SYM, UNK_SYM] + sorted(symbols))


# -- synthetic corpus ----------------------------------------------------------------

@dataclass
class SynthLanguageSpec:
    """A toy language: phonemes are tone pairs confined to a band of mel bins."""

    name: str
    n_phonemes: int = 10
    band: tuple[int, int] = (2, 12)           # [low, high) mel bins
    tone_offsets: list[tuple[int, int]] | None = None
    duration_frames: tuple[int, int] = (6, 10)
    length_phonemes: tuple[int, int] = (3, 6)
    noise_floor: float = 1e-3

    def __post_init__(self):
        lo, hi = self.band
        if not (0 <= lo < hi <= 40):
            raise ValueError(f"{self.name}: band {self.band} must lie within [0, 40)")
        width = hi - lo
        if self.tone_offsets is None:
            step = max(1, width // 2 - 1)
            self.tone_offsets = [(k % width, (k + step) % width) for k in range(self.n_phonemes)]
        if len(self.tone_offsets) != self.n_phonemes:
            raise ValueError(f"{self.name}: need one tone pair per phoneme")
        if any(not (0 <= a < width and 0 <= b < width) for a, b in self.tone_offsets):
            raise ValueError(f"{self.name}: tone offsets must stay inside the band")
        if len({frozenset(p) for p in self.tone_offsets}) != self.n_phonemes:
            raise ValueError(f"{self.name}: tone pairs must be distinct")

    @property
    def phonemes(self) -> list[str]:
        return [f"p{k}" for k in range(self.n_phonemes)]


def default_languages(n: int = 3, n_phonemes: int = 10) -> list[SynthLanguageSpec]:
    """``n`` languages on disjoint, evenly spaced bands; the first is the low-band one."""
    names = ["low", "mid", "high", "top", "edge", "far"]
    width = 40 // n
    return [SynthLanguageSpec(names[i] if i < len(names) else f"lang{i}", n_phonemes,
                              (i * width + 1, (i + 1) * width - 1))
            for i in range(n)]


def _bands_overlap(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / min(a[1] - a[0], b[1] - b[0])


def render_utterance(spec: SynthLanguageSpec, phonemes: Sequence[str], rng: np.random.Generator,
                     sample_rate: int = 16000, hop: int = 160, amplitude: float = 0.3,
                     centers_hz: np.ndarray | None = None) -> AudioClip:
    if centers_hz is None:
        centers_hz = build_filterbank(40, 512, sample_rate).mel_centers
    lo = spec.band[0]
    pieces = [np.zeros(2 * hop)]
    fade = int(0.005 * sample_rate)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    for ph in phonemes:
        k = spec.phonemes.index(ph)
        n = int(rng.integers(spec.duration_frames[0], spec.duration_frames[1] + 1)) * hop
        t = np.arange(n) / sample_rate
        seg = np.zeros(n)
        for off in spec.tone_offsets[k]:
            f = centers_hz[lo + off]
            seg += amplitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
        pieces.append(seg)
    pieces.append(np.zeros(2 * hop + 240))
    wave_ = np.concatenate(pieces)
    wave_ = wave_ + rng.normal(0.0, spec.noise_floor, wave_.size)
    return AudioClip(np.clip(wave_, -1.0, 32767 / 32768), sample_rate)


def synth_corpus(specs: Sequence[SynthLanguageSpec], n_train: int, n_test: int, seed: int = 0,
                 out_dir=None, sample_rate: int = 16000):
    """Generate a random multilingual corpus.

    With ``out_dir`` the audio is written as WAV files plus ``train.tsv`` and
    ``test.tsv`` manifests; the two manifests are returned.  Without it, the
    clips are returned in memory as ``(train, test)`` lists of
    ``(uid, language, phonemes, AudioClip)``.
    """
    if len(specs) < 2:
        raise ValueError("need at least two languages")
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if _bands_overlap(a.band, b.band) >= 0.5:
                raise ValueError(f"bands of {a.name} and {b.name} overlap by 50% or more")
    rng = np.random.default_rng(seed)
    centers = build_filterbank(40, 512, sample_rate).mel_centers
    splits = {"train": [], "test": []}
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            spec = specs[int(rng.integers(len(specs)))]
            n_ph = int(rng.integers(spec.length_phonemes[0], spec.length_phonemes[1] + 1))
            phonemes = tuple(spec.phonemes[int(j)] for j in rng.integers(spec.n_phonemes, size=n_ph))
            clip = render_utterance(spec, phonemes, rng, sample_rate, centers_hz=centers)
            splits[split].append((f"{split}{i:04d}_{spec.name}", spec.name, phonemes, clip))
    if out_dir is None:
        return splits["train"], splits["test"]
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    manifests = []
    for split in ("train", "test"):
        rows = []
        for uid, lang, phonemes, clip in splits[split]:
            wav = out / "wav" / f"{uid}.wav"
            write_wav(wav, clip)
            rows.append(ManifestRow(uid, Path("wav") / f"{uid}.wav", lang, phonemes))
        m = Manifest(rows, out / f"{split}.tsv")
        m.save(out / f"{split}.tsv")
        manifests.append(load_manifest(out / f"{split}.tsv"))
    return manifests[0], manifests[1]


# -- loading utterances ----------------------------------------------------------------

def load_row_features(row: ManifestRow, apply_cmvn: bool = True) -> np.ndarray:
    if row.path.suffix == ".fbk":
        return load_features(row.path).frames
    return compute_features(read_wav(row.path), row.uid, apply_cmvn).frames


def load_utterances(manifest: Manifest, vocab: PhonemeVocab, apply_cmvn: bool = True,
                    jobs: int = 1) -> list[Utterance]:
    rows = list(manifest)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            feats = list(pool.map(lambda r: load_row_features(r, apply_cmvn), rows))
    else:
        feats = [load_row_features(r, apply_cmvn) for r in rows]
    return [Utterance(r.uid, f, vocab.encode(r.phonemes, r.language), r.language) for r, f in zip(rows, feats)]


def clips_to_utterances(items, vocab: PhonemeVocab, apply_cmvn: bool = True) -> list[Utterance]:
    """In-memory counterpart of :func:`load_utterances` for :func:`synth_corpus` output."""
    return [Utterance(uid, compute_features(clip, uid, apply_cmvn).frames, vocab.encode(ph, lang), lang)
            for uid, lang, ph, clip in items]


# -- scoring -----------------------------------------------------------------------------

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def per(reference: Sequence, hypothesis: Sequence) -> float:
    """Phoneme error rate in percent; can exceed 100 when the hypothesis inserts."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return 100.0 * edit_distance(reference, hypothesis) / len(reference)


@dataclass
class PerRow:
    language: str
    n_utts: int = 0
    n_ref: int = 0
    edits: int = 0

    @property
    def per(self) -> float:
        return 100.0 * self.edits / self.n_ref if self.n_ref else 0.0


@dataclass
class PerReport:
    rows: list[PerRow]

    @property
    def overall(self) -> PerRow:
        return self.rows[-1]

    def by_language(self) -> dict[str, float]:
        return {r.language: r.per for r in self.rows}

    def to_tsv(self) -> str:
        lines = ["language\tn_utts\tn_ref_phonemes\tedits\tper_percent"]
        lines += [f"{r.language}\t{r.n_utts}\t{r.n_ref}\t{r.edits}\t{r.per:.2f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([{"language": r.language, "n_utts": r.n_utts, "n_ref_phonemes": r.n_ref,
                            "edits": r.edits, "per_percent": round(r.per, 4)} for r in self.rows], indent=2)


def score_corpus(pairs: Iterable[tuple[str, Sequence, Sequence]]) -> PerReport:
    """Pool edits per language and overall from ``(language, ref, hyp)`` triples."""
    rows: dict[str, PerRow] = {}
    total = PerRow("All")
    for lang, ref, hyp in pairs:
        if len(ref) == 0:
            raise ValueError("reference must be non-empty")
        e = edit_distance(ref, hyp)
        for row in (rows.setdefault(lang, PerRow(lang)), total):
            row.n_utts += 1
            row.n_ref += len(ref)
            row.edits += e
    return PerReport([rows[k] for k in sorted(rows)] + [total])


# -- decoding + evaluation -----------------------------------------------------------------

@dataclass
class DecodeConfig:
    beam: int = 20
    lm: object = None
    lm_weight: float = 1.0
    shallow_fusion: bool = False
    batch_size: int = 8


@dataclass
class DecodedUtterance:
    uid: str
    language: str
    reference: tuple[int, ...]
    hypothesis: tuple[int, ...]
    nbest: list = field(default_factory=list)


def model_logits(model, utts: Sequence[Utterance], batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode logits per utterance, trimmed to each pooled length."""
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(utts), batch_size):
            chunk = utts[start:start + batch_size]
            feats, lengths = pad_batch(chunk)
            logits, plens, _ = model(T.Tensor(feats), lengths)
            out += [logits.data[i, :plens[i]] for i in range(len(chunk))]
    return out


def decode_utterances(model, utts: Sequence[Utterance], vocab: PhonemeVocab,
                      cfg: DecodeConfig = DecodeConfig()) -> list[DecodedUtterance]:
    res = []
    for utt, lg in zip(utts, model_logits(model, utts, cfg.batch_size)):
        if cfg.beam <= 0:
            best, nbest = greedy_decode(lg, exclude=(UNK_ID,)), []
        else:
            r = beam_search_decode(lg, cfg.beam, cfg.lm, cfg.lm_weight, vocab.symbols,
                                   cfg.shallow_fusion, exclude=(UNK_ID,))
            best, nbest = r.best, r.nbest
        res.append(DecodedUtterance(utt.uid, utt.language, utt.labels, best, nbest))
    return res


def evaluate(model, utts: Sequence[Utterance], vocab: PhonemeVocab,
             cfg: DecodeConfig = DecodeConfig()) -> PerReport:
    if model.config.vocab_size != len(vocab):
        raise ValueError(f"model emits {model.config.vocab_size} symbols, vocabulary has {len(vocab)}")
    decoded = decode_utterances(model, utts, vocab, cfg)
    return score_corpus((d.language, d.reference, d.hypothesis) for d in decoded)


def nbest_lines(decoded: Iterable[DecodedUtterance], vocab: PhonemeVocab) -> list[str]:
    lines = []
    for d in decoded:
        for rank, h in enumerate(d.nbest, 1):
            lines.append(f"{d.uid}\t{rank}\t{h.final_score:.6f}\t{h.ctc_score:.6f}\t{h.lm_score:.6f}\t"
                         f"{' '.join(vocab.decode(h.labels))}")
    return lines


# -- heatmaps ------------------------------------------------------------------------------

def export_heatmap(matrix: np.ndarray, path, fmt: str = "pgm") -> None:
    """Write a matrix as CSV or binary PGM (P5).

    PGM scaling is linear with min -> 0 and max -> 255; a constant matrix is
    written as mid-grey.  Row 0 (query 0 / lowest bin) is the top image row.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("heatmap needs a finite 2-D matrix")
    path = Path(path)
    if fmt == "csv":
        path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n")
        return
    if fmt != "pgm":
        raise ValueError(f"unknown heatmap format {fmt!r}")
    lo, hi = m.min(), m.max()
    if hi > lo:
        pix = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(m.shape, 128, dtype=np.uint8)
    header = (f"P5\n# origin top-left: row 0 = query 0 / lowest bin; linear min {lo!r} -> 0, max {hi!r} -> 255\n"
              f"{m.shape[1]} {m.shape[0]}\n255\n")
    path.write_bytes(header.encode("ascii") + pix.tobytes())


def load_heatmap(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == b"P5":
        tokens, pos = [], 2
        while len(tokens) < 3:
            while blob[pos:pos + 1].isspace():
                pos += 1
            if blob[pos:pos + 1] == b"#":
                pos = blob.index(b"\n", pos) + 1
                continue
            end = pos
            while not blob[end:end + 1].isspace():
                end += 1
            tokens.append(int(blob[pos:end]))
            pos = end
        w, h, _ = tokens
        pos += 1
        return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
    return np.array([[float(v) for v in line.split(",")] for line in blob.decode().splitlines() if line])
