"""``freqasr`` command line: features, synthetic data, LM, training, decoding, evaluation, attention maps.

Exit codes: 0 success, 1 failure, 2 usage error or missing input file.
Every failure ends with a single ``freqasr: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import tensor as T
from .data import (DecodeConfig, Manifest, ManifestRow, PhonemeVocab, build_vocab, decode_utterances,
                   default_languages, export_heatmap, load_manifest, load_utterances, nbest_lines,
                   score_corpus, synth_corpus, tag)
from .features import compute_features, load_features, read_wav, save_features
from .lm import PhonemeLM, train_ngram_lm
from .model import build_model
from .train import (CheckpointError, TrainingDiverged, fit, load_checkpoint, model_config_from,
                    parse_bool, parse_config_text, save_checkpoint, train_config_from)

DEFAULT_BEAM = 20
DEFAULT_LM_WEIGHT = 1.0


class UsageError(Exception):
    """Bad invocation that argparse cannot catch by itself (exit code 2)."""


# -- helpers ------------------------------------------------------------------------------

def _read_config(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8")), path.resolve().parent


def _config_path(data: dict, key: str, base: Path) -> Path | None:
    if key not in data:
        return None
    p = Path(data[key])
    return p if p.is_absolute() else base / p


def _manifest_for(args, data: dict, base: Path) -> Manifest:
    path = Path(args.manifest) if args.manifest else _config_path(data, "test_manifest", base)
    if path is None:
        raise UsageError("no manifest given: pass --manifest or set test_manifest in [data]")
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    return load_manifest(path)


def _load_lm(path) -> PhonemeLM:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"language model {path} does not exist")
    return PhonemeLM.load(path)


def _checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _decode_setup(args):
    """Resolve checkpoint, vocabulary, utterances and decode settings (flag > [data] > built-in default)."""
    sections, base = _read_config(args.config)
    data = sections.get("data", {})
    ck = _checkpoint(args.checkpoint)
    if ck.symbols is None:
        raise CheckpointError(f"checkpoint {args.checkpoint} carries no vocabulary")
    vocab = PhonemeVocab(ck.symbols)
    if ck.model.config.vocab_size != len(vocab):
        raise ValueError(f"vocab mismatch: model emits {ck.model.config.vocab_size} symbols, "
                         f"checkpoint vocabulary has {len(vocab)}")
    manifest = _manifest_for(args, data, base)
    cmvn_on = parse_bool(data.get("cmvn", "true"))
    utts = load_utterances(manifest, vocab, cmvn_on, args.jobs)
    beam = args.beam if args.beam is not None else int(data.get("beam", DEFAULT_BEAM))
    weight = args.lm_weight if args.lm_weight is not None else float(data.get("lm_weight", DEFAULT_LM_WEIGHT))
    lm_path = Path(args.lm) if args.lm else _config_path(data, "lm", base)
    lm = _load_lm(lm_path) if lm_path is not None else None
    cfg = DecodeConfig(beam=beam, lm=lm, lm_weight=weight, shallow_fusion=args.shallow_fusion)
    header = f"# beam={beam} lm_weight={weight} lm={lm_path if lm_path else 'none'} checkpoint={args.checkpoint}"
    return ck.model, vocab, utts, cfg, header


def _write_text(path, text: str) -> None:
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _parse_frames(spec: str) -> tuple[int, int]:
    try:
        a, b = spec.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise UsageError(f"--frames expects a..b, got {spec!r}") from None
    if lo < 0 or hi < lo:
        raise UsageError(f"--frames range {spec!r} is empty or negative")
    return lo, hi


# -- subcommands ----------------------------------------------------------------------------

def cmd_extract_features(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(row: ManifestRow):
        try:
            feats = compute_features(read_wav(row.path), row.uid, not args.no_cmvn)
            save_features(out / f"{row.uid}.fbk", feats)
            return None
        except (ValueError, OSError) as exc:
            return f"{row.uid}: {exc}"

    rows = list(manifest)
    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            errors = list(pool.map(one, rows))
    else:
        errors = [one(r) for r in rows]
    ok = [ManifestRow(r.uid, Path(f"{r.uid}.fbk"), r.language, r.phonemes) for r, e in zip(rows, errors) if e is None]
    Manifest(ok).save(out / "manifest.tsv")
    failed = [e for e in errors if e is not None]
    for msg in failed:
        print(f"freqasr: extract-features: {msg}", file=sys.stderr)
    if failed:
        ids = ", ".join(r.uid for r, e in zip(rows, errors) if e is not None)
        raise RuntimeError(f"{len(failed)} of {len(rows)} utterance(s) failed: {ids}")
    print(f"wrote {len(ok)} feature file(s) and {out / 'manifest.tsv'}")
    return 0


def cmd_synth_data(args) -> int:
    specs = default_languages(args.languages, args.phonemes)
    train_m, test_m = synth_corpus(specs, args.n_train, args.n_test, seed=args.seed, out_dir=args.out_dir)
    print(f"wrote {len(train_m)} train and {len(test_m)} test utterance(s) to {args.out_dir}")
    return 0


def cmd_lm_train(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    if len(manifest) == 0:
        raise ValueError(f"manifest {args.manifest} has no utterances")
    lm = train_ngram_lm([[tag(r.language, p) for p in r.phonemes] for r in manifest], order=args.order)
    lm.save(args.out)
    print(f"wrote {args.order}-gram language model over {len(lm.vocab)} symbol(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    sections, base = _read_config(args.config)
    data = sections.get("data", {})
    train_path = _config_path(data, "train_manifest", base)
    if train_path is None:
        raise ValueError(f"{args.config}: [data] train_manifest is required")
    if not train_path.exists():
        raise FileNotFoundError(f"training manifest {train_path} does not exist")
    manifests = [load_manifest(train_path)]
    test_path = _config_path(data, "test_manifest", base)
    if test_path is not None and test_path.exists():
        manifests.append(load_manifest(test_path))
    vocab = build_vocab(manifests)
    model_sec = dict(sections.get("model", {}))
    if args.variant:
        model_sec["variant"] = args.variant
    mcfg = model_config_from(model_sec, vocab_size=len(vocab))
    tcfg = train_config_from(sections.get("train", {}), seed=args.seed, epochs=args.epochs,
                             max_steps=args.max_steps)
    utts = load_utterances(manifests[0], vocab, parse_bool(data.get("cmvn", "true")), args.jobs)
    model = build_model(mcfg, seed=tcfg.seed)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        res = fit(model, utts, tcfg, log_file=fh)
    save_checkpoint(args.out, model, res.state, vocab.symbols)
    first, last = res.losses[0], res.losses[-1]
    print(f"variant={mcfg.variant} schedule={tcfg.resolved_schedule(mcfg.variant)} steps={res.state.step} "
          f"loss {first:.4f} -> {last:.4f} skipped={res.skipped_total} checkpoint={args.out}")
    return 0


def cmd_decode(args) -> int:
    model, vocab, utts, cfg, header = _decode_setup(args)
    decoded = decode_utterances(model, utts, vocab, cfg)
    if cfg.beam <= 0:
        lines = [f"{d.uid}\t1\t\t\t\t{' '.join(vocab.decode(d.hypothesis))}" for d in decoded]
    else:
        lines = nbest_lines(decoded, vocab)
    _write_text(args.out, header + "\nuid\trank\tscore\tctc_score\tlm_score\tphonemes\n" + "".join(
        line + "\n" for line in lines))
    if args.out != "-":
        print(header)
        print(f"wrote {len(lines)} hypothesis line(s) for {len(decoded)} utterance(s) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, utts, cfg, header = _decode_setup(args)
    decoded = decode_utterances(model, utts, vocab, cfg)
    report = score_corpus((d.language, d.reference, d.hypothesis) for d in decoded)
    text = report.to_json() + "\n" if args.json else report.to_tsv()
    out = args.out or str(args.checkpoint) + (".per.json" if args.json else ".per.tsv")
    _write_text(out, text)
    if not args.json:
        print(header)
    sys.stdout.write(text)
    return 0


def cmd_viz_attention(args) -> int:
    ck = _checkpoint(args.checkpoint)
    model = ck.model
    if model.freq is None:
        raise ValueError(f"{args.checkpoint} holds a {model.config.variant} model: no attention to visualize")
    src = Path(args.utterance)
    if not src.exists():
        raise FileNotFoundError(f"utterance {src} does not exist")
    if src.suffix == ".fbk":
        frames = load_features(src).frames
    else:
        frames = compute_features(read_wav(src), src.stem, not args.no_cmvn).frames
    model.eval()
    with T.no_grad():
        _, plens, maps = model(T.Tensor(frames[None]), [frames.shape[0]], collect=True)
    n = int(plens[0])
    lo, hi = _parse_frames(args.frames) if args.frames else (0, n - 1)
    if hi >= n:
        raise UsageError(f"--frames {lo}..{hi} exceeds the {n} pooled frame(s) of this utterance")
    sel = maps[:, 0, lo:hi + 1].mean(axis=1)          # (layers, heads, F, F)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for layer in range(sel.shape[0]):
        for head in range(sel.shape[1]):
            export_heatmap(sel[layer, head], out / f"layer{layer}_head{head}.{args.fmt}", args.fmt)
            count += 1
        export_heatmap(sel[layer].mean(axis=0), out / f"layer{layer}_mean.{args.fmt}", args.fmt)
        count += 1
    print(f"wrote {count} {sel.shape[2]}x{sel.shape[3]} map(s) for pooled frames {lo}..{hi} to {out}")
    return 0


# -- parser ---------------------------------------------------------------------------------

class _Formatter(argparse.HelpFormatter):
    """Fixed-width help that appends each flag's default unless the text already states it."""

    def __init__(self, prog):
        super().__init__(prog, max_help_position=32, width=100)

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default is argparse.SUPPRESS or action.required:
            return text
        if not action.option_strings or action.nargs == 0 and action.const is None:
            return text
        return f"{text} (default: {action.default})"


def _add_decode_flags(p) -> None:
    p.add_argument("--config", required=True, help="config file; [data] may set test_manifest, lm, beam, lm_weight, cmvn")
    p.add_argument("--checkpoint", required=True, help="trained FQA1 checkpoint")
    p.add_argument("--manifest", default=None, help="utterances to decode (default: [data] test_manifest)")
    p.add_argument("--beam", type=int, default=None,
                   help=f"beam width, 0 = greedy (default: [data] beam, else {DEFAULT_BEAM})")
    p.add_argument("--lm", default=None, help="ARPA phoneme LM for rescoring (default: [data] lm, else none)")
    p.add_argument("--lm-weight", type=float, default=None,
                   help=f"LM weight (default: [data] lm_weight, else {DEFAULT_LM_WEIGHT})")
    p.add_argument("--shallow-fusion", action="store_true", help="add LM scores during the search")
    p.add_argument("--jobs", type=int, default=1, help="feature loading threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqasr", formatter_class=_Formatter,
                                     description="Phoneme recognition with frequency-directional attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("extract-features", formatter_class=_Formatter, help="cache log-mel features",
                       description="Compute 40-dim log-mel features for every WAV in a manifest.")
    p.add_argument("--manifest", required=True, help="uid/path/language/phonemes TSV of WAV files")
    p.add_argument("--out-dir", required=True, help="where .fbk files and manifest.tsv go")
    p.add_argument("--no-cmvn", action="store_true", help="skip per-utterance mean/variance normalization")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("synth-data", formatter_class=_Formatter, help="generate a synthetic corpus",
                       description="Write a synthetic multilingual corpus (WAVs plus train.tsv and test.tsv).")
    p.add_argument("--out-dir", required=True, help="output folder")
    p.add_argument("--languages", type=int, default=3, help="number of languages on disjoint mel bands")
    p.add_argument("--phonemes", type=int, default=10, help="phonemes per language")
    p.add_argument("--n-train", type=int, default=120, help="training utterances")
    p.add_argument("--n-test", type=int, default=30, help="test utterances")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("lm-train", formatter_class=_Formatter, help="train a phoneme n-gram LM",
                       description="Train a Witten-Bell phoneme n-gram LM on manifest transcripts; writes ARPA.")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="output ARPA file")
    p.add_argument("--order", type=int, default=3, help="n-gram order")
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("train", formatter_class=_Formatter, help="train an acoustic model",
                       description="Train with CTC and Adam; writes a checkpoint and a per-step TSV log.")
    p.add_argument("--config", required=True, help="config with [data] train_manifest plus [model]/[train]")
    p.add_argument("--variant", choices=["baseline", "proposed"], default=None,
                   help="model variant (default: [model] variant, else proposed)")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and dropout")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="step log path (default: <out>.log)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: [train] epochs, else 20)")
    p.add_argument("--max-steps", type=int, default=None, help="step cap, 0 = none (default: [train] max_steps, else 0)")
    p.add_argument("--jobs", type=int, default=1, help="feature loading threads")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", formatter_class=_Formatter, help="write N-best hypotheses",
                       description="Beam-search decode a manifest and write an N-best TSV.")
    _add_decode_flags(p)
    p.add_argument("--out", default="-", help="N-best TSV path, - for stdout")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", formatter_class=_Formatter, help="report phoneme error rates",
                       description="Decode a manifest and report PER per language and overall.")
    _add_decode_flags(p)
    p.add_argument("--json", action="store_true", help="emit JSON instead of TSV")
    p.add_argument("--out", default=None, help="report path (default: <checkpoint>.per.tsv or .per.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("viz-attention", formatter_class=_Formatter, help="export attention heatmaps",
                       description="Export frequency-attention maps of a proposed-model checkpoint.")
    p.add_argument("--checkpoint", required=True, help="proposed-variant checkpoint")
    p.add_argument("--utterance", required=True, help="WAV or .fbk feature file")
    p.add_argument("--frames", default=None, help="pooled frame range a..b, inclusive (default: all)")
    p.add_argument("--out-dir", required=True, help="output folder")
    p.add_argument("--fmt", choices=["pgm", "csv"], default="pgm", help="heatmap format")
    p.add_argument("--no-cmvn", action="store_true", help="skip CMVN when reading a WAV")
    p.set_defaults(func=cmd_viz_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="freqasr: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, UsageError) as exc:
        code, msg = 2, str(exc)
    except (ValueError, RuntimeError, OSError, TrainingDiverged) as exc:
        code, msg = 1, str(exc)
    print(f"freqasr: error: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
