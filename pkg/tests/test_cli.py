import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from freqasr.cli import build_parser, main
from freqasr.data import load_heatmap, load_manifest
from freqasr.features import load_features
from freqasr.model import build_model, full_scale_config
from freqasr.train import load_checkpoint, save_checkpoint

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["extract-features", "synth-data", "lm-train", "train", "decode", "evaluate", "viz-attention"]

TINY_MODEL = """[model]
conv_channels = 4 4 4 4
bilstm_hidden = 8
n_layers = 1
n_heads = 2
d_model = 4
d_ff = 8
"""


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out-dir", str(root / "corpus"), "--n-train", "12", "--n-test", "4",
                 "--seed", "7"]) == 0
    (root / "toy.ini").write_text("[data]\ntrain_manifest = corpus/train.tsv\ntest_manifest = corpus/test.tsv\n"
                                  + TINY_MODEL + "[train]\nepochs = 1\nbatch_size = 4\n")
    assert main(["train", "--config", str(root / "toy.ini"), "--out", str(root / "p.ckpt")]) == 0
    assert main(["train", "--config", str(root / "toy.ini"), "--variant", "baseline",
                 "--out", str(root / "b.ckpt")]) == 0
    return root


# -- help output --------------------------------------------------------------------------

@pytest.mark.parametrize("command", [None] + COMMANDS)
def test_help_matches_golden_file(command, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser = build_parser()
    if command is None:
        text = parser.format_help()
    else:
        text = parser._subparsers._group_actions[0].choices[command].format_help()
    golden = GOLDEN / f"help_{command or 'main'}.txt"
    if os.environ.get("FREQASR_REGEN_GOLDEN"):
        golden.write_text(text)
    assert text == golden.read_text()


@pytest.mark.parametrize("command", COMMANDS)
def test_help_states_every_optional_default(command):
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    text = " ".join(sub.format_help().split())
    for action in sub._actions:
        if action.required or not action.option_strings or action.dest == "help":
            continue
        assert action.option_strings[-1] in text
        assert "default" in (sub._get_formatter()._get_help_string(action) or "")


def test_no_subcommand_is_a_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 2 and "required" in err


@pytest.mark.parametrize("command", ["train", "decode", "evaluate"])
def test_config_is_required(capsys, command):
    code, _, err = run(capsys, command, "--checkpoint", "x", "--out", "y")
    assert code == 2 and "--config" in err


# -- synth-data / extract-features / lm-train -----------------------------------------------

def test_synth_data_is_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "synth-data", "--out-dir", tmp_path / d, "--languages", 3, "--seed", 7,
                   "--n-train", 3, "--n-test", 2)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert sha(tmp_path / "a" / f) == sha(tmp_path / "b" / f)


def test_extract_features_writes_caches_and_manifest(capsys, corpus, tmp_path):
    code, _, _ = run(capsys, "extract-features", "--manifest", corpus / "corpus/test.tsv", "--out-dir", tmp_path / "f")
    assert code == 0
    m = load_manifest(tmp_path / "f" / "manifest.tsv")
    assert len(m) == 4 and all(r.path.suffix == ".fbk" for r in m)
    first = {r.uid: sha(r.path) for r in m}
    assert load_features(m.rows[0].path).frames.shape[1] == 40
    assert run(capsys, "extract-features", "--manifest", corpus / "corpus/test.tsv", "--out-dir", tmp_path / "f",
               "--jobs", 2)[0] == 0
    assert {r.uid: sha(r.path) for r in m} == first


def test_extract_features_reports_corrupt_wav(capsys, corpus, tmp_path):
    rows = (corpus / "corpus/test.tsv").read_text().splitlines()[:3]
    bad_uid = rows[1].split("\t")[0]
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    rows[1] = "\t".join([bad_uid, str(tmp_path / "junk.wav")] + rows[1].split("\t")[2:])
    rows = [r if i == 1 else r.replace("\twav/", f"\t{corpus / 'corpus' / 'wav'}/") for i, r in enumerate(rows)]
    (tmp_path / "m.tsv").write_text("\n".join(rows) + "\n")
    code, _, err = run(capsys, "extract-features", "--manifest", tmp_path / "m.tsv", "--out-dir", tmp_path / "f")
    assert code == 1
    assert len(list((tmp_path / "f").glob("*.fbk"))) == 2
    assert bad_uid in err.strip().splitlines()[-1]


def test_lm_train_writes_arpa(capsys, corpus, tmp_path):
    code, _, _ = run(capsys, "lm-train", "--manifest", corpus / "corpus/train.tsv", "--out", tmp_path / "lm.arpa")
    assert code == 0
    text = (tmp_path / "lm.arpa").read_text()
    assert text.startswith("\\data\\") and "\\3-grams:" in text and text.rstrip().endswith("\\end\\")


def test_lm_train_on_empty_manifest_fails(capsys, tmp_path):
    (tmp_path / "empty.tsv").write_text("")
    code, _, err = run(capsys, "lm-train", "--manifest", tmp_path / "empty.tsv", "--out", tmp_path / "lm.arpa")
    assert code == 1 and len(err.strip().splitlines()) == 1 and "no utterances" in err
    assert not (tmp_path / "lm.arpa").exists()


# -- train ---------------------------------------------------------------------------------

def read_log(path):
    lines = Path(path).read_text().splitlines()
    return [line.split("\t") for line in lines[1:]]


def test_train_200_steps_lowers_loss(capsys, corpus, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[data]\ntrain_manifest = {corpus / 'corpus/train.tsv'}\n" + TINY_MODEL
                   + "variant = baseline\n[train]\nbatch_size = 4\nschedule = constant\nlearning_rate = 0.01\n")
    code, out, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.ckpt", "--epochs", 100,
                       "--max-steps", 200)
    assert code == 0 and "steps=200" in out
    losses = [float(f[3]) for f in read_log(tmp_path / "m.ckpt.log")]
    assert len(losses) == 200
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_proposed_variant_defaults_to_warmup(corpus):
    rows = read_log(corpus / "p.ckpt.log")
    assert abs(float(rows[0][2]) - 256 ** -0.5 * 5000 ** -1.5) < 1e-15
    base = read_log(corpus / "b.ckpt.log")
    assert float(base[0][2]) == float(base[-1][2]) == 1e-4


def test_same_seed_same_checkpoint_hash(capsys, corpus, tmp_path):
    for name in ("x", "y"):
        assert run(capsys, "train", "--config", corpus / "toy.ini", "--seed", 3, "--out", tmp_path / f"{name}.ckpt")[0] == 0
    assert sha(tmp_path / "x.ckpt") == sha(tmp_path / "y.ckpt")
    assert run(capsys, "train", "--config", corpus / "toy.ini", "--seed", 4, "--out", tmp_path / "z.ckpt")[0] == 0
    assert sha(tmp_path / "x.ckpt") != sha(tmp_path / "z.ckpt")


def test_checkpoint_carries_vocabulary(corpus):
    ck = load_checkpoint(corpus / "p.ckpt")
    assert ck.symbols[:2] == ["<blank>", "<unk>"] and len(ck.symbols) == ck.model.config.vocab_size


def test_bad_config_fails_with_one_line(capsys, tmp_path):
    (tmp_path / "bad.ini").write_text("[optimizer]\nlr = 1\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.ini", "--out", tmp_path / "m.ckpt")
    assert code == 1 and len(err.strip().splitlines()) == 1 and "unknown config section" in err


def test_missing_config_is_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", tmp_path / "none.ini", "--out", tmp_path / "m.ckpt")
    assert code == 2 and "does not exist" in err


# -- decode / evaluate ------------------------------------------------------------------------

def hypotheses(text):
    out = {}
    for line in text.splitlines():
        if line.startswith("#") or line.startswith("uid\t"):
            continue
        uid, rank, *_, phon = line.split("\t")
        if rank == "1":
            out[uid] = phon
    return out


def test_decode_header_echoes_default_settings(capsys, corpus):
    code, out, _ = run(capsys, "decode", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt")
    assert code == 0
    assert out.splitlines()[0].startswith("# beam=20 lm_weight=1.0 ")
    assert len(hypotheses(out)) == 4


def test_beam_one_matches_greedy(capsys, corpus):
    _, greedy, _ = run(capsys, "decode", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt", "--beam", 0)
    _, beam1, _ = run(capsys, "decode", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt", "--beam", 1)
    assert hypotheses(greedy) == hypotheses(beam1)


def test_decode_with_lm_writes_file(capsys, corpus, tmp_path):
    assert run(capsys, "lm-train", "--manifest", corpus / "corpus/train.tsv", "--out", tmp_path / "lm.arpa")[0] == 0
    code, out, _ = run(capsys, "decode", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt",
                       "--beam", 4, "--lm", tmp_path / "lm.arpa", "--out", tmp_path / "nbest.tsv")
    assert code == 0 and "lm_weight=1.0" in out
    lines = (tmp_path / "nbest.tsv").read_text().splitlines()[2:]
    for line in lines:
        _, _, total, ctc, lm, _ = line.split("\t")
        assert abs(float(total) - (float(ctc) + float(lm))) < 2e-6


def test_missing_checkpoint_is_exit_2(capsys, corpus):
    code, _, err = run(capsys, "decode", "--config", corpus / "toy.ini", "--checkpoint", corpus / "nope.ckpt")
    assert code == 2 and "nope.ckpt" in err and len(err.strip().splitlines()) == 1


def test_evaluate_rows_and_json(capsys, corpus, tmp_path):
    code, out, _ = run(capsys, "evaluate", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt",
                       "--beam", 2, "--out", tmp_path / "r.tsv")
    assert code == 0
    rows = [line.split("\t")[0] for line in (tmp_path / "r.tsv").read_text().splitlines()[1:]]
    assert rows[-1] == "All" and rows[:-1] == sorted(rows[:-1])
    code, out, _ = run(capsys, "evaluate", "--config", corpus / "toy.ini", "--checkpoint", corpus / "p.ckpt",
                       "--beam", 2, "--json", "--out", tmp_path / "r.json")
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(out)


# -- viz-attention -----------------------------------------------------------------------------

def test_viz_attention_csv_rows_are_stochastic(capsys, corpus, tmp_path):
    wav = sorted((corpus / "corpus/wav").glob("test*.wav"))[0]
    code, _, _ = run(capsys, "viz-attention", "--checkpoint", corpus / "p.ckpt", "--utterance", wav,
                     "--out-dir", tmp_path / "maps", "--fmt", "csv")
    assert code == 0
    files = sorted(p.name for p in (tmp_path / "maps").iterdir())
    assert files == ["layer0_head0.csv", "layer0_head1.csv", "layer0_mean.csv"]
    for f in files:
        m = load_heatmap(tmp_path / "maps" / f)
        assert m.shape == (40, 40)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)


def test_viz_attention_single_frame_and_range_errors(capsys, corpus, tmp_path):
    wav = sorted((corpus / "corpus/wav").glob("test*.wav"))[0]
    args = ["viz-attention", "--checkpoint", corpus / "p.ckpt", "--utterance", wav, "--fmt", "csv"]
    assert run(capsys, *args, "--frames", "0..0", "--out-dir", tmp_path / "one")[0] == 0
    assert run(capsys, *args, "--frames", "0..9999", "--out-dir", tmp_path / "big")[0] == 2
    assert run(capsys, *args, "--frames", "3..1", "--out-dir", tmp_path / "rev")[0] == 2


def test_viz_attention_on_baseline(capsys, corpus, tmp_path):
    wav = sorted((corpus / "corpus/wav").glob("test*.wav"))[0]
    code, _, err = run(capsys, "viz-attention", "--checkpoint", corpus / "b.ckpt", "--utterance", wav,
                       "--out-dir", tmp_path / "maps")
    assert code == 1 and "no attention to visualize" in err


def test_viz_attention_full_scale_file_set(capsys, corpus, tmp_path):
    save_checkpoint(tmp_path / "full.ckpt", build_model(full_scale_config("proposed"), 0))
    fbk = tmp_path / "f"
    assert run(capsys, "extract-features", "--manifest", corpus / "corpus/test.tsv", "--out-dir", fbk)[0] == 0
    utt = sorted(fbk.glob("*.fbk"))[0]
    code, _, _ = run(capsys, "viz-attention", "--checkpoint", tmp_path / "full.ckpt", "--utterance", utt,
                     "--frames", "0..1", "--out-dir", tmp_path / "maps")
    assert code == 0
    heads = sorted((tmp_path / "maps").glob("layer*_head*.pgm"))
    means = sorted((tmp_path / "maps").glob("layer*_mean.pgm"))
    assert len(heads) == 16 and len(means) == 4
    assert all(load_heatmap(p).shape == (40, 40) for p in heads + means)
