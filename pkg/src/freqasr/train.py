"""Training: learning-rate schedules, Adam, the minibatch loop, checkpoints and config files."""

from __future__ import annotations

import configparser
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .ctc import ctc_loss, min_frames
from .freq_transformer import FreqAttentionConfig
from .model import AcousticModel, ModelConfig, build_model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FQA1"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- learning rate ------------------------------------------------------------

def lr_schedule(kind: str, step: int, warmup_steps: int = 5000, base_lr: float = 1e-4,
                scale_dim: int = 256) -> float:
    """``constant``: ``base_lr``.  ``warmup``: linear rise to ``warmup_steps``, then inverse square root.

    warmup:  step <= W : scale_dim**-0.5 * step * W**-1.5
             step >  W : scale_dim**-0.5 * step**-0.5
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if kind == "constant":
        return base_lr
    if kind == "warmup":
        if step <= warmup_steps:
            return scale_dim ** -0.5 * step * warmup_steps ** -1.5
        return scale_dim ** -0.5 * step ** -0.5
    raise ValueError(f"unknown schedule {kind!r}")


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lrate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lrate * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


# -- data plumbing --------------------------------------------------------------

@dataclass
class Utterance:
    uid: str
    features: np.ndarray          # (T, n_mels)
    labels: tuple[int, ...]
    language: str = ""

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def alignable(utt: Utterance) -> bool:
    return utt.num_frames >= 2 and utt.num_frames // 2 >= min_frames(utt.labels)


def pad_batch(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad to the longest utterance; returns (B, T_max, F) features and true lengths."""
    lengths = np.array([u.num_frames for u in utts], dtype=np.int64)
    F = utts[0].features.shape[1]
    out = np.zeros((len(utts), int(lengths.max()), F))
    for i, u in enumerate(utts):
        out[i, :u.num_frames] = u.features
    return out, lengths


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    schedule: str = "auto"         # auto: constant for baseline, warmup for proposed
    learning_rate: float = 1e-4
    warmup_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    max_steps: int = 0             # 0 = no cap
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_schedule(self, variant: str) -> str:
        if self.schedule == "auto":
            return "warmup" if variant == "proposed" else "constant"
        return self.schedule


@dataclass
class LogRecord:
    step: int
    epoch: int
    lrate: float
    batch_loss: float
    skipped: int
    grad_norm: float

    def line(self) -> str:
        return f"{self.step}\t{self.epoch}\t{self.lrate:.9e}\t{self.batch_loss:.10f}\t{self.skipped}\t{self.grad_norm:.6f}"


LOG_HEADER = "step\tepoch\tlrate\tbatch_loss\tskipped_count\tgrad_norm"


@dataclass
class TrainResult:
    log: list[LogRecord]
    state: AdamState
    skipped_total: int

    @property
    def losses(self) -> list[float]:
        return [r.batch_loss for r in self.log]


def batch_loss(model: AcousticModel, utts: Sequence[Utterance], rng=None):
    feats, lengths = pad_batch(utts)
    logits, plens, _ = model(T.Tensor(feats), lengths, rng=rng)
    return ctc_loss(logits, [u.labels for u in utts], plens, return_per_utt=True)


def fit(model: AcousticModel, dataset: Sequence[Utterance], cfg: TrainConfig,
        state: AdamState | None = None, log_file=None) -> TrainResult:
    """Minibatch CTC training with Adam and the configured schedule."""
    if not dataset:
        raise ValueError("empty training set")
    if model.config.vocab_size <= max(max(u.labels, default=0) for u in dataset):
        raise ValueError("labels exceed the model's vocabulary size")
    ok = [alignable(u) for u in dataset]
    if not any(ok):
        raise ValueError("every training utterance is too short for its transcript")
    schedule = cfg.resolved_schedule(model.config.variant)
    state = state or AdamState()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(cfg.seed)
    records: list[LogRecord] = []
    skipped_total = 0
    model.train()
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            keep = [i for i in idx if ok[i]]
            skipped = len(idx) - len(keep)
            skipped_total += skipped
            if skipped:
                log.warning("skipping %d unalignable utterance(s): %s", skipped,
                            ", ".join(dataset[i].uid for i in idx if not ok[i]))
            if not keep:
                continue
            utts = sorted((dataset[i] for i in keep), key=lambda u: -u.num_frames)
            loss, _ = batch_loss(model, utts, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {state.step + 1} (epoch {epoch})")
            T.backward(loss)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            norm = clip_grad_norm(grads, cfg.clip_norm)
            lrate = lr_schedule(schedule, state.step + 1, cfg.warmup_steps, cfg.learning_rate)
            adam_step(params, grads, state, lrate, cfg.beta1, cfg.beta2, cfg.eps)
            T.zero_grad(params.values())
            rec = LogRecord(state.step, epoch, lrate, value, skipped, norm)
            records.append(rec)
            if log_file is not None:
                log_file.write(rec.line() + "\n")
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    model.eval()
    return TrainResult(records, state, skipped_total)


# -- config text ------------------------------------------------------------------

_MODEL_KEYS = {"variant", "conv_channels", "bilstm_hidden", "vocab_size", "n_mels", "kernel", "dropout",
               "n_layers", "n_heads", "d_model", "d_ff", "positional_encoding", "identity"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {"train_manifest", "test_manifest", "cmvn", "lm", "beam", "lm_weight"}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS,
             "state": {"step"}, "vocab": {"symbols"}}


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config_text(text: str, allowed=("model", "train", "data")) -> dict[str, dict[str, str]]:
    """Parse ``key = value`` text with bracketed sections; unknown sections/keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"config parse error: {exc}") from exc
    out: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in allowed or section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
        out[section] = dict(cp[section])
    return out


def model_config_from(section: dict[str, str], vocab_size: int | None = None) -> ModelConfig:
    variant = section.get("variant", "proposed")
    kw: dict = {"variant": variant}
    if "conv_channels" in section:
        kw["conv_channels"] = [int(c) for c in section["conv_channels"].replace(",", " ").split()]
    for key in ("bilstm_hidden", "vocab_size", "n_mels", "kernel"):
        if key in section:
            kw[key] = int(section[key])
    if vocab_size is not None:
        kw["vocab_size"] = vocab_size
    if "dropout" in section:
        kw["dropout"] = float(section["dropout"])
    if variant == "proposed":
        fa = FreqAttentionConfig(
            n_layers=int(section.get("n_layers", 4)), n_heads=int(section.get("n_heads", 4)),
            d_model=int(section.get("d_model", 16)), d_ff=int(section.get("d_ff", 64)),
            dropout=kw.get("dropout", 0.1),
            positional_encoding=parse_bool(section.get("positional_encoding", "false")),
            identity=parse_bool(section.get("identity", "false")))
        kw["freq_attention"] = fa
    return ModelConfig(**kw)


def model_config_to_text(cfg: ModelConfig) -> str:
    lines = ["[model]", f"variant = {cfg.variant}",
             f"conv_channels = {' '.join(str(c) for c in cfg.conv_channels)}",
             f"bilstm_hidden = {cfg.bilstm_hidden}", f"vocab_size = {cfg.vocab_size}",
             f"n_mels = {cfg.n_mels}", f"kernel = {cfg.kernel}", f"dropout = {cfg.dropout!r}"]
    fa = cfg.freq_attention
    if fa is not None:
        lines += [f"n_layers = {fa.n_layers}", f"n_heads = {fa.n_heads}", f"d_model = {fa.d_model}",
                  f"d_ff = {fa.d_ff}", f"positional_encoding = {str(fa.positional_encoding).lower()}",
                  f"identity = {str(fa.identity).lower()}"]
    return "\n".join(lines) + "\n"


def train_config_from(section: dict[str, str], **overrides) -> TrainConfig:
    kw: dict = {}
    for f in fields(TrainConfig):
        if f.name in section:
            raw = section[f.name]
            kw[f.name] = raw.strip() if f.type in ("str", str) else (
                int(raw) if f.type in ("int", int) else float(raw))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, model: AcousticModel, state: AdamState | None = None,
                    symbols: Sequence[str] | None = None) -> None:
    """Write magic, version, config text, then named float64 arrays."""
    state = state or AdamState()
    text = model_config_to_text(model.config) + f"\n[state]\nstep = {state.step}\n"
    if symbols is not None:
        text += "\n[vocab]\nsymbols = " + " ".join(symbols) + "\n"
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        arrays.append(("param/" + name, p.data))
    for name in sorted(state.m):
        arrays.append(("adam_m/" + name, state.m[name]))
        arrays.append(("adam_v/" + name, state.v[name]))
    blob = bytearray(CKPT_MAGIC)
    blob += struct.pack("<I", CKPT_VERSION)
    tb = text.encode("utf-8")
    blob += struct.pack("<I", len(tb)) + tb
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


@dataclass
class Checkpoint:
    model: AcousticModel
    state: AdamState
    symbols: list[str] | None
    config_text: str


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
        (n,) = struct.unpack_from("<I", blob, 8)
        off = 12
        text = blob[off:off + n].decode("utf-8")
        if len(text.encode("utf-8")) != n:
            raise CheckpointError(f"corrupt checkpoint {path}: truncated config")
        off += n
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(blob):
                raise CheckpointError(f"corrupt checkpoint {path}: array {name!r} is truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if off != len(blob):
        raise CheckpointError(f"corrupt checkpoint {path}: {len(blob) - off} trailing bytes")
    sections = parse_config_text(text, allowed=("model", "state", "vocab"))
    cfg = model_config_from(sections["model"])
    if expect is not None and model_config_to_text(expect) != model_config_to_text(cfg):
        raise CheckpointError(f"config mismatch: checkpoint holds a {cfg.variant} model "
                              f"that differs from the requested {expect.variant} configuration")
    model = build_model(cfg)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except ValueError as exc:
        raise CheckpointError(f"size mismatch in {path}: {exc}") from exc
    state = AdamState(step=int(sections.get("state", {}).get("step", 0)))
    state.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    state.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    symbols = sections.get("vocab", {}).get("symbols")
    model.eval()
    return Checkpoint(model, state, symbols.split() if symbols else None, text)
