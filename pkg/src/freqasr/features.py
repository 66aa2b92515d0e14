"""Audio front end: 16-bit PCM WAV in, 40-dim log mel filterbank frames out."""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_MELS = 40
LOG_FLOOR = 1e-10
FBK_MAGIC = b"FBK1"


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("audio clip is empty")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FilterBank:
    matrix: np.ndarray          # (n_mels, n_fft // 2 + 1)
    mel_centers: np.ndarray     # centre frequency of each filter, Hz
    sample_rate: int
    n_fft: int


@dataclass
class FeatureMatrix:
    frames: np.ndarray          # (T, n_mels)
    frame_shift_s: float = 0.010
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("feature frames must be a T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- WAV I/O ------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise ValueError(f"{path}: malformed WAV header ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise ValueError(f"{path}: unsupported sample width {8 * width} bits (need 16-bit PCM)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def wav_bytes(clip: AudioClip) -> bytes:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(wav_bytes(clip))


# -- spectral analysis -------------------------------------------------------

def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        raise ValueError(f"clip of {n_samples} samples is shorter than one {win}-sample window")
    return 1 + (n_samples - win) // hop


def stft(clip: AudioClip, window_s: float = 0.025, hop_s: float = 0.010) -> np.ndarray:
    """Power spectrogram, shape (T, n_fft // 2 + 1), periodic Hann window."""
    win = int(round(window_s * clip.sample_rate))
    hop = int(round(hop_s * clip.sample_rate))
    n_frames = frame_count(clip.samples.size, win, hop)
    n_fft = next_pow2(win)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop][:n_frames]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_scale(f_hz):
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("negative frequency")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(mel):
    m = np.asarray(mel, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def build_filterbank(n_mels: int = N_MELS, n_fft: int = 512, sample_rate: int = 16000,
                     f_min: float = 20.0, f_max: float | None = None) -> FilterBank:
    """Triangular filters on mel-equispaced edges, each rescaled to peak at 1."""
    if f_max is None:
        f_max = sample_rate / 2.0
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    if not (0 <= f_min < f_max <= sample_rate / 2.0):
        raise ValueError(f"invalid frequency range [{f_min}, {f_max}] for sample rate {sample_rate}")
    edges_hz = mel_to_hz(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz[None, :] - lo) / (ctr - lo)
    falling = (hi - bin_hz[None, :]) / (hi - ctr)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    peak = weights.max(axis=1, keepdims=True)
    if np.any(peak <= 0):
        raise ValueError("n_fft too small: some mel filter covers no FFT bin")
    return FilterBank(weights / peak, edges_hz[1:-1].copy(), sample_rate, n_fft)


def log_mel(power: np.ndarray, fbank: FilterBank, utterance_id: str = "",
            frame_shift_s: float = 0.010) -> FeatureMatrix:
    if power.shape[1] != fbank.matrix.shape[1]:
        raise ValueError(f"spectrogram has {power.shape[1]} bins, filterbank expects {fbank.matrix.shape[1]}")
    energies = power @ fbank.matrix.T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), frame_shift_s, utterance_id)


def cmvn(features: FeatureMatrix, var_floor: float = 1e-8) -> FeatureMatrix:
    x = features.frames
    if x.shape[0] < 2:
        raise ValueError("CMVN needs at least 2 frames")
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    out = (x - mu) / np.sqrt(np.maximum(var, var_floor))
    # constant columns map to exact zeros
    out[:, np.ptp(x, axis=0) == 0] = 0.0
    return FeatureMatrix(out, features.frame_shift_s, features.utterance_id)


_FBANK_CACHE: dict[tuple, FilterBank] = {}


def compute_features(clip: AudioClip, utterance_id: str = "", apply_cmvn: bool = True,
                     window_s: float = 0.025, hop_s: float = 0.010, n_mels: int = N_MELS) -> FeatureMatrix:
    """Full pipeline: STFT power, mel filterbank, log, optional CMVN."""
    power = stft(clip, window_s, hop_s)
    n_fft = 2 * (power.shape[1] - 1)
    key = (n_mels, n_fft, clip.sample_rate)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = build_filterbank(n_mels, n_fft, clip.sample_rate)
    feats = log_mel(power, _FBANK_CACHE[key], utterance_id, hop_s)
    return cmvn(feats) if apply_cmvn else feats


# -- feature cache -----------------------------------------------------------

def save_features(path, feats: FeatureMatrix) -> None:
    uid = feats.utterance_id.encode("utf-8")
    t, d = feats.frames.shape
    header = FBK_MAGIC + struct.pack("<I", len(uid)) + uid + struct.pack("<IId", t, d, feats.frame_shift_s)
    Path(path).write_bytes(header + feats.frames.astype("<f8").tobytes())


def load_features(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != FBK_MAGIC:
        raise ValueError(f"{path}: not a feature cache file (bad magic)")
    try:
        (n,) = struct.unpack_from("<I", blob, 4)
        uid = blob[8:8 + n].decode("utf-8")
        t, d, shift = struct.unpack_from("<IId", blob, 8 + n)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated feature header") from exc
    off = 8 + n + 16
    need = t * d * 8
    if len(blob) - off != need:
        raise ValueError(f"{path}: payload is {len(blob) - off} bytes, header implies {need}")
    frames = np.frombuffer(blob, dtype="<f8", count=t * d, offset=off).reshape(t, d).astype(np.float64)
    return FeatureMatrix(frames, shift, uid)
