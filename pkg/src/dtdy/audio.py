"""WAV I/O, log-Mel features and segment sampling."""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000
HOP = 160
WIN = 400
N_FFT = 512
N_MELS = 64
F_MIN, F_MAX = 20.0, 7600.0
LOG_FLOOR = 1e-6
TRAIN_SECONDS = 2.0
EVAL_SECONDS = 4.0
N_EVAL_SEGMENTS = 10


class WavError(Exception):
    """Base class for WAV decoding problems."""


class NotPCMError(WavError):
    pass


class BitDepthError(WavError):
    pass


class ChannelError(WavError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Decode 16-bit little-endian mono PCM, scaled by 1/32768."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            n_ch, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg:
            raise NotPCMError(f"{path}: not PCM ({msg})") from e
        raise WavError(f"{path}: {msg}") from e
    except EOFError as e:
        raise WavError(f"{path}: truncated file") from e
    if width != 2:
        raise BitDepthError(f"{path}: {8 * width}-bit samples, only 16-bit supported")
    if n_ch != 1:
        raise ChannelError(f"{path}: {n_ch} channels, only mono supported")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path, w: Waveform) -> None:
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(q.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """HTK-scale triangular filters with unit peaks, shape (n_mels, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), n_mels + 2))[1:-1]


_FBANK = mel_filterbank()
_WINDOW = np.hamming(WIN)


def frame_signal(x: np.ndarray) -> np.ndarray:
    """Centered frames: frame t covers samples [160t - 200, 160t + 200), reflect-padded."""
    n_frames = len(x) // HOP
    pad = WIN // 2
    if len(x) <= pad:
        xp = np.pad(x, (pad, pad), mode="wrap" if len(x) else "constant")
    else:
        xp = np.pad(x, (pad, pad), mode="reflect")
    return sliding_window_view(xp, WIN)[::HOP][:n_frames]


def power_spectrogram(x: np.ndarray) -> np.ndarray:
    frames = frame_signal(x) * _WINDOW
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    return spec.real ** 2 + spec.imag ** 2  # T, 257


def log_mel(w: Waveform) -> np.ndarray:
    """Un-normalised 64 x T log-Mel energies, T = len // 160."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate {w.sample_rate} Hz, expected {SAMPLE_RATE} (no resampling)")
    if len(w.samples) < HOP:
        raise ValueError(f"waveform of {len(w.samples)} samples is shorter than one hop")
    mel = power_spectrogram(w.samples) @ _FBANK.T
    return np.log(mel + LOG_FLOOR).T


def normalize(m: np.ndarray) -> np.ndarray:
    """Per-frequency-row mean/variance normalisation over the segment itself."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ValueError(f"normalize needs an F x T matrix with T >= 2, got {m.shape}")
    mu = m.mean(axis=1, keepdims=True)
    sd = np.maximum(m.std(axis=1, keepdims=True), 1e-8)
    out = (m - mu) / sd
    out[np.ptp(m, axis=1) == 0] = 0.0
    return out


def featurize(w: Waveform) -> np.ndarray:
    return normalize(log_mel(w))


def _tile_to(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == 0:
        raise ValueError("empty waveform")
    if len(x) >= n:
        return x
    return np.tile(x, math.ceil(n / len(x)))[:n]


def sample_train_segment(w: Waveform, rng: np.random.Generator, seconds: float = TRAIN_SECONDS) -> Waveform:
    """Random fixed-length crop; short utterances are tiled up to length first."""
    n = int(round(seconds * w.sample_rate))
    x = _tile_to(w.samples, n)
    start = int(rng.integers(0, len(x) - n + 1))
    return Waveform(x[start:start + n].copy(), w.sample_rate)


def eval_segment_starts(n_samples: int, seg: int, count: int = N_EVAL_SEGMENTS) -> list[int]:
    span = max(0, n_samples - seg)
    return [int(math.floor(i * span / (count - 1) + 0.5)) for i in range(count)]


def sample_eval_segments(w: Waveform, seconds: float = EVAL_SECONDS, count: int = N_EVAL_SEGMENTS) -> list[Waveform]:
    """Ten equally spaced fixed-length segments covering the utterance."""
    n = int(round(seconds * w.sample_rate))
    x = _tile_to(w.samples, n)
    return [Waveform(x[s:s + n].copy(), w.sample_rate) for s in eval_segment_starts(len(x), n, count)]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Utterance:
    speaker: str
    path: Path


def read_manifest(path) -> list[Utterance]:
    """Read a ``speaker_id,utterance_path`` CSV; paths resolve against its folder."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"speaker_id", "utterance_path"} - set(reader.fieldnames):
            raise ValueError(f"{path}: manifest header must be speaker_id,utterance_path")
        rows = [Utterance(r["speaker_id"], base / r["utterance_path"]) for r in reader]
    return rows


def write_manifest(path, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", "utterance_path"])
        w.writerows(rows)
