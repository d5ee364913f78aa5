"""Synthetic multi-speaker corpus with phoneme-group alignments.

Each speaker has a fundamental frequency, three formant centres, a spectral
tilt and a fricative band. Utterances are sequences of vowel-, semivowel-,
nasal-, fricative- and stop-like segments rendered from those parameters.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtdy.audio import HOP, SAMPLE_RATE, Waveform, write_manifest, write_wav
from dtdy.evaluation import Trial, write_trials
from dtdy.explain import AlignmentRow, write_alignment

MIN_F0_GAP = 8.0  # Hz
MIN_FORMANT_GAP = 60.0  # Hz

SEGMENTS = {
    # group: (probability, min ms, max ms)
    "vowels": (0.35, 90, 200),
    "semivowels": (0.15, 60, 120),
    "nasals": (0.15, 60, 120),
    "fricatives": (0.20, 60, 150),
    "stops": (0.15, 50, 100),
}
PHONEMES = {
    "vowels": ["aa", "iy", "uw", "eh"],
    "semivowels": ["w", "y", "l", "r"],
    "nasals": ["m", "n", "ng"],
    "fricatives": ["s", "sh", "f", "z"],
    "stops": ["p", "t", "k", "b"],
}


@dataclass
class Voice:
    f0: float
    formants: tuple[float, float, float]
    tilt: float
    fricative_hz: float


@dataclass
class SynthSpec:
    n_speakers: int = 20
    utterances_per_speaker: int = 10
    utterance_seconds: float = 3.0
    test_utterances_per_speaker: int = 2
    sample_rate: int = SAMPLE_RATE


def _distinct(v: Voice, others: list[Voice]) -> bool:
    for o in others:
        if abs(v.f0 - o.f0) < MIN_F0_GAP and all(abs(a - b) < MIN_FORMANT_GAP for a, b in zip(v.formants, o.formants)):
            return False
    return True


def make_voices(n: int, seed: int) -> list[Voice]:
    """Speaker voices; any two differ by >= 8 Hz in F0 or >= 60 Hz in some formant."""
    rng = np.random.default_rng([seed, 100])
    voices: list[Voice] = []
    while len(voices) < n:
        v = Voice(
            f0=float(rng.uniform(80, 300)),
            formants=(float(rng.uniform(350, 850)), float(rng.uniform(1000, 2300)), float(rng.uniform(2500, 3400))),
            tilt=float(rng.uniform(-1.6, -0.6)),
            fricative_hz=float(rng.uniform(3500, 6500)),
        )
        if _distinct(v, voices):
            voices.append(v)
    return voices


FORMANT_BW = (90.0, 120.0, 160.0)


def resonance_gain(freqs: np.ndarray, formants, bws=FORMANT_BW) -> np.ndarray:
    """Sum of three resonance magnitude responses."""
    f = np.asarray(freqs, dtype=np.float64)[..., None]
    fc = np.asarray(formants, dtype=np.float64)
    bw = np.asarray(bws, dtype=np.float64)
    return (1.0 / np.sqrt(1.0 + ((f - fc) / bw) ** 2)).sum(axis=-1)


def _fade(n: int, sr: int) -> np.ndarray:
    k = min(n // 2, int(0.005 * sr))
    env = np.ones(n)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def _harmonics(n: int, sr: int, f0_track: np.ndarray, formant_track: np.ndarray, tilt: float) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    n_h = int(7800 // f0_track.max())
    out = np.zeros(n)
    for h in range(1, n_h + 1):
        fh = h * f0_track
        gain = (1.0 / np.sqrt(1.0 + ((fh[:, None] - formant_track) / np.array(FORMANT_BW)) ** 2)).sum(axis=1)
        out += (h ** tilt) * gain * np.sin(h * phase)
    return out


def _shaped_noise(n: int, sr: int, rng: np.random.Generator, envelope) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    return np.fft.irfft(spec * envelope(freqs), n)


def render_segment(group: str, n: int, voice: Voice, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = voice.f0 * rng.uniform(0.88, 1.12)
    f0_track = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi)))
    fm = np.asarray(voice.formants)
    if group == "vowels":
        track = np.broadcast_to(fm, (n, 3))
        x = _harmonics(n, sr, f0_track, track, voice.tilt)
        x += 0.3 * _shaped_noise(n, sr, rng, lambda f: resonance_gain(f, fm)) * np.std(x)
    elif group == "semivowels":
        start = fm * rng.uniform(0.75, 0.9)
        track = start + (fm - start) * np.linspace(0, 1, n)[:, None]
        x = _harmonics(n, sr, f0_track, track, voice.tilt)
    elif group == "nasals":
        nasal = np.array([250.0, fm[1], fm[2]])
        track = np.broadcast_to(nasal, (n, 3))
        x = _harmonics(n, sr, f0_track, track, voice.tilt - 0.6) * 0.6
    elif group == "fricatives":
        fc = voice.fricative_hz * rng.uniform(0.9, 1.1)
        x = _shaped_noise(n, sr, rng, lambda f: 1.0 / np.sqrt(1.0 + ((f - fc) / 900.0) ** 2)) * 8.0
    elif group == "stops":
        x = np.zeros(n)
        b = min(n, max(1, int(rng.uniform(0.010, 0.020) * sr)))
        burst = rng.standard_normal(b) * np.exp(-np.arange(b) / (0.004 * sr))
        x[n - b:] = burst * 1.5
        return x
    else:
        raise ValueError(f"unknown segment group {group!r}")
    return x * _fade(n, sr)


def render_utterance(voice: Voice, seconds: float, rng: np.random.Generator, sr: int = SAMPLE_RATE):
    """Waveform in [-1, 1] plus its frame-level phoneme alignment."""
    total = int(round(seconds * sr))
    groups = list(SEGMENTS)
    probs = np.array([SEGMENTS[g][0] for g in groups])
    pieces, spans = [], []
    pos = 0
    while pos < total:
        g = groups[rng.choice(len(groups), p=probs / probs.sum())]
        _, lo, hi = SEGMENTS[g]
        n = min(int(rng.uniform(lo, hi) * sr / 1000), total - pos)
        if n <= 0:
            break
        seg = render_segment(g, n, voice, rng, sr)
        seg = seg / (np.abs(seg).max() + 1e-12) * (0.5 if g != "stops" else 0.35)
        pieces.append(seg)
        spans.append((pos, pos + n, str(rng.choice(PHONEMES[g])), g))
        pos += n
    x = np.concatenate(pieces)[:total]
    x = x + 1e-3 * rng.standard_normal(total)
    x = np.clip(x, -1.0, 1.0)
    align = []
    for s, e, ph, g in spans:
        fs, fe = s // HOP, e // HOP
        if fe > fs:
            align.append(AlignmentRow(fs, fe, ph, g))
    return Waveform(x, sr), align


def synth_dataset(spec: SynthSpec, seed: int, out_dir) -> dict[str, Path]:
    """Write WAVs, manifests, alignments, a trial list and the voice table.

    The last ``test_utterances_per_speaker`` utterances of each speaker are
    held out: they form ``test.csv`` and every pair among them is a trial.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "wav").mkdir(exist_ok=True)
        (out / "align").mkdir(exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    voices = make_voices(spec.n_speakers, seed)
    all_rows, train_rows, test_rows = [], [], []
    for si, v in enumerate(voices):
        spk = f"spk{si:03d}"
        (out / "wav" / spk).mkdir(exist_ok=True)
        for ui in range(spec.utterances_per_speaker):
            rng = np.random.default_rng([seed, si, ui])
            w, align = render_utterance(v, spec.utterance_seconds, rng, spec.sample_rate)
            rel = f"wav/{spk}/utt{ui:02d}.wav"
            write_wav(out / rel, w)
            write_alignment(out / "align" / f"{spk}_utt{ui:02d}.csv", align)
            all_rows.append((spk, rel))
            held = ui >= spec.utterances_per_speaker - spec.test_utterances_per_speaker
            (test_rows if held else train_rows).append((spk, rel))
    write_manifest(out / "manifest.csv", all_rows)
    write_manifest(out / "train.csv", train_rows)
    write_manifest(out / "test.csv", test_rows)
    trials = [Trial(int(a[0] == b[0]), a[1], b[1]) for a, b in itertools.combinations(test_rows, 2)]
    write_trials(out / "trials.txt", trials)
    with open(out / "voices.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["speaker_id", "f0", "f1", "f2", "f3", "tilt", "fricative_hz"])
        for si, v in enumerate(voices):
            wr.writerow([f"spk{si:03d}", f"{v.f0:.6f}", *(f"{f:.6f}" for f in v.formants), f"{v.tilt:.6f}", f"{v.fricative_hz:.6f}"])
    return {
        "manifest": out / "manifest.csv",
        "train": out / "train.csv",
        "test": out / "test.csv",
        "trials": out / "trials.txt",
        "align": out / "align",
    }


def alignment_path(dataset_dir, utterance_rel: str) -> Path:
    spk, name = Path(utterance_rel).parts[-2:]
    return Path(dataset_dir) / "align" / f"{spk}_{Path(name).stem}.csv"
