"""Synthetic speech-like audio for desk-scale experiments.

Utterances are random sequences of syllable units drawn from a small fixed
alphabet (voiced formant patterns plus fricative-like noise bursts), so a
50-utterance corpus is learnable by tiny models while still exercising the
envelope structure that intelligibility metrics measure. A low continuous
voicing floor keeps band envelopes from collapsing to digital silence
between syllables, mirroring real recordings.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .signal_core import SAMPLE_RATE, Waveform, write_wav

# (formant1 Hz, formant2 Hz) for voiced units; None marks a noise-burst unit
_UNIT_ALPHABET = [
    (730.0, 1090.0),
    (270.0, 2290.0),
    (530.0, 1840.0),
    (300.0, 870.0),
    (660.0, 1720.0),
    (440.0, 1020.0),
    (490.0, 1350.0),
    (360.0, 640.0),
    (600.0, 2400.0),
    None,  # broadband hiss
    None,  # high fricative
    None,  # low rumble burst
]
_NOISE_BANDS = {9: (2000.0, 6000.0), 10: (3500.0, 7500.0), 11: (300.0, 1200.0)}


def _formant_gains(freqs: np.ndarray, formants: tuple[float, float]) -> np.ndarray:
    gains = np.zeros_like(freqs)
    for f_c, bw in ((formants[0], 90.0), (formants[1], 120.0)):
        gains += 1.0 / (1.0 + ((freqs - f_c) / bw) ** 2)
    return gains / (1.0 + freqs / 600.0)  # spectral tilt


def _voiced_unit(n: int, f0: float, formants: tuple[float, float], rng) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    n_harm = int(4000.0 // f0)
    k = np.arange(1, n_harm + 1)
    gains = _formant_gains(k * f0, formants)
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    return (gains[None, :] * np.sin(2 * np.pi * np.outer(t, k * f0) + phases[None, :])).sum(axis=1)


def _noise_unit(n: int, band: tuple[float, float], rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    return np.fft.irfft(spec * mask, n=n)


def _envelope(n: int, attack: float = 0.03, release: float = 0.08) -> np.ndarray:
    env = np.ones(n)
    na = min(int(attack * SAMPLE_RATE), n // 2)
    nr = min(int(release * SAMPLE_RATE), n // 2)
    if na:
        env[:na] = 0.5 - 0.5 * np.cos(np.pi * np.arange(na) / na)
    if nr:
        env[-nr:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(nr) / nr)
    return env


def make_utterance(seed: int, seconds: float = 3.0) -> Waveform:
    """One deterministic speech-like utterance of roughly the requested length."""
    rng = np.random.default_rng([seed, 0x73706B])
    total = int(seconds * SAMPLE_RATE)
    f0 = rng.uniform(90.0, 220.0)
    out = np.zeros(total)
    pos = int(rng.uniform(0, 0.04) * SAMPLE_RATE)
    prev_was_noise = True
    while pos < total - SAMPLE_RATE // 10:
        unit_id = int(rng.integers(len(_UNIT_ALPHABET)))
        if prev_was_noise and _UNIT_ALPHABET[unit_id] is None:
            unit_id = int(rng.integers(9))  # no two noise bursts in a row
        dur = min(int(rng.uniform(0.14, 0.28) * SAMPLE_RATE), total - pos)
        unit = _UNIT_ALPHABET[unit_id]
        prev_was_noise = unit is None
        if unit is None:
            sig = _noise_unit(dur, _NOISE_BANDS[unit_id], rng) * 0.5
        else:
            sig = _voiced_unit(dur, f0 * rng.uniform(0.95, 1.05), unit, rng)
        out[pos : pos + dur] += sig * _envelope(dur) * rng.uniform(0.75, 1.0)
        pos += dur - int(0.06 * SAMPLE_RATE)  # syllables chain with overlap
    voicing_floor = _noise_unit(total, (100.0, 6000.0), rng)
    out += voicing_floor * 0.1 * np.sqrt(np.mean(out**2)) / (np.sqrt(np.mean(voicing_floor**2)) + 1e-12)
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= 0.08 / rms
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return Waveform(out)


def make_noise_clip(seed: int, seconds: float = 4.0) -> Waveform:
    """Colored environmental-style noise: pink-ish base with slow amplitude wobble."""
    rng = np.random.default_rng([seed, 0x6E7A])
    n = int(seconds * SAMPLE_RATE)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    shaping = 1.0 / np.sqrt(np.maximum(freqs, 30.0))
    out = np.fft.irfft(spec * shaping, n=n)
    am = 1.0 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * np.arange(n) / SAMPLE_RATE)
    out = out * am
    out *= 0.05 / np.sqrt(np.mean(out**2))
    return Waveform(out)


def make_corpus(
    out_dir: str | Path, count: int, seed: int = 0, seconds: tuple[float, float] = (2.0, 4.0)
) -> list[Path]:
    """Write ``count`` synthetic clean utterances as wav files; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 0x636F7270])
    paths = []
    for i in range(count):
        dur = float(rng.uniform(*seconds))
        w = make_utterance(seed * 100003 + i, seconds=dur)
        path = out_dir / f"utt{i:04d}.wav"
        write_wav(path, w)
        paths.append(path)
    return paths


def make_noise_corpus(out_dir: str | Path, count: int, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        w = make_noise_clip(seed * 99991 + i)
        path = out_dir / f"noise{i:03d}.wav"
        write_wav(path, w)
        paths.append(path)
    return paths
