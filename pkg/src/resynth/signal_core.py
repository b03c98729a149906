"""Deterministic signal representations shared by every pipeline.

All pipeline entry points operate on mono 16 kHz audio. Framing is centered
with reflection padding so that a signal of length L always yields
floor(L / hop) + 1 frames, making every downstream shape a function of the
input length alone.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import (
    ChannelMismatch,
    InvalidInput,
    SampleRateMismatch,
    ShapeMismatch,
)

SAMPLE_RATE = 16000
HOP_LENGTH = 160          # 10 ms
WIN_LENGTH = 1024         # 64 ms
N_FFT = 1024
N_MELS = 128
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
MEL_FLOOR = 1e-5          # power floor before log compression


@dataclass
class Waveform:
    """Mono audio samples at the fixed pipeline rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ChannelMismatch(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Complex STFT frames, time-major [T x F]."""

    values: np.ndarray
    hop: int
    window_length: int
    n_fft: int = N_FFT
    original_length: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"expected [T x F], got shape {self.values.shape}")
        if self.values.shape[1] != self.n_fft // 2 + 1:
            raise ShapeMismatch(
                f"F={self.values.shape[1]} does not match fft_size/2+1={self.n_fft // 2 + 1}"
            )

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass
class MelSpectrogram:
    """Log-compressed 128-band mel frames, time-major [T x 128]."""

    values: np.ndarray
    hop: int = HOP_LENGTH
    window_length: int = WIN_LENGTH

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise ShapeMismatch(f"expected [T x {N_MELS}], got shape {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def _require_16k(w: Waveform):
    if w.sample_rate != SAMPLE_RATE:
        raise SampleRateMismatch(f"expected {SAMPLE_RATE} Hz, got {w.sample_rate} Hz")


def frame_count(n_samples: int, hop: int = HOP_LENGTH) -> int:
    """Frames produced by centered framing: floor(L / hop) + 1."""
    return n_samples // hop + 1


def hann_window(length: int) -> np.ndarray:
    return get_window("hann", length, fftbins=True).astype(np.float64)


def stft(w: Waveform, window_ms: float = 64.0, hop_ms: float = 10.0) -> ComplexSpectrogram:
    """Centered STFT with reflection padding.

    The FFT size equals the window length, so the default 64 ms window at
    16 kHz gives 513 frequency bins.
    """
    _require_16k(w)
    if len(w) == 0:
        raise InvalidInput("cannot compute STFT of an empty waveform")
    if window_ms < hop_ms:
        raise InvalidInput(f"window ({window_ms} ms) must be >= hop ({hop_ms} ms)")
    win_length = int(round(window_ms * w.sample_rate / 1000.0))
    hop = int(round(hop_ms * w.sample_rate / 1000.0))
    n_fft = win_length
    window = hann_window(win_length)

    pad = win_length // 2
    x = np.pad(w.samples, pad, mode="reflect") if len(w) > 1 else np.pad(w.samples, pad)
    n_frames = frame_count(len(w), hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win_length)[:: hop][:n_frames]
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return ComplexSpectrogram(
        spec, hop=hop, window_length=win_length, n_fft=n_fft, original_length=len(w)
    )


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Overlap-add inverse of :func:`stft`.

    Uses squared-window normalization, so reconstruction is exact wherever
    the window overlap has nonzero mass (everywhere, for the default Hann
    window and 10 ms hop).
    """
    if s.window_length < s.hop:
        raise InvalidInput(f"window ({s.window_length}) must be >= hop ({s.hop})")
    if s.values.shape[0] == 0:
        raise InvalidInput("cannot invert an empty spectrogram")
    window = hann_window(s.window_length)
    n_frames = s.values.shape[0]
    pad = s.window_length // 2
    if length is None:
        length = s.original_length
    if length is None:
        length = (n_frames - 1) * s.hop

    total = (n_frames - 1) * s.hop + s.window_length
    acc = np.zeros(total)
    den = np.zeros(total)
    frames = np.fft.irfft(s.values, n=s.n_fft, axis=1)[:, : s.window_length]
    for k in range(n_frames):
        start = k * s.hop
        acc[start : start + s.window_length] += frames[k] * window
        den[start : start + s.window_length] += window**2
    out = acc / np.maximum(den, 1e-12)
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return Waveform(out)


def _hz_to_mel(hz):
    """Slaney-style mel scale: linear below 1 kHz, logarithmic above."""
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / (200.0 / 3.0)
    log_region = hz >= 1000.0
    mel = np.where(log_region, 15.0 + np.log(np.maximum(hz, 1e-12) / 1000.0) / (np.log(6.4) / 27.0), mel)
    return mel


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    hz = mel * (200.0 / 3.0)
    log_region = mel >= 15.0
    hz = np.where(log_region, 1000.0 * np.exp((np.log(6.4) / 27.0) * (mel - 15.0)), hz)
    return hz


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
) -> np.ndarray:
    """Triangular slaney-style filterbank, area-normalized, shape [n_mels x F]."""
    n_freqs = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)

    fb = np.zeros((n_mels, n_freqs))
    for i in range(n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    enorm = 2.0 / (hz_pts[2:] - hz_pts[:-2])
    return fb * enorm[:, None]


_MEL_FB_CACHE: dict[tuple, np.ndarray] = {}


def _cached_filterbank() -> np.ndarray:
    key = (N_MELS, N_FFT, SAMPLE_RATE, MEL_FMIN, MEL_FMAX)
    if key not in _MEL_FB_CACHE:
        _MEL_FB_CACHE[key] = mel_filterbank()
    return _MEL_FB_CACHE[key]


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """128-band log-mel at a 10 ms hop with a 64 ms Hann window.

    Power spectra are pooled through the filterbank and log-compressed with
    a 1e-5 floor, so silence maps to ln(1e-5) in every cell.
    """
    _require_16k(w)
    spec = stft(w)
    power = np.abs(spec.values) ** 2
    mel_energy = power @ _cached_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel_energy, MEL_FLOOR)))


def mel_to_linear_power(mel: MelSpectrogram) -> np.ndarray:
    """Approximate [T x F] linear power from log-mel via the filterbank pseudo-inverse.

    The log floor is treated as silence: cells at the floor invert to zero.
    """
    energy = np.maximum(np.exp(mel.values) - MEL_FLOOR, 0.0)
    pinv = np.linalg.pinv(_cached_filterbank())
    return np.maximum(energy @ pinv.T, 0.0)


def griffin_lim(magnitude: np.ndarray, iterations: int = 60, length: int | None = None) -> Waveform:
    """Iterative phase reconstruction from a [T x F] magnitude spectrogram."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.ndim != 2 or magnitude.shape[1] != N_FFT // 2 + 1:
        raise ShapeMismatch(f"expected [T x {N_FFT // 2 + 1}] magnitudes, got {magnitude.shape}")
    if length is None:
        length = (magnitude.shape[0] - 1) * HOP_LENGTH
    if length <= 0:
        raise InvalidInput("magnitude input too short to synthesize")
    spec = magnitude.astype(np.complex128)
    wave = None
    for _ in range(iterations):
        wave = istft(ComplexSpectrogram(spec, hop=HOP_LENGTH, window_length=WIN_LENGTH, original_length=length))
        phase = np.angle(stft(wave).values)
        spec = magnitude * np.exp(1j * phase)
    return istft(ComplexSpectrogram(spec, hop=HOP_LENGTH, window_length=WIN_LENGTH, original_length=length))


def l1_mel_loss(estimate: MelSpectrogram, target: MelSpectrogram) -> float:
    """Mean absolute difference over all T*K mel cells."""
    if estimate.values.shape != target.values.shape:
        raise ShapeMismatch(
            f"operand shapes differ: {estimate.values.shape} vs {target.values.shape}"
        )
    return float(np.mean(np.abs(estimate.values - target.values)))


def crop_or_pad(w: Waveform, target_seconds: float, seed: int) -> Waveform:
    """Random fixed-length crop; shorter inputs get trailing zeros.

    The start offset for longer inputs is drawn uniformly from the valid
    range using only ``seed``, so a (clean, degraded) pair cropped with the
    same seed stays sample-aligned.
    """
    if target_seconds <= 0:
        raise InvalidInput("target_seconds must be positive")
    target = int(round(target_seconds * w.sample_rate))
    n = len(w)
    if n == target:
        return Waveform(w.samples.copy(), w.sample_rate)
    if n < target:
        return Waveform(np.pad(w.samples, (0, target - n)), w.sample_rate)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, n - target + 1))
    return Waveform(w.samples[start : start + target].copy(), w.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a RIFF PCM wav file; only 16-bit mono 16 kHz layouts are accepted."""
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        if f.getframerate() != SAMPLE_RATE:
            raise SampleRateMismatch(f"{path}: {f.getframerate()} Hz, expected {SAMPLE_RATE}")
        if f.getnchannels() != 1:
            raise ChannelMismatch(f"{path}: {f.getnchannels()} channels, expected mono")
        if f.getsampwidth() != 2:
            raise InvalidInput(f"{path}: {8 * f.getsampwidth()}-bit samples, expected 16-bit PCM")
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples)


def write_wav(path: str | Path, w: Waveform):
    """Write 16-bit PCM mono with deterministic quantization."""
    _require_16k(w)
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(ints.tobytes())
