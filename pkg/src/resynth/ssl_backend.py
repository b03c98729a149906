"""SSL feature stacks behind a backend interface, plus their reductions.

The built-in toy backend emits deterministic 25-layer x 1024-dim stacks at
50 Hz from a seeded random-projection cascade, so every downstream component
(learnable weighted sum, conditioner, k-means tokenizer) can be exercised
without any external model artifact. An adapter hook exists for wrapping a
real pre-trained checkpoint when one is available.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .errors import BackendUnavailable, InvalidInput, ShapeMismatch
from .signal_core import SAMPLE_RATE, Waveform, hann_window

SSL_DIM = 1024
SSL_FRAME_RATE = 50
SSL_HOP = SAMPLE_RATE // SSL_FRAME_RATE  # 320 samples
TOY_SSL_LAYERS = 25
SSL_EMBED_DIM = 256


@dataclass
class SSLFeatureStack:
    """[L_layers x T' x 1024] features at 50 Hz."""

    layers: np.ndarray
    frame_rate: int = SSL_FRAME_RATE

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float32)
        if self.layers.ndim != 3 or self.layers.shape[2] != SSL_DIM:
            raise ShapeMismatch(f"expected [L x T' x {SSL_DIM}], got {self.layers.shape}")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def frames(self) -> int:
        return self.layers.shape[1]


class SSLBackend(Protocol):
    """Adapter contract: 16 kHz waveform in, [L x T' x 1024] at 50 Hz out."""

    name: str

    def extract(self, w: Waveform) -> SSLFeatureStack: ...


def ssl_frame_count(n_samples: int) -> int:
    """50 Hz frame count; off by at most one frame from half the mel count."""
    return max(1, int(round(n_samples / SSL_HOP)))


class ToySSLBackend:
    """Deterministic stand-in for a large pre-trained speech encoder.

    Band energies are lifted to 1024 dims by a fixed seeded projection, then
    cascaded through cheap per-layer mixing (time and channel rolls under a
    tanh), producing 25 distinct layers like transformer block outputs.
    """

    name = "toy-ssl"
    _BANDS = 64
    _WIN = 640

    def __init__(self):
        rng = np.random.default_rng(0x55513B)
        self._proj = (rng.standard_normal((self._BANDS, SSL_DIM)) / np.sqrt(self._BANDS)).astype(
            np.float32
        )
        self._gains = rng.uniform(0.3, 0.7, size=(TOY_SSL_LAYERS - 1, 3)).astype(np.float32)
        self._time_shifts = rng.integers(1, 4, size=TOY_SSL_LAYERS - 1)
        self._chan_shifts = rng.integers(1, 257, size=TOY_SSL_LAYERS - 1)
        self._window = hann_window(self._WIN).astype(np.float32)

    def _band_features(self, samples: np.ndarray) -> np.ndarray:
        n_frames = ssl_frame_count(len(samples))
        needed = (n_frames - 1) * SSL_HOP + self._WIN
        x = np.pad(samples.astype(np.float32), (self._WIN // 2, 0))
        if len(x) < needed:
            x = np.pad(x, (0, needed - len(x)))
        idx = np.arange(self._WIN)[None, :] + SSL_HOP * np.arange(n_frames)[:, None]
        frames = x[idx] * self._window
        power = np.abs(np.fft.rfft(frames, n=1024, axis=1)) ** 2
        bands = power[:, :512].reshape(n_frames, self._BANDS, 8).mean(axis=2)
        return (np.log(bands + 1e-5) + 8.0) / 4.0

    def extract(self, w: Waveform) -> SSLFeatureStack:
        if w.sample_rate != SAMPLE_RATE:
            raise BackendUnavailable(f"toy backend requires {SAMPLE_RATE} Hz input")
        feats = self._band_features(w.samples)
        layers = np.empty((TOY_SSL_LAYERS, feats.shape[0], SSL_DIM), dtype=np.float32)
        h = np.tanh(feats @ self._proj)
        layers[0] = h
        for l in range(1, TOY_SSL_LAYERS):
            a, b, c = self._gains[l - 1]
            h = np.tanh(
                a * h
                + b * np.roll(h, int(self._time_shifts[l - 1]), axis=0)
                + c * np.roll(h, int(self._chan_shifts[l - 1]), axis=1)
            )
            layers[l] = h
        return SSLFeatureStack(layers)


class ExternalSSLAdapter:
    """Hook for a real pre-trained SSL checkpoint.

    Looks for an artifact under $RESYNTH_CACHE/ssl/; loading is delegated to
    a user-supplied callable so this package never depends on the upstream
    model code. Raises BackendUnavailable when nothing is installed.
    """

    name = "external-ssl"

    def __init__(self, loader=None):
        cache = os.environ.get("RESYNTH_CACHE")
        self._artifact = Path(cache) / "ssl" if cache else None
        self._loader = loader

    def extract(self, w: Waveform) -> SSLFeatureStack:
        if self._loader is None or self._artifact is None or not self._artifact.exists():
            raise BackendUnavailable(
                "no external SSL artifact installed (set RESYNTH_CACHE and provide a loader)"
            )
        return SSLFeatureStack(np.asarray(self._loader(self._artifact, w), dtype=np.float32))


_TOY_BACKEND: ToySSLBackend | None = None


def toy_ssl_backend() -> ToySSLBackend:
    global _TOY_BACKEND
    if _TOY_BACKEND is None:
        _TOY_BACKEND = ToySSLBackend()
    return _TOY_BACKEND


def extract_features(w: Waveform, backend: SSLBackend | None = None) -> SSLFeatureStack:
    """Run an SSL backend; defaults to the built-in toy backend."""
    backend = backend or toy_ssl_backend()
    return backend.extract(w)


def weighted_sum(stack: SSLFeatureStack | np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Softmax-weighted reduction over layers: sum_l softmax(logits)_l layer_l."""
    layers = stack.layers if isinstance(stack, SSLFeatureStack) else np.asarray(stack)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or len(logits) != layers.shape[0]:
        raise ShapeMismatch(f"{len(logits)} logits for {layers.shape[0]} layers")
    z = logits - logits.max()
    w = np.exp(z) / np.exp(z).sum()
    return np.tensordot(w, layers, axes=(0, 0))


class LayerWeightedSum(nn.Module):
    """Trainable layer weighting (softmax over per-layer logits)."""

    def __init__(self, n_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_layers))

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        # stack: [L, T', D] or [B, L, T', D]
        w = torch.softmax(self.logits, dim=0)
        if stack.dim() == 3:
            return torch.einsum("l,ltd->td", w, stack)
        return torch.einsum("l,bltd->btd", w, stack)


class SSLConditioner(nn.Module):
    """Three 1-d conv layers reducing 1024-dim features to a 256-dim embedding.

    Nearest-neighbor x2 upsampling before the last layer lifts the 50 Hz
    stack to the 100 Hz mel frame rate; the output is then padded or trimmed
    by at most one frame to match the paired mel length. Dropout (0.5) is
    active only in training mode.
    """

    def __init__(self, channels: tuple[int, int] = (512, 384), kernel: int = 5, dropout: float = 0.5):
        super().__init__()
        c1, c2 = channels
        pad = kernel // 2
        self.conv1 = nn.Conv1d(SSL_DIM, c1, kernel, padding=pad)
        self.norm1 = nn.InstanceNorm1d(c1, affine=True)
        self.conv2 = nn.Conv1d(c1, c2, kernel, padding=pad)
        self.norm2 = nn.InstanceNorm1d(c2, affine=True)
        self.conv3 = nn.Conv1d(c2, SSL_EMBED_DIM, kernel, padding=pad)
        self.act = nn.ReLU()
        self.drop = nn.Dropout(dropout)

    def forward(self, features: torch.Tensor, out_frames: int) -> torch.Tensor:
        # features: [B, T', 1024] -> [B, out_frames, 256]
        x = features.transpose(1, 2)
        x = self.drop(self.act(self.norm1(self.conv1(x))))
        x = self.drop(self.act(self.norm2(self.conv2(x))))
        x = torch.repeat_interleave(x, 2, dim=2)
        x = self.conv3(x)
        t = x.shape[2]
        if t < out_frames:
            x = torch.nn.functional.pad(x, (0, out_frames - t), mode="replicate")
        elif t > out_frames:
            x = x[:, :, :out_frames]
        return x.transpose(1, 2)


def ssl_condition(
    features: np.ndarray,
    out_frames: int,
    training: bool = False,
    conditioner: SSLConditioner | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Functional conditioner entry point; builds a seeded module when none is given."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != SSL_DIM:
        raise ShapeMismatch(f"expected [T' x {SSL_DIM}], got {features.shape}")
    if conditioner is None:
        torch.manual_seed(seed)
        conditioner = SSLConditioner()
    conditioner.train(training)
    with torch.set_grad_enabled(training):
        out = conditioner(torch.from_numpy(features)[None], out_frames)
    return out[0].detach().numpy()


def train_kmeans(features: np.ndarray, k: int = 512, iters: int = 20, seed: int = 0) -> np.ndarray:
    """Plain Lloyd iterations with seeded initialization from data rows."""
    features = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise InvalidInput("k must be >= 1")
    if len(features) < k:
        raise InvalidInput(f"need at least k={k} frames, got {len(features)}")
    rng = np.random.default_rng(seed)
    centroids = features[rng.choice(len(features), size=k, replace=False)].copy()
    for _ in range(iters):
        assign = kmeans_tokenize(features, centroids)
        for j in range(k):
            members = features[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids


def kmeans_tokenize(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per frame (Euclidean); ties break to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise InvalidInput("centroid matrix must be non-empty [K x D]")
    if features.shape[1] != centroids.shape[1]:
        raise ShapeMismatch(f"feature dim {features.shape[1]} != centroid dim {centroids.shape[1]}")
    out = np.empty(len(features), dtype=np.int64)
    for start in range(0, len(features), 4096):
        chunk = features[start : start + 4096]
        d2 = np.sum((chunk[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        out[start : start + 4096] = np.argmin(d2, axis=1)
    return out
