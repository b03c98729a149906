"""Mel-domain enhancement route plus the complex-STFT baseline.

The acoustic enhancer is a DCCRN-derived encoder/decoder with an LSTM
bottleneck. In mel mode all complex-valued operations are removed and the
input convolution sees one channel; the auxiliary SSL embedding joins at the
bottleneck (concatenated with the LSTM input) or, for the ablation, along
the input feature axis. In complex-STFT mode the complex operations are
retained and the network predicts a complex ratio mask. A mel-to-waveform
vocoder backend is used only at inference; the built-in fallback is
iterative phase reconstruction.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .codec_pipeline import TorchLogMel, TransformerBlock
from .data_sim import DatasetManifest
from .errors import BackendUnavailable, InvalidInput, ShapeMismatch
from .signal_core import (
    HOP_LENGTH,
    N_FFT,
    N_MELS,
    WIN_LENGTH,
    ComplexSpectrogram,
    MelSpectrogram,
    Waveform,
    griffin_lim,
    hann_window,
    mel_spectrogram,
    mel_to_linear_power,
)
from .ssl_backend import (
    SSL_EMBED_DIM,
    LayerWeightedSum,
    SSLConditioner,
    extract_features,
    kmeans_tokenize,
    toy_ssl_backend,
    train_kmeans,
)
from . import training as tr


@dataclass
class EnhancerConfig:
    """Enhancer architecture and input wiring."""

    mode: str = "mel_real"  # or "complex_stft"
    aux_injection: str = "bottleneck"  # bottleneck | input_concat | none
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256)
    lstm_hidden: int = 256
    enhancer_arch: str = "dccrn"  # or "transformer"
    aux_features: str = "lws"  # lws | last | tokens
    primary_input: str = "mel"  # or "ssl" (maps the SSL embedding to mel directly)
    kmeans_clusters: int = 512
    transformer_dim: int = 512
    transformer_blocks: int = 12
    transformer_heads: int = 8

    def validate(self):
        if self.mode not in ("mel_real", "complex_stft"):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if self.enhancer_arch not in ("dccrn", "transformer"):
            raise InvalidInput(f"unknown enhancer_arch {self.enhancer_arch!r}")
        if self.aux_injection not in ("bottleneck", "input_concat", "none"):
            raise InvalidInput(f"unknown aux_injection {self.aux_injection!r}")
        if self.aux_injection == "input_concat" and self.mode != "mel_real":
            raise InvalidInput("input_concat aux injection is only valid in mel_real mode")
        if self.enhancer_arch == "dccrn" and len(self.encoder_channels) != 6:
            raise InvalidInput("the dccrn enhancer uses exactly 6 encoder stages")
        if self.aux_features not in ("lws", "last", "tokens"):
            raise InvalidInput(f"unknown aux_features {self.aux_features!r}")
        if self.primary_input not in ("mel", "ssl"):
            raise InvalidInput(f"unknown primary_input {self.primary_input!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerConfig":
        d = dict(d)
        if "encoder_channels" in d:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


class MelDccrn(nn.Module):
    """DCCRN-derived real-valued enhancer for [B, T, F] mel input.

    Six stride-2 frequency convolutions, an LSTM bottleneck (optionally fed
    the per-frame auxiliary embedding), and a mirrored transposed-conv
    decoder with encoder skip connections.
    """

    def __init__(self, cfg: EnhancerConfig, in_freq: int = N_MELS, aux_dim: int = 0):
        super().__init__()
        if in_freq % 64 != 0:
            raise InvalidInput(f"input feature size {in_freq} must be divisible by 64")
        channels = list(cfg.encoder_channels)
        self.in_freq = in_freq
        self.aux_dim = aux_dim
        self.encoder = nn.ModuleList()
        prev = 1
        for c in channels:
            self.encoder.append(
                nn.Sequential(
                    nn.Conv2d(prev, c, kernel_size=(5, 2), stride=(2, 1), padding=(2, 0)),
                    nn.BatchNorm2d(c),
                    nn.PReLU(),
                )
            )
            prev = c
        bottleneck_freq = in_freq // 2 ** len(channels)
        feat = channels[-1] * bottleneck_freq
        self.bottleneck_freq = bottleneck_freq
        if aux_dim:
            self.aux_proj = nn.Linear(aux_dim, feat)
        lstm_in = feat * (2 if aux_dim else 1)
        self.lstm = nn.LSTM(lstm_in, cfg.lstm_hidden, num_layers=2, batch_first=True)
        self.unbottleneck = nn.Linear(cfg.lstm_hidden, feat)
        self.decoder = nn.ModuleList()
        for i in range(len(channels) - 1, -1, -1):
            c_out = channels[i - 1] if i > 0 else 1
            block = [
                nn.ConvTranspose2d(
                    channels[i] * 2,
                    c_out,
                    kernel_size=(5, 2),
                    stride=(2, 1),
                    padding=(2, 0),
                    output_padding=(1, 0),
                )
            ]
            if i > 0:
                block += [nn.BatchNorm2d(c_out), nn.PReLU()]
            self.decoder.append(nn.Sequential(*block))
        self.out_proj = nn.Linear(in_freq, N_MELS) if in_freq != N_MELS else None

    def forward(self, mel: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        # mel: [B, T, F_in]; aux: [B, T, aux_dim] or None
        if mel.shape[2] != self.in_freq:
            raise ShapeMismatch(f"expected {self.in_freq} features, got {mel.shape[2]}")
        if (aux is not None) != bool(self.aux_dim):
            raise ShapeMismatch("auxiliary input presence does not match the model wiring")
        if aux is not None and aux.shape[1] != mel.shape[1]:
            raise ShapeMismatch(f"aux frames {aux.shape[1]} != mel frames {mel.shape[1]}")
        x = mel.transpose(1, 2)[:, None]  # [B, 1, F, T]
        skips = []
        for layer in self.encoder:
            x = F.pad(x, (1, 0))  # keep T fixed under the width-2 kernel
            x = layer(x)
            skips.append(x)
        b, c, f, t = x.shape
        h = x.permute(0, 3, 1, 2).reshape(b, t, c * f)
        if aux is not None:
            h = torch.cat([h, self.aux_proj(aux)], dim=2)
        h, _ = self.lstm(h)
        h = self.unbottleneck(h)
        x = h.reshape(b, t, c, f).permute(0, 2, 3, 1)
        for i, layer in enumerate(self.decoder):
            x = torch.cat([x, skips[-1 - i]], dim=1)
            x = layer(x)[..., 1:]  # drop the extra time step from the width-2 kernel
        out = x[:, 0].transpose(1, 2)  # [B, T, F_in]
        if self.out_proj is not None:
            out = self.out_proj(out)
        return out


class TransformerMelEnhancer(nn.Module):
    """Table-style ablation: the codec route's transformer with a regression head."""

    def __init__(self, cfg: EnhancerConfig, aux_dim: int = 0, max_frames: int = 4096):
        super().__init__()
        d = cfg.transformer_dim
        self.aux_dim = aux_dim
        self.in_proj = nn.Linear(N_MELS, d)
        if aux_dim:
            self.aux_proj = nn.Linear(aux_dim, d)
        self.pos_emb = nn.Embedding(max_frames, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.transformer_heads) for _ in range(cfg.transformer_blocks)
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, N_MELS)

    def forward(self, mel: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        if (aux is not None) != bool(self.aux_dim):
            raise ShapeMismatch("auxiliary input presence does not match the model wiring")
        x = self.in_proj(mel)
        if aux is not None:
            x = x + self.aux_proj(aux)
        x = x + self.pos_emb(torch.arange(mel.shape[1], device=mel.device))[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_norm(x))


# --- complex-STFT baseline ---------------------------------------------------


class ComplexConv2d(nn.Module):
    def __init__(self, in_total: int, out_total: int, kernel, stride, padding):
        super().__init__()
        self.real = nn.Conv2d(in_total // 2, out_total // 2, kernel, stride, padding)
        self.imag = nn.Conv2d(in_total // 2, out_total // 2, kernel, stride, padding)

    def forward(self, x):
        xr, xi = torch.chunk(x, 2, dim=1)
        real = self.real(xr) - self.imag(xi)
        imag = self.imag(xr) + self.real(xi)
        return torch.cat([real, imag], dim=1)


class ComplexConvTranspose2d(nn.Module):
    def __init__(self, in_total: int, out_total: int, kernel, stride, padding, output_padding):
        super().__init__()
        self.real = nn.ConvTranspose2d(
            in_total // 2, out_total // 2, kernel, stride, padding, output_padding
        )
        self.imag = nn.ConvTranspose2d(
            in_total // 2, out_total // 2, kernel, stride, padding, output_padding
        )

    def forward(self, x):
        xr, xi = torch.chunk(x, 2, dim=1)
        real = self.real(xr) - self.imag(xi)
        imag = self.imag(xr) + self.real(xi)
        return torch.cat([real, imag], dim=1)


class ComplexLSTM(nn.Module):
    def __init__(self, input_total: int, hidden_total: int):
        super().__init__()
        self.real = nn.LSTM(input_total // 2, hidden_total // 2, batch_first=True)
        self.imag = nn.LSTM(input_total // 2, hidden_total // 2, batch_first=True)

    def forward(self, xr, xi):
        rr, _ = self.real(xr)
        ri, _ = self.imag(xr)
        ir, _ = self.real(xi)
        ii, _ = self.imag(xi)
        return rr - ii, ri + ir


def complex_cat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ar, ai = torch.chunk(a, 2, dim=1)
    br, bi = torch.chunk(b, 2, dim=1)
    return torch.cat([ar, br, ai, bi], dim=1)


class ComplexDccrn(nn.Module):
    """Complex encoder/decoder with a complex LSTM bottleneck; mask-based output.

    Operates on the 512 non-DC bins of the 64 ms / 10 ms STFT; the predicted
    magnitude mask (tanh) and phase rotation are applied to the input
    spectrogram and the DC bin is passed through untouched.
    """

    def __init__(self, cfg: EnhancerConfig, in_freq: int = N_FFT // 2):
        super().__init__()
        channels = [2] + [max(2, c) for c in cfg.encoder_channels]
        self.in_freq = in_freq
        self.encoder = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.encoder.append(
                nn.Sequential(
                    ComplexConv2d(cin, cout, (5, 2), (2, 1), (2, 0)),
                    nn.BatchNorm2d(cout),
                    nn.PReLU(),
                )
            )
        freq = in_freq // 2 ** (len(channels) - 1)
        feat = channels[-1] * freq  # real+imag interleaved as channel halves
        self.lstm = ComplexLSTM(feat, max(4, cfg.lstm_hidden * 2))
        self.back = nn.Linear(max(4, cfg.lstm_hidden * 2) // 2, feat // 2)
        self.decoder = nn.ModuleList()
        rev = list(reversed(channels))
        for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
            block = [ComplexConvTranspose2d(cin * 2, cout, (5, 2), (2, 1), (2, 0), (1, 0))]
            if i < len(rev) - 2:
                block += [nn.BatchNorm2d(cout), nn.PReLU()]
            self.decoder.append(nn.Sequential(*block))

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        # spec: complex [B, F=513, T] -> complex [B, 513, T]
        real = spec.real[:, 1:, :]
        imag = spec.imag[:, 1:, :]
        x = torch.stack([real, imag], dim=1)  # [B, 2, F', T]
        skips = []
        for layer in self.encoder:
            x = F.pad(x, (1, 0))
            x = layer(x)
            skips.append(x)
        b, c, f, t = x.shape
        xr, xi = torch.chunk(x, 2, dim=1)
        hr = xr.permute(0, 3, 1, 2).reshape(b, t, c // 2 * f)
        hi = xi.permute(0, 3, 1, 2).reshape(b, t, c // 2 * f)
        hr, hi = self.lstm(hr, hi)
        hr = self.back(hr).reshape(b, t, c // 2, f).permute(0, 2, 3, 1)
        hi = self.back(hi).reshape(b, t, c // 2, f).permute(0, 2, 3, 1)
        x = torch.cat([hr, hi], dim=1)
        for i, layer in enumerate(self.decoder):
            x = complex_cat(x, skips[-1 - i])
            x = layer(x)[..., 1:]
        mask_r, mask_i = x[:, 0], x[:, 1]  # [B, F', T]
        mask_mag = torch.tanh(torch.sqrt(mask_r**2 + mask_i**2 + 1e-10))
        mask_phase = torch.atan2(mask_i, mask_r + 1e-10)
        in_mag = torch.sqrt(real**2 + imag**2 + 1e-10)
        in_phase = torch.atan2(imag, real + 1e-10)
        out_mag = mask_mag * in_mag
        out_phase = in_phase + mask_phase
        enhanced = torch.complex(out_mag * torch.cos(out_phase), out_mag * torch.sin(out_phase))
        return torch.cat([spec[:, :1, :], enhanced], dim=1)


class StftBaseline(nn.Module):
    """Waveform-to-waveform wrapper: STFT, complex enhancement, iSTFT."""

    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        self.net = ComplexDccrn(cfg)
        self.register_buffer("window", torch.from_numpy(hann_window(WIN_LENGTH)).float())

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        spec = torch.stft(
            wave,
            n_fft=N_FFT,
            hop_length=HOP_LENGTH,
            win_length=WIN_LENGTH,
            window=self.window,
            center=True,
            pad_mode="reflect",
            return_complex=True,
        )
        enhanced = self.net(spec)
        return torch.istft(
            enhanced,
            n_fft=N_FFT,
            hop_length=HOP_LENGTH,
            win_length=WIN_LENGTH,
            window=self.window,
            center=True,
            length=wave.shape[-1],
        )


# --- functional op wrappers ----------------------------------------------------


def _build_mel_enhancer(cfg: EnhancerConfig, aux_dim: int, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    in_freq = N_MELS
    if cfg.aux_injection == "input_concat":
        in_freq = N_MELS * 2  # aux projected to 128 and stacked along features
    if cfg.enhancer_arch == "transformer":
        return TransformerMelEnhancer(cfg, aux_dim=aux_dim if cfg.aux_injection == "bottleneck" else 0)
    return MelDccrn(cfg, in_freq=in_freq, aux_dim=aux_dim if cfg.aux_injection == "bottleneck" else 0)


def enhance_mel(
    noisy: MelSpectrogram,
    aux: np.ndarray | None,
    cfg: EnhancerConfig,
    training: bool = False,
    model: nn.Module | None = None,
    aux_input_proj: nn.Module | None = None,
    seed: int = 0,
) -> MelSpectrogram:
    """Run the mel-domain enhancer; builds a seeded model when none is supplied."""
    cfg.validate()
    if cfg.mode != "mel_real":
        raise InvalidInput("enhance_mel requires mel_real mode")
    if (aux is None) and cfg.aux_injection != "none":
        raise ShapeMismatch(f"aux_injection={cfg.aux_injection} requires an auxiliary input")
    mel_t = torch.from_numpy(noisy.values.astype(np.float32))[None]
    aux_t = None
    if cfg.aux_injection != "none":
        aux_arr = np.asarray(aux, dtype=np.float32)
        if aux_arr.ndim != 2 or aux_arr.shape[0] != noisy.frames:
            raise ShapeMismatch(
                f"aux shape {aux_arr.shape} does not align with {noisy.frames} mel frames"
            )
        aux_t = torch.from_numpy(aux_arr)[None]
    if model is None:
        aux_dim = aux_t.shape[2] if aux_t is not None else 0
        model = _build_mel_enhancer(cfg, aux_dim, seed=seed)
        if cfg.aux_injection == "input_concat":
            torch.manual_seed(seed + 1)
            aux_input_proj = nn.Linear(aux_t.shape[2], N_MELS)
    model.train(training)
    with torch.set_grad_enabled(training):
        if cfg.aux_injection == "input_concat":
            stacked = torch.cat([mel_t, aux_input_proj(aux_t)], dim=2)
            out = model(stacked, None)
        elif cfg.aux_injection == "bottleneck":
            out = model(mel_t, aux_t)
        else:
            out = model(mel_t, None)
    values = out[0].detach().numpy().astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInput("enhancer produced non-finite outputs")
    return MelSpectrogram(values)


def enhance_stft(
    noisy: ComplexSpectrogram,
    cfg: EnhancerConfig,
    training: bool = False,
    model: ComplexDccrn | None = None,
    seed: int = 0,
) -> ComplexSpectrogram:
    """Complex ratio-mask enhancement of a [T x F] spectrogram."""
    cfg.validate()
    if cfg.mode != "complex_stft":
        raise InvalidInput("enhance_stft requires complex_stft mode")
    if model is None:
        torch.manual_seed(seed)
        model = ComplexDccrn(cfg)
    model.train(training)
    spec_t = torch.from_numpy(noisy.values.T.astype(np.complex64))[None]
    with torch.set_grad_enabled(training):
        out = model(spec_t)
    values = out[0].numpy().T.astype(np.complex128)
    if not np.all(np.isfinite(values.real)) or not np.all(np.isfinite(values.imag)):
        raise InvalidInput("baseline produced non-finite outputs")
    return ComplexSpectrogram(
        values, hop=noisy.hop, window_length=noisy.window_length, n_fft=noisy.n_fft,
        original_length=noisy.original_length,
    )


# --- vocoder backends ----------------------------------------------------------


class VocoderBackend(Protocol):
    name: str

    def synthesize(self, mel: MelSpectrogram) -> Waveform: ...


class GriffinLimVocoder:
    """Fallback vocoder: filterbank pseudo-inverse + iterative phase reconstruction."""

    name = "griffin-lim"

    def __init__(self, iterations: int = 60):
        self.iterations = iterations

    def synthesize(self, mel: MelSpectrogram) -> Waveform:
        magnitude = np.sqrt(mel_to_linear_power(mel))
        return griffin_lim(magnitude, iterations=self.iterations)


class HifiGANAdapter:
    """Hook for an external neural vocoder checkpoint (inference only).

    Contract: ``loader(artifact_dir)`` returns an object with
    ``synthesize(mel: [T x 128] log-mel at this toolkit's convention) ->
    16 kHz waveform``. Raises BackendUnavailable when nothing is installed.
    """

    name = "hifigan"

    def __init__(self, loader=None):
        cache = os.environ.get("RESYNTH_CACHE")
        self._artifact = Path(cache) / "hifigan" if cache else None
        self._impl = None
        if loader is not None and self._artifact is not None and self._artifact.exists():
            self._impl = loader(self._artifact)

    def synthesize(self, mel: MelSpectrogram) -> Waveform:
        if self._impl is None:
            raise BackendUnavailable(
                "no vocoder artifact installed (set RESYNTH_CACHE and provide a loader)"
            )
        return self._impl.synthesize(mel)


def vocoder_synthesize(mel: MelSpectrogram, backend: VocoderBackend | None = None) -> Waveform:
    """Mel to waveform through a backend; defaults to the Griffin-Lim fallback."""
    backend = backend or GriffinLimVocoder()
    wave = backend.synthesize(mel)
    expected = mel.frames * HOP_LENGTH
    if abs(len(wave) - expected) > HOP_LENGTH:
        raise BackendUnavailable(
            f"backend {backend.name} returned {len(wave)} samples for {mel.frames} frames"
        )
    return wave


# --- trainable bundle and training -------------------------------------------


class VocoderModel(nn.Module):
    """Enhancer plus (optionally) the trainable aux path: layer weights,
    token embedding for the k-means ablation, and the SSL conditioner."""

    def __init__(self, cfg: EnhancerConfig, n_ssl_layers: int = 25):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        uses_aux = cfg.aux_injection != "none" or cfg.primary_input == "ssl"
        self.conditioner = SSLConditioner() if uses_aux else None
        self.layer_weights = (
            LayerWeightedSum(n_ssl_layers) if uses_aux and cfg.aux_features == "lws" else None
        )
        self.token_emb = (
            nn.Embedding(cfg.kmeans_clusters, 1024)
            if uses_aux and cfg.aux_features == "tokens"
            else None
        )
        self.ssl_to_mel = nn.Linear(SSL_EMBED_DIM, N_MELS) if cfg.primary_input == "ssl" else None
        aux_dim = SSL_EMBED_DIM if (uses_aux and cfg.aux_injection == "bottleneck") else 0
        self.aux_input_proj = (
            nn.Linear(SSL_EMBED_DIM, N_MELS) if cfg.aux_injection == "input_concat" else None
        )
        in_freq = N_MELS * 2 if cfg.aux_injection == "input_concat" else N_MELS
        if cfg.enhancer_arch == "transformer":
            self.enhancer = TransformerMelEnhancer(cfg, aux_dim=aux_dim)
        else:
            self.enhancer = MelDccrn(cfg, in_freq=in_freq, aux_dim=aux_dim)

    def aux_embedding(self, ssl_input: torch.Tensor, frames: int) -> torch.Tensor:
        """[B, L, T', 1024] stack (or [B, T'] tokens) -> [B, frames, 256]."""
        if self.token_emb is not None:
            fused = self.token_emb(ssl_input)
        elif self.layer_weights is not None:
            fused = self.layer_weights(ssl_input)
        else:
            fused = ssl_input[:, -1] if ssl_input.dim() == 4 else ssl_input
        return self.conditioner(fused, frames)

    def forward(self, mel: torch.Tensor, ssl_input: torch.Tensor | None) -> torch.Tensor:
        cfg = self.cfg
        aux = None
        if self.conditioner is not None:
            if ssl_input is None:
                raise ShapeMismatch("model wiring expects an SSL input")
            aux = self.aux_embedding(ssl_input, mel.shape[1])
        primary = mel
        if cfg.primary_input == "ssl":
            primary = self.ssl_to_mel(aux)
            if cfg.aux_injection == "none":
                aux = None
        if cfg.aux_injection == "input_concat":
            primary = torch.cat([primary, self.aux_input_proj(aux)], dim=2)
            aux = None
        elif cfg.aux_injection == "none":
            aux = None
        return self.enhancer(primary, aux)


def _ssl_stack_batch(waves: list[Waveform], cfg: EnhancerConfig, kmeans_centroids):
    """Per-item toy-SSL features for a batch (None when the config needs no aux)."""
    if cfg.aux_injection == "none" and cfg.primary_input != "ssl":
        return None
    backend = toy_ssl_backend()
    stacks = [extract_features(w, backend).layers for w in waves]
    if cfg.aux_features == "tokens":
        tokens = [
            kmeans_tokenize(weights_mean(stack), kmeans_centroids) for stack in stacks
        ]
        return torch.from_numpy(np.stack(tokens))
    return torch.from_numpy(np.stack(stacks))


def weights_mean(stack: np.ndarray) -> np.ndarray:
    return stack.mean(axis=0)


def _fit_kmeans_for_ablation(manifest, rows, cfg, train_cfg):
    backend = toy_ssl_backend()
    frames = []
    for row in rows[: min(8, len(rows))]:
        clean, degraded = tr.load_cropped_pair(manifest, row, train_cfg.crop_seconds, 0)
        frames.append(weights_mean(extract_features(degraded, backend).layers))
    pool = np.concatenate(frames)
    k = min(cfg.kmeans_clusters, max(2, len(pool) // 4))
    return train_kmeans(pool, k=k, iters=10, seed=train_cfg.seed), k


def train_vocoder(
    manifest: DatasetManifest,
    cfg: EnhancerConfig,
    train_cfg: tr.TrainConfig,
    resume_from: str | None = None,
) -> tr.Checkpoint:
    """Adam on the mel L1 objective (mel mode) or waveform L1 (baseline mode).

    Trains the enhancer together with the conditioner and layer weights; any
    vocoder backend stays untouched (it is inference-only). Logs per-epoch
    train/valid losses and keeps the best-validation checkpoint.
    """
    cfg.validate()
    train_rows = tr.split_rows_or_raise(manifest, "train")
    valid_rows = tr.split_rows_or_raise(manifest, "valid")
    out_dir = Path(train_cfg.out_dir) if train_cfg.out_dir else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = "baseline" if cfg.mode == "complex_stft" else "vocoder"

    kmeans_centroids = None
    extra_static: dict = {}
    if cfg.mode == "mel_real" and cfg.aux_features == "tokens" and cfg.aux_injection != "none":
        kmeans_centroids, k = _fit_kmeans_for_ablation(manifest, train_rows, cfg, train_cfg)
        cfg.kmeans_clusters = k
        extra_static["kmeans_centroids"] = kmeans_centroids

    torch.manual_seed(tr.epoch_seed(train_cfg.seed, -1))
    model: nn.Module
    if cfg.mode == "complex_stft":
        model = StftBaseline(cfg)
    else:
        model = VocoderModel(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas)
    start_epoch = 0
    best_valid = float("inf")
    if resume_from is not None:
        ckpt = tr.load_checkpoint(resume_from, expected_pipeline=pipeline)
        model.load_state_dict(ckpt.payload["model_state"])
        optimizer.load_state_dict(ckpt.payload["optimizer_state"])
        start_epoch = ckpt.epoch + 1
        best_valid = ckpt.payload["extra"].get("best_valid", float("inf"))
        if "kmeans_centroids" in ckpt.payload["extra"]:
            kmeans_centroids = ckpt.payload["extra"]["kmeans_centroids"]
            extra_static["kmeans_centroids"] = kmeans_centroids

    mel_fn = TorchLogMel()
    logger = tr.LossLogger(out_dir / "losses.csv", ["loss"])
    ckpt_path = out_dir / "checkpoint.pt"
    best_path = out_dir / "checkpoint_best.pt"

    def batch_loss(rows, epoch):
        pairs = tr.load_pairs(manifest, rows, train_cfg.crop_seconds, train_cfg.seed, epoch, train_cfg.workers)
        clean_w = torch.from_numpy(np.stack([p[0].samples for p in pairs]).astype(np.float32))
        deg_w = torch.from_numpy(np.stack([p[1].samples for p in pairs]).astype(np.float32))
        if cfg.mode == "complex_stft":
            enhanced = model(deg_w)
            return (enhanced - clean_w).abs().mean()
        with torch.no_grad():
            mel_d = mel_fn(deg_w)
            mel_c = mel_fn(clean_w)
        ssl_input = _ssl_stack_batch([p[1] for p in pairs], cfg, kmeans_centroids)
        enhanced = model(mel_d, ssl_input)
        return (enhanced - mel_c).abs().mean()

    last = None
    for epoch in range(start_epoch, train_cfg.epochs):
        torch.manual_seed(tr.epoch_seed(train_cfg.seed, epoch))
        model.train()
        order = tr.epoch_order(len(train_rows), train_cfg.seed, epoch)
        train_losses = []
        for step, batch_idx in enumerate(tr.iter_batches(order, train_cfg.batch_size)):
            loss = batch_loss([train_rows[i] for i in batch_idx], epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            tr.ensure_finite(float(loss.item()), str(out_dir), {"epoch": epoch, "step": step})
            train_losses.append(float(loss.item()))
        logger.log(epoch, "train", loss=float(np.mean(train_losses)))

        model.eval()
        with torch.no_grad():
            valid_losses = [
                float(batch_loss([valid_rows[i] for i in batch_idx], -1).item())
                for batch_idx in tr.iter_batches(np.arange(len(valid_rows)), train_cfg.batch_size)
            ]
        valid_loss = float(np.mean(valid_losses))
        logger.log(epoch, "valid", loss=valid_loss)

        extra = {"best_valid": best_valid, **extra_static}
        if valid_loss < best_valid:
            best_valid = valid_loss
            extra["best_valid"] = best_valid
            tr.save_checkpoint(
                best_path, pipeline, cfg.to_dict(), model.state_dict(), optimizer.state_dict(),
                epoch, train_cfg.to_dict(), extra,
            )
        last = tr.save_checkpoint(
            ckpt_path, pipeline, cfg.to_dict(), model.state_dict(), optimizer.state_dict(),
            epoch, train_cfg.to_dict(), extra,
        )
    if last is None:
        raise InvalidInput("epochs must be > start epoch; nothing was trained")
    return last


def load_vocoder_model(checkpoint: str | Path, pipeline: str = "vocoder"):
    """Rebuild the trained bundle (and centroids, for the tokens ablation)."""
    ckpt = tr.load_checkpoint(checkpoint, expected_pipeline=pipeline)
    cfg = EnhancerConfig.from_dict(ckpt.payload["config"])
    model = StftBaseline(cfg) if cfg.mode == "complex_stft" else VocoderModel(cfg)
    model.load_state_dict(ckpt.payload["model_state"])
    model.eval()
    centroids = ckpt.payload["extra"].get("kmeans_centroids")
    return model, cfg, centroids, ckpt


def enhance_waveform_vocoder(
    noisy: Waveform,
    model: nn.Module,
    cfg: EnhancerConfig,
    kmeans_centroids=None,
    vocoder: VocoderBackend | None = None,
) -> Waveform:
    """Full inference path for either mode; deterministic given a checkpoint."""
    model.eval()
    with torch.no_grad():
        if cfg.mode == "complex_stft":
            wave = model(torch.from_numpy(noisy.samples.astype(np.float32))[None])[0]
            return Waveform(wave.numpy().astype(np.float64))
        mel = mel_spectrogram(noisy)
        mel_t = torch.from_numpy(mel.values.astype(np.float32))[None]
        ssl_input = _ssl_stack_batch([noisy], cfg, kmeans_centroids)
        enhanced = model(mel_t, ssl_input)[0].numpy().astype(np.float64)
    return vocoder_synthesize(MelSpectrogram(enhanced), vocoder)
