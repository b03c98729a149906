"""Code-token route: toy RVQ codec, layer-wise token-prediction transformer,
and the full loss system (token CE, Gumbel-softmax entry loss, PCA-neighbor
label smoothing).

The codec backend is an encoder / residual-quantizer / decoder triple frozen
during enhancer training. The enhancer predicts clean code tokens level by
level from the degraded encoder embedding plus a mel auxiliary input, with
teacher forcing on the lower levels during training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data_sim import DatasetManifest, mix_noise, sample_scene, simulate_rir, apply_reverb
from .errors import (
    BackendUnavailable,
    InvalidInput,
    InvalidToken,
    ShapeMismatch,
)
from .signal_core import (
    HOP_LENGTH,
    MEL_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    MelSpectrogram,
    Waveform,
    griffin_lim,
    hann_window,
    mel_filterbank,
    mel_spectrogram,
    mel_to_linear_power,
)
from . import training as tr
from .toydata import make_noise_clip

CODEC_HOP = 320  # x320 downsampling -> 50 Hz
CODEC_DIM = 128
CODEC_LEVELS = 8
CODEC_VOCAB = 1024


@dataclass
class CodebookSet:
    """Per-level quantizer codebooks, each [V x D]."""

    levels: list[np.ndarray]

    def __post_init__(self):
        self.levels = [np.asarray(b, dtype=np.float32) for b in self.levels]
        shapes = {b.shape for b in self.levels}
        if len(shapes) != 1:
            raise ShapeMismatch(f"codebook levels disagree on shape: {shapes}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def vocab(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


@dataclass
class CodeTokenGrid:
    """[N_q x T_c] integer tokens at 50 Hz."""

    tokens: np.ndarray
    frame_rate: int = SAMPLE_RATE // CODEC_HOP

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ShapeMismatch(f"expected [N_q x T_c], got {self.tokens.shape}")


@dataclass
class CodecEmbedding:
    """[T_c x D] encoder output before quantization."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"expected [T_c x D], got {self.values.shape}")


def rvq_quantize(emb: CodecEmbedding | np.ndarray, books: CodebookSet):
    """Residual vector quantization against frozen codebooks.

    Level q assigns the nearest entry to the running residual; the quantized
    output is the sum of selected entries. Returns (grid, quantized,
    residuals) where residuals[q] is the residual after subtracting levels
    0..q. When every level offers a zero entry (as the toy codec's books do),
    the residual norm is non-increasing in q.
    """
    z = emb.values if isinstance(emb, CodecEmbedding) else np.asarray(emb, dtype=np.float32)
    if z.ndim != 2 or z.shape[1] != books.dim:
        raise ShapeMismatch(f"embedding {z.shape} does not match codebook dim {books.dim}")
    t = z.shape[0]
    tokens = np.zeros((books.n_levels, t), dtype=np.int64)
    quantized = np.zeros_like(z)
    residuals = np.zeros((books.n_levels, t, books.dim), dtype=np.float32)
    residual = z.astype(np.float64)
    for q, book in enumerate(books.levels):
        book64 = book.astype(np.float64)
        d2 = (
            np.sum(residual**2, axis=1, keepdims=True)
            - 2.0 * residual @ book64.T
            + np.sum(book64**2, axis=1)[None, :]
        )
        idx = np.argmin(d2, axis=1)
        tokens[q] = idx
        residual = residual - book64[idx]
        quantized += book[idx]
        residuals[q] = residual.astype(np.float32)
    return CodeTokenGrid(tokens), quantized, residuals


class TorchLogMel(nn.Module):
    """Differentiable log-mel matching the numpy extractor's convention."""

    def __init__(self):
        super().__init__()
        self.register_buffer("window", torch.from_numpy(hann_window(1024)).float())
        self.register_buffer("fb", torch.from_numpy(mel_filterbank()).float())

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        # wave: [B, L] -> [B, T, 128]
        spec = torch.stft(
            wave,
            n_fft=1024,
            hop_length=HOP_LENGTH,
            win_length=1024,
            window=self.window,
            center=True,
            pad_mode="reflect",
            return_complex=True,
        )
        power = spec.abs() ** 2
        mel = torch.einsum("bft,mf->bmt", power, self.fb)
        return torch.log(torch.clamp(mel, min=MEL_FLOOR)).transpose(1, 2)


class CodecBackend(Protocol):
    """Adapter contract for pluggable codec artifacts."""

    def encode(self, w: Waveform) -> tuple[CodecEmbedding, CodeTokenGrid]: ...

    def decode(self, tokens: CodeTokenGrid) -> Waveform: ...

    def codebooks(self) -> CodebookSet: ...


class ToyCodec(nn.Module):
    """Small mel-fronted codec with residual vector quantization.

    The encoder stacks the 10 ms log-mel front-end (a strided windowed
    transform, x160) with a stride-2 convolution, reaching the x320 / 50 Hz
    token rate with 128-dim embeddings quantized by 8 levels of 1024 entries.
    The decoder regenerates 100 Hz mel frames from the quantized embedding;
    waveforms are restored by iterative phase reconstruction. Good enough to
    close the loop at desk scale; never meant to compete with a production
    codec.
    """

    GL_ITERATIONS = 80

    def __init__(
        self,
        dim: int = CODEC_DIM,
        n_levels: int = CODEC_LEVELS,
        vocab: int = CODEC_VOCAB,
        width: int = 256,
    ):
        super().__init__()
        self.dim = dim
        self.n_levels = n_levels
        self.vocab = vocab
        self.width = width
        self.mel_fn = TorchLogMel()
        self.encoder = nn.Sequential(
            nn.Conv1d(N_MELS, width, 5, padding=2),
            nn.ELU(),
            nn.Conv1d(width, width, 5, stride=2, padding=2),
            nn.ELU(),
            nn.Conv1d(width, dim, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose1d(dim, width, 4, stride=2, padding=1),
            nn.ELU(),
            nn.Conv1d(width, width, 5, padding=2),
            nn.ELU(),
            nn.Conv1d(width, N_MELS, 5, padding=2),
        )
        books = torch.randn(n_levels, vocab, dim) * 0.3
        # entry 0 of every level is pinned to zero so quantizing can never push
        # a residual away: ||r - nearest|| <= ||r - 0|| = ||r||
        books[:, 0, :] = 0.0
        self.books = nn.Parameter(books)

    def repin_zero_entry(self):
        with torch.no_grad():
            self.books[:, 0, :] = 0.0

    @torch.no_grad()
    def init_codebooks_from(self, wave: torch.Tensor, seed: int = 0):
        """Seed codebook entries from actual encoder residuals (one batch).

        Vastly speeds up pretraining versus random entries: each level's
        vocabulary starts on the scale and support of the residuals it must
        quantize. Entry 0 stays pinned to zero.
        """
        gen = torch.Generator().manual_seed(seed)
        z = self.encode_tensor(wave).reshape(-1, self.dim)
        residual = z
        for q in range(self.n_levels):
            picks = torch.randint(0, residual.shape[0], (self.vocab,), generator=gen)
            entries = residual[picks] * (1.0 + 0.05 * torch.randn(self.vocab, self.dim, generator=gen))
            entries[0] = 0.0
            self.books[q] = entries
            d2 = torch.cdist(residual[None], self.books[q][None])[0]
            residual = residual - self.books[q][d2.argmin(dim=1)]

    # --- torch paths -----------------------------------------------------

    def _pad(self, wave: torch.Tensor) -> torch.Tensor:
        l = wave.shape[-1]
        target = int(math.ceil(l / CODEC_HOP)) * CODEC_HOP
        if target != l:
            wave = F.pad(wave, (0, target - l))
        return wave

    def encode_tensor(self, wave: torch.Tensor) -> torch.Tensor:
        """[B, L] -> [B, T_c, D] pre-quantization embeddings."""
        wave = self._pad(wave)
        mel = self.mel_fn(wave)[:, : wave.shape[-1] // HOP_LENGTH, :]  # [B, 2 T_c, 128]
        return self.encoder(mel.transpose(1, 2)).transpose(1, 2)

    def quantize_tensor(
        self, z: torch.Tensor, n_active: int | None = None, collect_residuals: bool = False
    ):
        """Straight-through RVQ: returns (z_st, tokens [B, N_q, T], vq_loss).

        ``n_active`` limits the levels summed into the output; all levels
        always contribute to the commitment losses and the token grid. With
        ``collect_residuals`` the per-level residual inputs are returned too
        (used by dead-entry replacement during pretraining).
        """
        residual = z
        quantized = torch.zeros_like(z)
        tokens = []
        residual_inputs = []
        vq_loss = z.new_zeros(())
        n_active = self.n_levels if n_active is None else n_active
        for q in range(self.n_levels):
            book = self.books[q]
            if collect_residuals:
                residual_inputs.append(residual.detach())
            with torch.no_grad():
                d2 = torch.cdist(residual, book[None].expand(z.shape[0], -1, -1))
                idx = d2.argmin(dim=2)
            entries = book[idx]
            vq_loss = vq_loss + F.mse_loss(entries, residual.detach()) + 0.25 * F.mse_loss(
                residual, entries.detach()
            )
            tokens.append(idx)
            if q < n_active:
                quantized = quantized + entries
            residual = residual - entries.detach()
        z_st = z + (quantized - z).detach()
        if collect_residuals:
            return z_st, torch.stack(tokens, dim=1), vq_loss, residual_inputs
        return z_st, torch.stack(tokens, dim=1), vq_loss

    @torch.no_grad()
    def replace_dead_entries(self, usage: torch.Tensor, residual_inputs, seed: int):
        """Reinitialize unused entries from the current residual distribution.

        ``usage`` is [n_levels, vocab] hit counts since the last call. The
        pinned zero entry is never replaced. Returns replaced counts.
        """
        gen = torch.Generator().manual_seed(seed)
        replaced = []
        for q in range(self.n_levels):
            dead = torch.nonzero((usage[q] == 0), as_tuple=False).ravel()
            dead = dead[dead != 0]
            pool = residual_inputs[q].reshape(-1, self.dim)
            if len(dead) == 0 or len(pool) == 0:
                replaced.append(0)
                continue
            picks = torch.randint(0, pool.shape[0], (len(dead),), generator=gen)
            noise = 1.0 + 0.03 * torch.randn(len(dead), self.dim, generator=gen)
            self.books[q][dead] = pool[picks] * noise
            replaced.append(int(len(dead)))
        return replaced

    def decode_mel_tensor(self, quantized: torch.Tensor) -> torch.Tensor:
        """[B, T_c, D] -> [B, 2 T_c, 128] log-mel frames."""
        return self.decoder(quantized.transpose(1, 2)).transpose(1, 2)

    def forward(self, wave: torch.Tensor, n_active: int | None = None):
        z = self.encode_tensor(wave)
        z_st, tokens, vq_loss = self.quantize_tensor(z, n_active)
        mel_hat = self.decode_mel_tensor(z_st)
        return mel_hat, tokens, vq_loss

    # --- numpy-facing backend contract ------------------------------------

    def codebooks(self) -> CodebookSet:
        return CodebookSet([b.detach().numpy().copy() for b in self.books])

    @torch.no_grad()
    def encode(self, w: Waveform) -> tuple[CodecEmbedding, CodeTokenGrid]:
        if w.sample_rate != SAMPLE_RATE:
            raise BackendUnavailable(f"toy codec requires {SAMPLE_RATE} Hz input")
        self.eval()
        wave = torch.from_numpy(np.asarray(w.samples, dtype=np.float32))[None]
        z = self.encode_tensor(wave)
        grid, _, _ = rvq_quantize(z[0].numpy(), self.codebooks())
        return CodecEmbedding(z[0].numpy()), grid

    @torch.no_grad()
    def decode(self, tokens: CodeTokenGrid) -> Waveform:
        self.eval()
        toks = tokens.tokens
        if toks.shape[0] > self.n_levels:
            raise InvalidToken(f"{toks.shape[0]} levels but codec has {self.n_levels}")
        if toks.min() < 0 or toks.max() >= self.vocab:
            raise InvalidToken(f"token outside [0, {self.vocab})")
        books = self.books.detach()
        quantized = torch.zeros(toks.shape[1], self.dim)
        for q in range(toks.shape[0]):
            quantized += books[q][torch.from_numpy(toks[q])]
        mel_hat = self.decode_mel_tensor(quantized[None])[0].numpy().astype(np.float64)
        magnitude = np.sqrt(mel_to_linear_power(MelSpectrogram(mel_hat)))
        wave = griffin_lim(magnitude, iterations=self.GL_ITERATIONS)
        target_len = toks.shape[1] * CODEC_HOP
        samples = wave.samples
        if len(samples) < target_len:
            samples = np.pad(samples, (0, target_len - len(samples)))
        return Waveform(samples[:target_len])


class ExternalCodecAdapter:
    """Hook for a real pre-trained codec artifact; see CodecBackend."""

    def __init__(self, loader=None):
        import os

        cache = os.environ.get("RESYNTH_CACHE")
        self._artifact = Path(cache) / "codec" if cache else None
        self._impl = None
        if loader is not None and self._artifact is not None and self._artifact.exists():
            self._impl = loader(self._artifact)

    def _require(self):
        if self._impl is None:
            raise BackendUnavailable(
                "no external codec artifact installed (set RESYNTH_CACHE and provide a loader)"
            )
        return self._impl

    def encode(self, w: Waveform):
        return self._require().encode(w)

    def decode(self, tokens: CodeTokenGrid):
        return self._require().decode(tokens)

    def codebooks(self) -> CodebookSet:
        return self._require().codebooks()


_DEFAULT_TOY_CODEC: ToyCodec | None = None


def toy_codec_backend() -> ToyCodec:
    """Deterministic randomly-initialized toy codec (untrained)."""
    global _DEFAULT_TOY_CODEC
    if _DEFAULT_TOY_CODEC is None:
        torch.manual_seed(0x1057C0DEC % (2**31))
        _DEFAULT_TOY_CODEC = ToyCodec()
        _DEFAULT_TOY_CODEC.eval()
    return _DEFAULT_TOY_CODEC


def codec_encode(w: Waveform, backend: CodecBackend | None = None):
    backend = backend or toy_codec_backend()
    return backend.encode(w)


def codec_decode(tokens: CodeTokenGrid, backend: CodecBackend | None = None) -> Waveform:
    backend = backend or toy_codec_backend()
    return backend.decode(tokens)


# --- losses --------------------------------------------------------------


def token_ce_loss(logits, target) -> torch.Tensor:
    """Mean over tokens of -sum(target * log softmax(logits)).

    ``target`` is either an integer index array or a distribution array of
    the same leading shape as ``logits``.
    """
    logits_t = logits if torch.is_tensor(logits) else torch.as_tensor(logits, dtype=torch.float64)
    flat = logits_t.reshape(-1, logits_t.shape[-1])
    target_t = torch.as_tensor(target) if not torch.is_tensor(target) else target
    log_probs = F.log_softmax(flat, dim=-1)
    if target_t.dtype in (torch.int64, torch.int32, torch.int16):
        idx = target_t.reshape(-1)
        if idx.shape[0] != flat.shape[0]:
            raise ShapeMismatch(f"{idx.shape[0]} targets for {flat.shape[0]} tokens")
        if idx.min() < 0 or idx.max() >= flat.shape[1]:
            raise InvalidInput("target index outside the vocabulary")
        return -log_probs.gather(1, idx[:, None]).mean()
    dist = target_t.reshape(-1, target_t.shape[-1]).to(log_probs.dtype)
    if dist.shape != flat.shape:
        raise ShapeMismatch(f"distribution target {dist.shape} vs logits {flat.shape}")
    if (dist < 0).any():
        raise InvalidInput("target distribution has negative mass")
    sums = dist.sum(dim=-1)
    if (sums - 1.0).abs().max() > 1e-4:
        raise InvalidInput("target distribution rows must sum to 1 within 1e-4")
    return -(dist * log_probs).sum(dim=-1).mean()


def entry_loss(z_reference, z_retrieved) -> torch.Tensor:
    """Mean squared difference; the reference side is detached from gradients."""
    ref = torch.as_tensor(z_reference) if not torch.is_tensor(z_reference) else z_reference
    ret = torch.as_tensor(z_retrieved) if not torch.is_tensor(z_retrieved) else z_retrieved
    if ref.shape != ret.shape:
        raise ShapeMismatch(f"{tuple(ref.shape)} vs {tuple(ret.shape)}")
    return ((ref.detach().to(ret.dtype) - ret) ** 2).mean()


def codec_loss(token_loss, entry_term, lam: float = 0.5):
    """Combined objective: token CE plus lam times the entry loss."""
    return token_loss + lam * entry_term


def gumbel_retrieve(
    logits,
    book,
    temperature: float = 1.0,
    hard: bool = False,
    seed: int | None = None,
) -> torch.Tensor:
    """Differentiable codebook retrieval through a Gumbel-softmax layer.

    ``seed=None`` disables the Gumbel perturbation (the noise-off switch), so
    hard mode then reduces to exact argmax retrieval. Soft mode returns
    softmax(perturbed / temperature) @ book; hard mode snaps to the one-hot
    argmax with the soft path's straight-through gradient.
    """
    if temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    logits_t = logits if torch.is_tensor(logits) else torch.as_tensor(logits)
    book_t = book if torch.is_tensor(book) else torch.as_tensor(book)
    if not logits_t.dtype.is_floating_point:
        logits_t = logits_t.double()
    if logits_t.shape[-1] != book_t.shape[0]:
        raise ShapeMismatch(f"{logits_t.shape[-1]} logits vs {book_t.shape[0]} codebook entries")
    perturbed = logits_t
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
        uniform = torch.rand(logits_t.shape, generator=gen, dtype=torch.float64)
        gumbel = -torch.log(-torch.log(uniform + 1e-30) + 1e-30)
        perturbed = logits_t + gumbel.to(logits_t.dtype)
    y_soft = F.softmax(perturbed / temperature, dim=-1)
    if hard:
        index = perturbed.argmax(dim=-1, keepdim=True)
        y_hard = torch.zeros_like(y_soft).scatter_(-1, index, 1.0)
        # grouping keeps the forward value bit-exactly one-hot (x - x == +0.0)
        # while the backward pass still follows the soft path
        y = y_hard + (y_soft - y_soft.detach())
    else:
        y = y_soft
    return y @ book_t.to(y.dtype)


# --- PCA-neighbor label smoothing -----------------------------------------


@dataclass
class SmoothingTable:
    """Sparse per-level smoothing distributions (<= 3 nonzeros per row).

    Rows put 0.9 on the target token and 0.05 on each neighbor in the
    PCA-projection ordering; rows at either end of the ordering fold the
    missing neighbor's mass into the single existing one (0.9 / 0.1).
    """

    indices: np.ndarray  # [n_levels, V, 3], padded with -1
    probs: np.ndarray  # [n_levels, V, 3]
    sorted_order: np.ndarray  # [n_levels, V]

    @property
    def n_levels(self) -> int:
        return self.indices.shape[0]

    @property
    def vocab(self) -> int:
        return self.indices.shape[1]

    def row(self, level: int, token: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.indices[level, token] >= 0
        return self.indices[level, token][mask], self.probs[level, token][mask]

    def dense(self, level: int) -> np.ndarray:
        out = np.zeros((self.vocab, self.vocab))
        for v in range(self.vocab):
            idx, p = self.row(level, v)
            out[v, idx] = p
        return out


def pca_neighbor_smoothing(books: CodebookSet) -> SmoothingTable:
    """Order each codebook along its first principal axis and smooth neighbors.

    Entries are projected (uncentered) onto the leading right singular vector
    of the [V x D] entry matrix and sorted by absolute projection; adjacency
    in that ordering defines each token's two neighbors.
    """
    if books.vocab < 3:
        raise InvalidInput("label smoothing needs a vocabulary of at least 3")
    n_levels, vocab = books.n_levels, books.vocab
    indices = np.full((n_levels, vocab, 3), -1, dtype=np.int64)
    probs = np.zeros((n_levels, vocab, 3))
    orders = np.zeros((n_levels, vocab), dtype=np.int64)
    for q, book in enumerate(books.levels):
        m = book.astype(np.float64)
        _, _, vt = np.linalg.svd(m, full_matrices=False)
        projection = m @ vt[0]
        order = np.argsort(np.abs(projection), kind="stable")
        orders[q] = order
        position = np.empty(vocab, dtype=np.int64)
        position[order] = np.arange(vocab)
        for v in range(vocab):
            pos = position[v]
            neighbors = [order[p] for p in (pos - 1, pos + 1) if 0 <= p < vocab]
            indices[q, v, 0] = v
            probs[q, v, 0] = 0.9
            share = 0.1 / len(neighbors) if neighbors else 0.0
            for j, nb in enumerate(neighbors, start=1):
                indices[q, v, j] = nb
                probs[q, v, j] = share
            if not neighbors:
                probs[q, v, 0] = 1.0
    return SmoothingTable(indices=indices, probs=probs, sorted_order=orders)


def smoothed_ce_loss(logits: torch.Tensor, targets: torch.Tensor, table: SmoothingTable, level: int) -> torch.Tensor:
    """Token CE against the sparse smoothing rows of ``table`` at ``level``."""
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    log_probs = F.log_softmax(flat, dim=-1)
    idx = torch.from_numpy(table.indices[level]).to(tgt.device)[tgt]  # [N, 3]
    p = torch.from_numpy(table.probs[level]).to(log_probs.dtype)[tgt]
    gathered = log_probs.gather(1, idx.clamp(min=0))
    return -(p * gathered).sum(dim=-1).mean()


# --- code enhancer transformer ---------------------------------------------


@dataclass
class CodeEnhancerConfig:
    """Architecture and objective settings for the code-token enhancer."""

    dim: int = 512
    blocks: int = 12
    heads: int = 8
    n_levels: int = CODEC_LEVELS
    vocab: int = CODEC_VOCAB
    codec_dim: int = CODEC_DIM
    max_frames: int = 4096
    prediction: str = "layerwise"  # or "simultaneous" (single pass, N_q heads)
    loss: str = "ce+entry"  # ce | ce+entry | ce+smooth | ce+entry+smooth
    entry_reference: str = "degraded"  # or "clean"
    lambda_entry: float = 0.5
    gumbel_temperature: float = 1.0
    gumbel_hard: bool = False
    allow_combined_regularizers: bool = False

    def validate(self):
        if self.prediction not in ("layerwise", "simultaneous"):
            raise InvalidInput(f"unknown prediction mode {self.prediction!r}")
        if self.loss not in ("ce", "ce+entry", "ce+smooth", "ce+entry+smooth"):
            raise InvalidInput(f"unknown loss mode {self.loss!r}")
        if self.loss == "ce+entry+smooth" and not self.allow_combined_regularizers:
            raise InvalidInput(
                "entry loss and label smoothing are mutually exclusive by default; "
                "set allow_combined_regularizers to force the combination"
            )
        if self.entry_reference not in ("degraded", "clean"):
            raise InvalidInput(f"unknown entry_reference {self.entry_reference!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class TransformerBlock(nn.Module):
    """Pre-norm bidirectional block: self-attention plus a GELU MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class CodeEnhancer(nn.Module):
    """Transformer predicting clean code tokens from degraded codec features.

    Input per frame is the projected codec embedding plus a mel-conditioner
    embedding (100 Hz mel strided down to the 50 Hz token rate), a learned
    position embedding, and - for levels above zero - the summed embeddings
    of the already-decided lower-level tokens plus a level tag.
    """

    def __init__(self, cfg: CodeEnhancerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        self.emb_proj = nn.Linear(cfg.codec_dim, d)
        self.mel_conv = nn.Sequential(
            nn.Conv1d(N_MELS, d, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(d, d, 3, padding=1),
        )
        self.level_emb = nn.Embedding(cfg.n_levels, d)
        self.token_embs = nn.ModuleList(
            nn.Embedding(cfg.vocab, d) for _ in range(max(cfg.n_levels - 1, 1))
        )
        self.pos_emb = nn.Embedding(cfg.max_frames, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.blocks))
        self.final_norm = nn.LayerNorm(d)
        if cfg.prediction == "simultaneous":
            self.heads = nn.ModuleList(nn.Linear(d, cfg.vocab) for _ in range(cfg.n_levels))
        else:
            self.head = nn.Linear(d, cfg.vocab)

    def _mel_path(self, mel: torch.Tensor, frames: int) -> torch.Tensor:
        x = self.mel_conv(mel.transpose(1, 2))
        t = x.shape[2]
        if t < frames:
            x = F.pad(x, (0, frames - t), mode="replicate")
        elif t > frames:
            x = x[:, :, :frames]
        return x.transpose(1, 2)

    def _backbone(self, emb: torch.Tensor, mel: torch.Tensor, extra: torch.Tensor | None) -> torch.Tensor:
        b, t, _ = emb.shape
        if t > self.cfg.max_frames:
            raise InvalidInput(f"{t} frames exceeds the positional table ({self.cfg.max_frames})")
        x = self.emb_proj(emb) + self._mel_path(mel, t)
        x = x + self.pos_emb(torch.arange(t, device=emb.device))[None]
        if extra is not None:
            x = x + extra
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def forward(
        self,
        emb: torch.Tensor,
        mel: torch.Tensor,
        prev_tokens: torch.Tensor | None,
        level: int,
    ) -> torch.Tensor:
        """Layer-wise pass for one quantizer level -> logits [B, T, V]."""
        if self.cfg.prediction != "layerwise":
            raise InvalidInput("model was built for simultaneous prediction")
        if not 0 <= level < self.cfg.n_levels:
            raise InvalidInput(f"level {level} outside [0, {self.cfg.n_levels})")
        extra = self.level_emb.weight[level][None, None, :]
        if level > 0:
            if prev_tokens is None or prev_tokens.shape[1] != level:
                got = 0 if prev_tokens is None else prev_tokens.shape[1]
                raise InvalidInput(f"level {level} needs {level} previous token rows, got {got}")
            summed = sum(self.token_embs[l](prev_tokens[:, l]) for l in range(level))
            extra = extra + summed
        x = self._backbone(emb, mel, extra)
        return self.head(x)

    def forward_simultaneous(self, emb: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        """Single pass with one prediction head per level -> [B, N_q, T, V]."""
        if self.cfg.prediction != "simultaneous":
            raise InvalidInput("model was built for layer-wise prediction")
        x = self._backbone(emb, mel, None)
        return torch.stack([head(x) for head in self.heads], dim=1)


def predict_tokens(
    emb: CodecEmbedding,
    aux_mel: MelSpectrogram,
    prev_tokens: np.ndarray | None,
    level: int,
    model: CodeEnhancer,
) -> np.ndarray:
    """Logits [T_c x vocab] for one level; prev_tokens holds all levels < q."""
    model.eval()
    emb_t = torch.from_numpy(emb.values)[None]
    mel_t = torch.from_numpy(aux_mel.values.astype(np.float32))[None]
    prev_t = None
    if prev_tokens is not None and len(prev_tokens):
        prev_t = torch.from_numpy(np.asarray(prev_tokens, dtype=np.int64))[None]
    elif level > 0:
        raise InvalidInput(f"level {level} requires previous-level tokens")
    with torch.no_grad():
        logits = model(emb_t, mel_t, prev_t, level)
    return logits[0].numpy()


# --- toy codec pretraining ---------------------------------------------------


def _augment_for_codec(w: Waveform, seed: int, prob: float = 0.2) -> Waveform:
    """With the configured probability, reverberate and sometimes add noise."""
    rng = np.random.default_rng([seed, 0xC0DECA])
    if rng.uniform() >= prob:
        return w
    scene = sample_scene(int(rng.integers(2**31 - 1)), "reverberant")
    out = apply_reverb(w, simulate_rir(scene))
    if rng.uniform() < 0.5:
        out = mix_noise(out, make_noise_clip(int(rng.integers(2**31 - 1)), out.seconds), float(rng.uniform(0.0, 40.0)))
    peak = np.max(np.abs(out.samples))
    if peak > 0.99:
        out = Waveform(out.samples * (0.99 / peak))
    return out


def pretrain_toy_codec(
    codec: ToyCodec,
    clean_paths: list,
    steps: int = 2000,
    batch_size: int = 8,
    crop_seconds: float = 2.0,
    learning_rate: float = 1e-3,
    seed: int = 0,
    augment_prob: float = 0.2,
) -> list[float]:
    """Autoencoding pretrain: mel-domain L1 plus the RVQ commitment losses.

    Inputs are augmented with reverb/noise at ``augment_prob`` so encoder
    embeddings stay stable under degradation. Returns per-step losses.
    """
    from .signal_core import crop_or_pad, read_wav

    torch.manual_seed(seed)
    codec.train()
    optimizer = torch.optim.Adam(codec.parameters(), lr=learning_rate)
    mel_fn = codec.mel_fn
    rng = np.random.default_rng([seed, 0x70726574])
    losses = []
    initialized = False
    for step in range(steps):
        picks = rng.integers(0, len(clean_paths), size=batch_size)
        batch = []
        for pick in picks:
            w = read_wav(clean_paths[int(pick)])
            w = crop_or_pad(w, crop_seconds, int(rng.integers(2**31 - 1)))
            w = _augment_for_codec(w, seed=int(rng.integers(2**31 - 1)), prob=augment_prob)
            batch.append(w.samples)
        wave = torch.from_numpy(np.stack(batch).astype(np.float32))
        if not initialized:
            codec.init_codebooks_from(wave, seed=seed)
            usage = torch.zeros(codec.n_levels, codec.vocab)
            initialized = True
        z = codec.encode_tensor(wave)
        z_st, tokens, vq_loss, residual_inputs = codec.quantize_tensor(z, collect_residuals=True)
        mel_hat = codec.decode_mel_tensor(z_st)
        with torch.no_grad():
            target = mel_fn(wave)[:, : mel_hat.shape[1], :]
            for q in range(codec.n_levels):
                usage[q] += torch.bincount(tokens[:, q].reshape(-1), minlength=codec.vocab)
        mel_l1 = (mel_hat - target).abs().mean()
        loss = mel_l1 + (0.25 / codec.n_levels) * vq_loss
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        codec.repin_zero_entry()
        # revive unused codebook entries periodically, then let them settle
        if (step + 1) % 100 == 0 and step < int(0.8 * steps):
            codec.replace_dead_entries(usage, residual_inputs, seed=seed + step)
            usage.zero_()
        losses.append(float(loss.item()))
        tr.ensure_finite(losses[-1], None, {"step": step, "stage": "codec-pretrain"})
    codec.eval()
    return losses


# --- enhancer training -------------------------------------------------------


def _loss_columns(cfg: CodeEnhancerConfig) -> list[str]:
    cols = ["token_loss"]
    if "entry" in cfg.loss:
        cols.append("entry_loss")
    cols += ["total", "token_acc_l0"]
    return cols


def _forward_losses(
    model: CodeEnhancer,
    cfg: CodeEnhancerConfig,
    books: torch.Tensor,
    emb: torch.Tensor,
    mel: torch.Tensor,
    clean_tokens: torch.Tensor,
    degraded_tokens: torch.Tensor,
    table: SmoothingTable | None,
    gumbel_seed: int | None,
):
    """One teacher-forced pass over all predicted levels; returns loss terms."""
    n_levels = cfg.n_levels
    ce_terms = []
    entry_terms = []
    acc_l0 = None
    if cfg.prediction == "simultaneous":
        logits_all = model.forward_simultaneous(emb, mel)
        for q in range(n_levels):
            ce_terms.append(token_ce_loss(logits_all[:, q], clean_tokens[:, q]))
        acc_l0 = (logits_all[:, 0].argmax(-1) == clean_tokens[:, 0]).float().mean()
    else:
        for q in range(n_levels):
            logits = model(emb, mel, clean_tokens[:, :q] if q else None, q)
            if table is not None:
                ce_terms.append(smoothed_ce_loss(logits, clean_tokens[:, q], table, q))
            else:
                ce_terms.append(token_ce_loss(logits, clean_tokens[:, q]))
            if q == 0:
                acc_l0 = (logits.argmax(-1) == clean_tokens[:, 0]).float().mean()
            if "entry" in cfg.loss:
                ref_tokens = degraded_tokens if cfg.entry_reference == "degraded" else clean_tokens
                z_ref = books[q][ref_tokens[:, q]]
                z_hat = gumbel_retrieve(
                    logits,
                    books[q],
                    temperature=cfg.gumbel_temperature,
                    hard=cfg.gumbel_hard,
                    seed=None if gumbel_seed is None else gumbel_seed + q,
                )
                entry_terms.append(entry_loss(z_ref, z_hat))
    token_term = torch.stack(ce_terms).mean()
    entry_term = torch.stack(entry_terms).mean() if entry_terms else None
    if entry_term is not None:
        total = codec_loss(token_term, entry_term, cfg.lambda_entry)
    else:
        total = token_term
    return total, token_term, entry_term, acc_l0


def _encode_batch(codec: ToyCodec, mel_fn: TorchLogMel, pairs, n_levels: int):
    """Frozen-codec featurization of one batch of (clean, degraded) crops."""
    clean_w = torch.from_numpy(np.stack([p[0].samples for p in pairs]).astype(np.float32))
    deg_w = torch.from_numpy(np.stack([p[1].samples for p in pairs]).astype(np.float32))
    with torch.no_grad():
        emb = codec.encode_tensor(deg_w)
        _, deg_tokens, _ = codec.quantize_tensor(emb)
        _, clean_tokens, _ = codec.quantize_tensor(codec.encode_tensor(clean_w))
        mel = mel_fn(deg_w)
    return emb, mel, clean_tokens[:, :n_levels], deg_tokens[:, :n_levels]


def train_codec_enhancer(
    manifest: DatasetManifest,
    codec: ToyCodec,
    cfg: CodeEnhancerConfig,
    train_cfg: tr.TrainConfig,
    resume_from: str | None = None,
) -> tr.Checkpoint:
    """Teacher-forced training of the code enhancer against a frozen codec."""
    cfg.validate()
    train_rows = tr.split_rows_or_raise(manifest, "train")
    valid_rows = tr.split_rows_or_raise(manifest, "valid")
    out_dir = Path(train_cfg.out_dir) if train_cfg.out_dir else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    books = codec.books.detach()

    torch.manual_seed(tr.epoch_seed(train_cfg.seed, -1))
    model = CodeEnhancer(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas)
    start_epoch = 0
    best_valid = float("inf")
    if resume_from is not None:
        ckpt = tr.load_checkpoint(resume_from, expected_pipeline="codec")
        model.load_state_dict(ckpt.payload["model_state"])
        optimizer.load_state_dict(ckpt.payload["optimizer_state"])
        start_epoch = ckpt.epoch + 1
        best_valid = ckpt.payload["extra"].get("best_valid", float("inf"))

    table = pca_neighbor_smoothing(codec.codebooks()) if "smooth" in cfg.loss else None
    mel_fn = TorchLogMel()
    logger = tr.LossLogger(out_dir / "losses.csv", _loss_columns(cfg))
    ckpt_path = out_dir / "checkpoint.pt"
    best_path = out_dir / "checkpoint_best.pt"

    def checkpoint_extra():
        return {
            "best_valid": best_valid,
            "codec_state": codec.state_dict(),
            "codec_config": {
                "dim": codec.dim,
                "n_levels": codec.n_levels,
                "vocab": codec.vocab,
                "width": codec.width,
            },
        }

    last = None
    for epoch in range(start_epoch, train_cfg.epochs):
        torch.manual_seed(tr.epoch_seed(train_cfg.seed, epoch))
        model.train()
        order = tr.epoch_order(len(train_rows), train_cfg.seed, epoch)
        epoch_terms = {"token_loss": [], "entry_loss": [], "total": [], "token_acc_l0": []}
        for step, batch_idx in enumerate(tr.iter_batches(order, train_cfg.batch_size)):
            rows = [train_rows[i] for i in batch_idx]
            pairs = tr.load_pairs(manifest, rows, train_cfg.crop_seconds, train_cfg.seed, epoch, train_cfg.workers)
            emb, mel, clean_tokens, deg_tokens = _encode_batch(codec, mel_fn, pairs, cfg.n_levels)
            gumbel_seed = tr.epoch_seed(train_cfg.seed, epoch) + 1000 * step
            total, token_term, entry_term, acc = _forward_losses(
                model, cfg, books, emb, mel, clean_tokens, deg_tokens, table, gumbel_seed
            )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            tr.ensure_finite(float(total.item()), str(out_dir), {"epoch": epoch, "step": step})
            epoch_terms["token_loss"].append(float(token_term.item()))
            if entry_term is not None:
                epoch_terms["entry_loss"].append(float(entry_term.item()))
            epoch_terms["total"].append(float(total.item()))
            epoch_terms["token_acc_l0"].append(float(acc.item()))
        train_terms = {k: float(np.mean(v)) for k, v in epoch_terms.items() if v}
        logger.log(epoch, "train", **train_terms)

        model.eval()
        with torch.no_grad():
            valid_totals, valid_accs = [], []
            for batch_idx in tr.iter_batches(np.arange(len(valid_rows)), train_cfg.batch_size):
                rows = [valid_rows[i] for i in batch_idx]
                pairs = tr.load_pairs(manifest, rows, train_cfg.crop_seconds, train_cfg.seed, -1, train_cfg.workers)
                emb, mel, clean_tokens, deg_tokens = _encode_batch(codec, mel_fn, pairs, cfg.n_levels)
                total, token_term, entry_term, acc = _forward_losses(
                    model, cfg, books, emb, mel, clean_tokens, deg_tokens, table, None
                )
                valid_totals.append(float(total.item()))
                valid_accs.append(float(acc.item()))
        valid_loss = float(np.mean(valid_totals))
        logger.log(epoch, "valid", total=valid_loss, token_acc_l0=float(np.mean(valid_accs)))

        if valid_loss < best_valid:
            best_valid = valid_loss
            tr.save_checkpoint(
                best_path, "codec", cfg.to_dict(), model.state_dict(), optimizer.state_dict(),
                epoch, train_cfg.to_dict(), checkpoint_extra(),
            )
        last = tr.save_checkpoint(
            ckpt_path, "codec", cfg.to_dict(), model.state_dict(), optimizer.state_dict(),
            epoch, train_cfg.to_dict(), checkpoint_extra(),
        )
    if last is None:
        raise InvalidInput("epochs must be > start epoch; nothing was trained")
    return last


def load_codec_enhancer(checkpoint: str | Path) -> tuple[CodeEnhancer, ToyCodec, tr.Checkpoint]:
    """Rebuild the enhancer and its frozen codec from a checkpoint."""
    ckpt = tr.load_checkpoint(checkpoint, expected_pipeline="codec")
    cfg = CodeEnhancerConfig(**ckpt.payload["config"])
    model = CodeEnhancer(cfg)
    model.load_state_dict(ckpt.payload["model_state"])
    model.eval()
    codec = ToyCodec(**ckpt.payload["extra"].get("codec_config", {}))
    codec.load_state_dict(ckpt.payload["extra"]["codec_state"])
    codec.eval()
    return model, codec, ckpt


def enhance_waveform_codec(noisy: Waveform, model: CodeEnhancer, codec: ToyCodec) -> Waveform:
    """Greedy layer-by-layer token prediction followed by codec decoding.

    Each level conditions on the previously predicted levels; output length
    is T_c * 320. Fully deterministic.
    """
    model.eval()
    cfg = model.cfg
    emb, _ = codec.encode(noisy)
    mel = mel_spectrogram(noisy)
    emb_t = torch.from_numpy(emb.values)[None]
    mel_t = torch.from_numpy(mel.values.astype(np.float32))[None]
    prev: torch.Tensor | None = None
    with torch.no_grad():
        if cfg.prediction == "simultaneous":
            logits = model.forward_simultaneous(emb_t, mel_t)
            grid = logits[0].argmax(-1).numpy()
        else:
            rows = []
            for q in range(cfg.n_levels):
                logits = model(emb_t, mel_t, prev, q)
                tokens_q = logits.argmax(-1)
                rows.append(tokens_q[0].numpy())
                prev = torch.stack([torch.as_tensor(r) for r in rows], dim=0)[None]
            grid = np.stack(rows)
    return codec.decode(CodeTokenGrid(grid))
