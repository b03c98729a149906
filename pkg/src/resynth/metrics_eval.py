"""Objective evaluation: from-scratch STOI, T60 estimation, external adapters.

PESQ and DNS-MOS are encumbered or model-based; they are exposed only as
optional adapters and report "absent" when their artifacts are missing.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import resample_poly

from .data_sim import RIR, DatasetManifest
from .errors import (
    AdapterError,
    DegenerateInput,
    EmptyCorpus,
    InputTooShort,
    InsufficientDecay,
)
from .signal_core import Waveform, read_wav

log = logging.getLogger(__name__)

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_NUM_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG_FRAMES = 30          # 30 frames of 12.8 ms = 384 ms analysis length
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
MIN_STOI_SECONDS = STOI_SEG_FRAMES * STOI_HOP / STOI_FS


def _stoi_window() -> np.ndarray:
    # matlab-style hanning: symmetric with the zero endpoints dropped
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frame_signal(x: np.ndarray) -> np.ndarray:
    n_frames = (len(x) - STOI_FRAME) // STOI_HOP + 1
    idx = np.arange(STOI_FRAME)[None, :] + STOI_HOP * np.arange(n_frames)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames where the reference is >40 dB below its loudest frame."""
    window = _stoi_window()
    xf = _frame_signal(x) * window
    yf = _frame_signal(y) * window
    energy_db = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-300)
    mask = energy_db > energy_db.max() - STOI_DYN_RANGE_DB
    xf, yf = xf[mask], yf[mask]
    # overlap-add reconstruction of only the retained frames
    out_len = (len(xf) - 1) * STOI_HOP + STOI_FRAME if len(xf) else 0
    xr = np.zeros(out_len)
    yr = np.zeros(out_len)
    for i in range(len(xf)):
        start = i * STOI_HOP
        xr[start : start + STOI_FRAME] += xf[i]
        yr[start : start + STOI_FRAME] += yf[i]
    return xr, yr


def _third_octave_matrix() -> np.ndarray:
    freqs = np.linspace(0.0, STOI_FS / 2.0, STOI_NFFT // 2 + 1)
    centers = STOI_MIN_FREQ * 2.0 ** (np.arange(STOI_NUM_BANDS) / 3.0)
    lows = centers * 2.0 ** (-1.0 / 6.0)
    highs = centers * 2.0 ** (1.0 / 6.0)
    obm = np.zeros((STOI_NUM_BANDS, len(freqs)))
    for i in range(STOI_NUM_BANDS):
        lo = int(np.argmin((freqs - lows[i]) ** 2))
        hi = int(np.argmin((freqs - highs[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


_OBM = _third_octave_matrix()


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """[num_bands x M] one-third-octave magnitude envelopes."""
    frames = _frame_signal(x) * _stoi_window()
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ _OBM.T).T


def stoi(reference: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``reference``.

    Classic (non-extended) measure: 10 kHz analysis rate, 15 one-third-octave
    bands from 150 Hz, 384 ms segments, -15 dB clipping, per-band envelope
    correlation averaged over bands and segments.
    """
    if len(reference) != len(degraded):
        raise InputTooShort("reference and degraded must have equal lengths")
    if reference.seconds < MIN_STOI_SECONDS:
        raise InputTooShort(
            f"need at least {MIN_STOI_SECONDS * 1000:.0f} ms of audio, got {reference.seconds * 1000:.0f} ms"
        )
    if not np.any(reference.samples):
        raise DegenerateInput("reference is silent")

    x = resample_poly(reference.samples, STOI_FS, reference.sample_rate)
    y = resample_poly(degraded.samples, STOI_FS, degraded.sample_rate)
    x, y = _remove_silent_frames(x, y)
    if len(x) < (STOI_SEG_FRAMES - 1) * STOI_HOP + STOI_FRAME:
        raise InputTooShort("too little active speech after silent-frame removal")

    X = _band_envelopes(x)
    Y = _band_envelopes(y)
    n_frames = X.shape[1]
    clip = 10.0 ** (-STOI_BETA_DB / 20.0)

    scores = []
    for m in range(STOI_SEG_FRAMES, n_frames + 1):
        xs = X[:, m - STOI_SEG_FRAMES : m]
        ys = Y[:, m - STOI_SEG_FRAMES : m]
        alpha = np.sqrt(
            np.sum(xs**2, axis=1, keepdims=True) / (np.sum(ys**2, axis=1, keepdims=True) + 1e-300)
        )
        ys_clipped = np.minimum(alpha * ys, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys_clipped - ys_clipped.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + 1e-300
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def estimate_t60(rir: RIR) -> float:
    """T60 from Schroeder backward integration.

    Fits a line to the -5..-25 dB stretch of the integrated decay and
    extrapolates to -60 dB.
    """
    taps = np.asarray(rir.taps, dtype=np.float64)
    energy = np.cumsum(taps[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise InsufficientDecay("impulse response carries no energy")
    db = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-30))
    if db.min() > -30.0:
        raise InsufficientDecay(f"decay range {-db.min():.1f} dB < 30 dB")
    n1 = int(np.argmax(db <= -5.0))
    n2 = int(np.argmax(db <= -25.0))
    if n2 <= n1 + 1:
        raise InsufficientDecay("decay region too short to fit")
    t = np.arange(n1, n2) / rir.sample_rate
    slope = np.polyfit(t, db[n1:n2], 1)[0]
    if slope >= 0:
        raise InsufficientDecay("non-decaying energy curve")
    return float(-60.0 / slope)


# --- external metric adapters -------------------------------------------------

MetricFn = Callable[[Waveform, Waveform], float]

_ADAPTERS: dict[str, Callable[[], MetricFn | None]] = {}


def register_adapter(name: str, factory: Callable[[], MetricFn | None]):
    """Register a metric adapter factory; it may return None when unavailable."""
    _ADAPTERS[name] = factory


def _pesq_factory() -> MetricFn | None:
    try:
        from pesq import pesq as pesq_fn  # type: ignore
    except ImportError:
        log.info("pesq package not installed; PESQ scores will be absent")
        return None

    mode = os.environ.get("RESYNTH_PESQ_MODE", "wb")

    def score(reference: Waveform, degraded: Waveform) -> float:
        return float(pesq_fn(reference.sample_rate, reference.samples, degraded.samples, mode))

    return score


def _dnsmos_factory() -> MetricFn | None:
    cache = os.environ.get("RESYNTH_CACHE")
    model_path = Path(cache) / "dnsmos" / "sig_bak_ovr.onnx" if cache else None
    if model_path is None or not model_path.exists():
        log.info("DNS-MOS model artifact not found; DNS-MOS scores will be absent")
        return None
    try:
        import onnxruntime  # type: ignore
    except ImportError:
        log.info("onnxruntime not installed; DNS-MOS scores will be absent")
        return None

    session = onnxruntime.InferenceSession(str(model_path))

    def score(reference: Waveform, degraded: Waveform) -> float:
        frame = degraded.samples[: degraded.sample_rate * 9].astype(np.float32)[None, :]
        out = session.run(None, {session.get_inputs()[0].name: frame})
        return float(np.asarray(out[0]).ravel()[-1])

    return score


register_adapter("pesq", _pesq_factory)
register_adapter("dnsmos", _dnsmos_factory)


def external_metric(adapter: str, reference: Waveform, degraded: Waveform) -> float | None:
    """Score with a registered adapter; None (absent) when it is unavailable."""
    factory = _ADAPTERS.get(adapter)
    if factory is None:
        log.info("no adapter registered under %r", adapter)
        return None
    fn = factory()
    if fn is None:
        return None
    try:
        return float(fn(reference, degraded))
    except Exception as exc:  # noqa: BLE001 - adapter crash contract
        raise AdapterError(f"adapter {adapter!r} failed: {exc}") from exc


# --- manifest-level evaluation -------------------------------------------------


@dataclass
class MetricReport:
    system: str
    metrics: list[str]
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def recompute_aggregates(self):
        self.aggregates = {}
        for metric in self.metrics:
            values = [r["values"][metric] for r in self.rows if r["values"].get(metric) is not None]
            if values:
                self.aggregates[metric] = float(np.mean(values))

    def to_json(self) -> str:
        return json.dumps(
            {
                "system": self.system,
                "metrics": self.metrics,
                "rows": self.rows,
                "aggregates": self.aggregates,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(
            system=obj["system"],
            metrics=obj["metrics"],
            rows=obj["rows"],
            aggregates=obj["aggregates"],
        )


def render_table(reports: list[MetricReport]) -> str:
    """Aligned plain-text table, one row per system, one column per metric."""
    metrics: list[str] = []
    for rep in reports:
        for m in rep.metrics:
            if m not in metrics:
                metrics.append(m)
    headers = ["System"] + [m.upper().replace("DNSMOS", "DNS-MOS") for m in metrics]
    lines = [headers]
    for rep in reports:
        row = [rep.system]
        for m in metrics:
            value = rep.aggregates.get(m)
            row.append("-" if value is None else f"{value:.3f}")
        lines.append(row)
    widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
    rendered = []
    for line in lines:
        rendered.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    return "\n".join(rendered)


def evaluate_manifest(
    system: Callable[[Waveform], Waveform],
    manifest: DatasetManifest,
    metrics: list[str] | None = None,
    split: str | None = "test",
    system_label: str = "system",
) -> MetricReport:
    """Enhance and score every utterance of a manifest split against its clean reference.

    ``system`` maps a degraded waveform to an enhanced one. Rows are processed
    in id order; audio on disk is never modified. ``split=None`` scores every
    row regardless of split.
    """
    metrics = list(metrics) if metrics else ["stoi"]
    pool = manifest.rows if split is None else manifest.split_rows(split)
    rows = sorted(pool, key=lambda r: r.id)
    if not rows:
        raise EmptyCorpus(f"manifest has no rows in split {split!r}")
    report = MetricReport(system=system_label, metrics=metrics)
    for row in rows:
        clean = read_wav(manifest.resolve(row.clean_path))
        degraded = read_wav(manifest.resolve(row.degraded_path))
        enhanced = system(degraded)
        n = min(len(clean), len(enhanced))
        clean_cut = Waveform(clean.samples[:n])
        enhanced_cut = Waveform(enhanced.samples[:n])
        values: dict[str, float | None] = {}
        for metric in metrics:
            try:
                if metric == "stoi":
                    values[metric] = stoi(clean_cut, enhanced_cut)
                else:
                    values[metric] = external_metric(metric, clean_cut, enhanced_cut)
            except AdapterError as exc:
                log.warning("utterance %s: %s", row.id, exc)
                values[metric] = None
        report.rows.append({"id": row.id, "values": values})
    report.recompute_aggregates()
    return report
