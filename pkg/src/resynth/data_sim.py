"""Acoustic scene sampling, image-method RIR synthesis, and corpus construction.

A scene is fully described by a :class:`SceneSpec`; every degraded file in a
manifest can be regenerated bit-exactly from its stored scene (plus the same
noise directory, for noisy conditions).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import (
    DegenerateInput,
    EmptyCorpus,
    InvalidScene,
    SampleRateMismatch,
)
from .signal_core import SAMPLE_RATE, Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.1
MIN_SOURCE_MIC_DIST = 0.3
T60_RANGE = (0.2, 1.5)
SNR_RANGE_DB = (0.0, 40.0)
# sampled room geometry: width x length x height in meters
ROOM_WIDTH_RANGE = (3.0, 10.0)
ROOM_LENGTH_RANGE = (4.0, 20.0)
ROOM_HEIGHT_RANGE = (2.5, 4.0)
HEAD_HEIGHT_RANGE = (1.0, 2.0)


@dataclass
class SceneSpec:
    """Sampled acoustic scene: room geometry, endpoints, decay, optional SNR."""

    room_dims: tuple[float, float, float]
    source_pos: tuple[float, float, float]
    mic_pos: tuple[float, float, float]
    t60: float
    snr_db: float | None
    seed: int

    def to_dict(self) -> dict:
        d = {
            "room_dims": list(self.room_dims),
            "source_pos": list(self.source_pos),
            "mic_pos": list(self.mic_pos),
            "t60": self.t60,
        }
        if self.snr_db is not None:
            d["snr_db"] = self.snr_db
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            room_dims=tuple(d["room_dims"]),
            source_pos=tuple(d["source_pos"]),
            mic_pos=tuple(d["mic_pos"]),
            t60=d["t60"],
            snr_db=d.get("snr_db"),
            seed=d["seed"],
        )


@dataclass
class RIR:
    """Simulated room impulse response at 16 kHz."""

    taps: np.ndarray
    scene: SceneSpec | None = None
    sample_rate: int = SAMPLE_RATE


def sabine_absorption(room_dims, t60: float) -> float:
    """Sabine's uniform absorption coefficient 0.161 V / (S T60)."""
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    return 0.161 * volume / (surface * t60)


def _fibonacci_sphere(n: int = 512) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack(
        [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)],
        axis=1,
    )


_CALIBRATION_DIRS = _fibonacci_sphere(512)


def _mixture_schroeder_t60(alpha: float, room_dims, t60_trunc: float) -> float:
    """Schroeder T60 of the direction-dependent image-lattice decay.

    A uniform-absorption shoebox does not decay at a single rate: an image
    family travelling along direction u crosses walls at c*(|ux|/Lx +
    |uy|/Ly + |uz|/Lz) per second, so flat or elongated rooms have slow axial
    tails. This models the mixture the Schroeder integral actually sees,
    truncated at the RIR length, and fits the same -5..-25 dB line as the
    T60 estimator.
    """
    g = np.abs(_CALIBRATION_DIRS) @ (1.0 / np.asarray(room_dims, dtype=np.float64))
    rate = np.log(1.0 - alpha) * SPEED_OF_SOUND * g
    t = np.linspace(0.0, t60_trunc, 400)
    energy = np.exp(np.outer(t, rate)).mean(axis=1)
    schroeder = np.cumsum(energy[::-1])[::-1]
    db = 10.0 * np.log10(np.maximum(schroeder / schroeder[0], 1e-30))
    n1 = int(np.argmax(db <= -5.0))
    n2 = int(np.argmax(db <= -25.0))
    if n2 <= n1:
        return np.inf
    slope = np.polyfit(t[n1:n2], db[n1:n2], 1)[0]
    return -60.0 / slope


def calibrated_absorption(room_dims, t60: float) -> float:
    """Uniform absorption whose simulated Schroeder T60 matches the request."""
    lo, hi = 1e-4, 0.9999
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _mixture_schroeder_t60(mid, room_dims, t60) > t60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _validate_scene_geometry(scene: SceneSpec):
    dims = np.asarray(scene.room_dims, dtype=np.float64)
    src = np.asarray(scene.source_pos, dtype=np.float64)
    mic = np.asarray(scene.mic_pos, dtype=np.float64)
    for name, pos in (("source", src), ("mic", mic)):
        if np.any(pos < WALL_MARGIN) or np.any(pos > dims - WALL_MARGIN):
            raise InvalidScene(f"{name} position {pos.tolist()} violates the {WALL_MARGIN} m wall margin")
    if np.linalg.norm(src - mic) < MIN_SOURCE_MIC_DIST:
        raise InvalidScene(
            f"source-mic distance {np.linalg.norm(src - mic):.3f} m is below {MIN_SOURCE_MIC_DIST} m"
        )
    if scene.t60 <= 0:
        raise InvalidScene(f"t60 must be positive, got {scene.t60}")


def sample_scene(seed: int, condition: str = "reverberant") -> SceneSpec:
    """Draw a random scene; deterministic per seed.

    Rooms whose Sabine absorption would reach 1 for the drawn T60 (too much
    volume for the requested decay) are rejected and redrawn.
    """
    if condition not in ("reverberant", "noisy_reverberant"):
        raise ValueError(f"unknown condition {condition!r}")
    rng = np.random.default_rng(seed)
    while True:
        dims = (
            float(rng.uniform(*ROOM_WIDTH_RANGE)),
            float(rng.uniform(*ROOM_LENGTH_RANGE)),
            float(rng.uniform(*ROOM_HEIGHT_RANGE)),
        )
        t60 = float(rng.uniform(*T60_RANGE))
        if sabine_absorption(dims, t60) < 0.95:
            break
    while True:
        src = (
            float(rng.uniform(WALL_MARGIN, dims[0] - WALL_MARGIN)),
            float(rng.uniform(WALL_MARGIN, dims[1] - WALL_MARGIN)),
            float(rng.uniform(*HEAD_HEIGHT_RANGE)),
        )
        mic = (
            float(rng.uniform(WALL_MARGIN, dims[0] - WALL_MARGIN)),
            float(rng.uniform(WALL_MARGIN, dims[1] - WALL_MARGIN)),
            float(rng.uniform(*HEAD_HEIGHT_RANGE)),
        )
        if np.linalg.norm(np.subtract(src, mic)) >= MIN_SOURCE_MIC_DIST:
            break
    snr = float(rng.uniform(*SNR_RANGE_DB)) if condition == "noisy_reverberant" else None
    return SceneSpec(room_dims=dims, source_pos=src, mic_pos=mic, t60=t60, snr_db=snr, seed=seed)


def _axis_images(source: float, room: float, mic: float, max_dist: float):
    """Per-axis image coordinates and reflection counts within reach of the mic."""
    order = int(np.ceil(max_dist / (2.0 * room))) + 1
    r = np.arange(-order, order + 1)
    # p=0 keeps the source parity, p=1 mirrors it across the near wall
    coords = np.concatenate([source + 2.0 * r * room, -source + 2.0 * r * room])
    counts = np.concatenate([2 * np.abs(r), np.abs(r) + np.abs(r - 1)])
    keep = np.abs(coords - mic) <= max_dist
    return coords[keep], counts[keep]


def simulate_rir(scene: SceneSpec, absorption: str = "calibrated") -> RIR:
    """Image-method RIR with uniform wall reflectivity and nearest-sample delays.

    ``absorption`` selects how the requested T60 maps to per-reflection energy
    loss: "calibrated" (default; solves for the absorption whose directional
    decay mixture measures back at the requested T60), "eyring", or "sabine"
    (the classic closed forms, which read high on flat or elongated rooms).

    The wall pressure reflection coefficient is -sqrt(1 - alpha); the sign
    alternation across reflection orders keeps same-bin arrivals from summing
    coherently under nearest-sample rounding. The direct path (order zero) is
    +1/(4 pi d) regardless.
    """
    _validate_scene_geometry(scene)
    alpha_sabine = sabine_absorption(scene.room_dims, scene.t60)
    if alpha_sabine >= 1.0:
        raise InvalidScene(
            f"Sabine absorption {alpha_sabine:.3f} >= 1: room cannot decay to the requested T60"
        )
    if absorption == "calibrated":
        alpha = calibrated_absorption(scene.room_dims, scene.t60)
    elif absorption == "eyring":
        alpha = 1.0 - np.exp(-alpha_sabine)
    elif absorption == "sabine":
        alpha = alpha_sabine
    else:
        raise ValueError(f"unknown absorption model {absorption!r}")
    beta = -np.sqrt(1.0 - alpha)

    fs = SAMPLE_RATE
    n_taps = int(np.ceil(scene.t60 * fs))
    max_dist = (n_taps - 0.5) * SPEED_OF_SOUND / fs

    ax, kx = _axis_images(scene.source_pos[0], scene.room_dims[0], scene.mic_pos[0], max_dist)
    ay, ky = _axis_images(scene.source_pos[1], scene.room_dims[1], scene.mic_pos[1], max_dist)
    az, kz = _axis_images(scene.source_pos[2], scene.room_dims[2], scene.mic_pos[2], max_dist)

    dx2 = (ax - scene.mic_pos[0]) ** 2
    dy2 = (ay - scene.mic_pos[1]) ** 2
    dz2 = (az - scene.mic_pos[2]) ** 2
    dxy2 = dx2[:, None] + dy2[None, :]
    beta_xy = np.power(beta, kx[:, None] + ky[None, :])

    taps = np.zeros(n_taps)
    for iz in range(len(az)):
        d = np.sqrt(dxy2 + dz2[iz])
        n = np.round(d * fs / SPEED_OF_SOUND).astype(np.int64)
        amp = beta_xy * np.power(beta, kz[iz]) / (4.0 * np.pi * np.maximum(d, 1e-9))
        mask = n < n_taps
        taps += np.bincount(n[mask].ravel(), weights=amp[mask].ravel(), minlength=n_taps)
    return RIR(taps=taps, scene=scene)


def apply_reverb(clean: Waveform, rir: RIR) -> Waveform:
    """Convolve and truncate to the clean length so pairs stay aligned."""
    if clean.sample_rate != rir.sample_rate:
        raise SampleRateMismatch(
            f"waveform at {clean.sample_rate} Hz but RIR at {rir.sample_rate} Hz"
        )
    wet = fftconvolve(clean.samples, rir.taps, mode="full")[: len(clean)]
    return Waveform(wet)


def mix_noise(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add noise scaled to the requested SNR; noise is tiled or truncated first."""
    if signal.sample_rate != noise.sample_rate:
        raise SampleRateMismatch("signal and noise sample rates differ")
    p_signal = float(np.mean(signal.samples**2))
    if p_signal <= 0.0:
        raise DegenerateInput("signal is silent; SNR is undefined")
    n = noise.samples
    if len(n) == 0 or not np.any(n):
        raise DegenerateInput("noise is silent; SNR is undefined")
    if len(n) < len(signal):
        reps = int(np.ceil(len(signal) / len(n)))
        n = np.tile(n, reps)
    n = n[: len(signal)]
    p_noise = float(np.mean(n**2))
    if p_noise <= 0.0:
        raise DegenerateInput("noise segment overlapping the signal is silent")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(signal.samples + gain * n)


@dataclass
class ManifestRow:
    id: str
    clean_path: str
    degraded_path: str
    scene: SceneSpec
    split: str


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    path: Path | None = None

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.path is None:
            return p
        return self.path.parent / p

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for row in self.rows:
                obj = {
                    "id": row.id,
                    "clean_path": row.clean_path,
                    "degraded_path": row.degraded_path,
                    "scene": row.scene.to_dict(),
                    "split": row.split,
                }
                f.write(json.dumps(obj) + "\n")
        self.path = path
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                rows.append(
                    ManifestRow(
                        id=obj["id"],
                        clean_path=obj["clean_path"],
                        degraded_path=obj["degraded_path"],
                        scene=SceneSpec.from_dict(obj["scene"]),
                        split=obj["split"],
                    )
                )
        manifest = cls(rows=rows, path=path)
        ids = [r.id for r in rows]
        if len(set(ids)) != len(ids):
            raise EmptyCorpus(f"duplicate ids in manifest {path}")
        return manifest


def row_seed(global_seed: int, utterance_id: str) -> int:
    """Stable 63-bit per-row seed derived from the global seed and id."""
    digest = hashlib.sha256(f"{global_seed}:{utterance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _noise_files(noise_dir: Path) -> list[Path]:
    files = sorted(Path(noise_dir).glob("*.wav"))
    if not files:
        raise EmptyCorpus(f"no wav files in noise dir {noise_dir}")
    return files


def degrade_waveform(clean: Waveform, scene: SceneSpec, noise_dir: str | Path | None = None) -> Waveform:
    """Apply the scene's reverb (and noise, when snr_db is set) to a clean waveform.

    Fully deterministic given (clean, scene, noise_dir contents): the noise
    file choice is drawn from the scene seed, so a stored scene regenerates
    its degraded file bit-exactly.
    """
    rir = simulate_rir(scene)
    wet = apply_reverb(clean, rir)
    if scene.snr_db is not None:
        if noise_dir is None:
            raise InvalidScene("scene requests noise mixing but no noise_dir was given")
        files = _noise_files(Path(noise_dir))
        rng = np.random.default_rng([scene.seed, 0x6E6F6973])
        noise = read_wav(files[int(rng.integers(len(files)))])
        wet = mix_noise(wet, noise, scene.snr_db)
    peak = float(np.max(np.abs(wet.samples))) if len(wet) else 0.0
    if peak > 0.99:
        wet = Waveform(wet.samples * (0.99 / peak))
    return wet


def assign_splits(ids: list[str], seed: int) -> dict[str, str]:
    """Deterministic train/valid/test assignment (~80/10/10, each non-empty for n >= 3)."""
    order = list(ids)
    np.random.default_rng([seed, 0x73706C69]).shuffle(order)
    n = len(order)
    n_test = max(1, int(0.1 * n)) if n >= 3 else 0
    n_valid = max(1, int(0.1 * n)) if n >= 3 else 0
    assignment = {}
    for i, uid in enumerate(order):
        if i < n_test:
            assignment[uid] = "test"
        elif i < n_test + n_valid:
            assignment[uid] = "valid"
        else:
            assignment[uid] = "train"
    return assignment


def build_manifest(
    clean_dir: str | Path,
    noise_dir: str | Path | None,
    out_dir: str | Path,
    condition: str = "reverberant",
    seed: int = 0,
) -> DatasetManifest:
    """Degrade every clean wav in ``clean_dir`` and persist a JSONL manifest.

    Unreadable or degenerate files are skipped with a warning; an empty
    result raises EmptyCorpus.
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir)
    if condition == "noisy_reverberant" and noise_dir is None:
        raise InvalidScene("noisy_reverberant condition requires a noise_dir")
    files = sorted(clean_dir.glob("*.wav"))
    ids = [f.stem for f in files]
    splits = assign_splits(ids, seed) if ids else {}
    degraded_dir = out_dir / "degraded"
    degraded_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for f in files:
        uid = f.stem
        try:
            clean = read_wav(f)
            scene = sample_scene(row_seed(seed, uid), condition)
            degraded = degrade_waveform(clean, scene, noise_dir)
        except Exception as exc:  # noqa: BLE001 - skip-and-log contract
            log.warning("skipping %s: %s", f, exc)
            continue
        degraded_path = degraded_dir / f"{uid}.wav"
        write_wav(degraded_path, degraded)
        rows.append(
            ManifestRow(
                id=uid,
                clean_path=str(f.resolve()),
                degraded_path=str(degraded_path.relative_to(out_dir)),
                scene=scene,
                split=splits[uid],
            )
        )
    if not rows:
        raise EmptyCorpus(f"no usable wav files in {clean_dir}")
    manifest = DatasetManifest(rows=rows)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
