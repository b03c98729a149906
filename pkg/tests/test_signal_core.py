import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resynth.errors import (
    ChannelMismatch,
    InvalidInput,
    SampleRateMismatch,
    ShapeMismatch,
)
from resynth.signal_core import (
    HOP_LENGTH,
    MEL_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    MelSpectrogram,
    Waveform,
    crop_or_pad,
    frame_count,
    hann_window,
    istft,
    l1_mel_loss,
    mel_filterbank,
    mel_spectrogram,
    read_wav,
    stft,
    write_wav,
)
from conftest import sine, white_noise


def naive_windowed_dft(frame, window):
    """Single-frame DFT oracle: explicit correlation against complex exponentials."""
    n = len(frame)
    x = frame * window
    bins = n // 2 + 1
    out = np.zeros(bins, dtype=complex)
    for k in range(bins):
        out[k] = np.sum(x * np.exp(-2j * np.pi * k * np.arange(n) / n))
    return out


class TestStft:
    def test_shape_4s(self):
        spec = stft(white_noise(4.0))
        assert spec.values.shape == (401, 513)

    def test_zeros_give_zeros(self):
        spec = stft(Waveform(np.zeros(16000)))
        assert np.all(spec.values == 0)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInput):
            stft(Waveform(np.zeros(0)))

    def test_window_shorter_than_hop_rejected(self):
        with pytest.raises(InvalidInput):
            stft(white_noise(1.0), window_ms=5.0, hop_ms=10.0)

    def test_1khz_sine_peaks_at_bin_64(self):
        # bin spacing 16000/1024 = 15.625 Hz, so 1 kHz sits exactly on bin 64
        spec = stft(sine(1000.0, 2.0))
        mags = np.abs(spec.values)
        interior = mags[5:-5]
        assert np.all(np.argmax(interior, axis=1) == 64)

    def test_single_frame_matches_naive_dft(self):
        w = white_noise(0.2, seed=7)
        spec = stft(w)
        window = hann_window(1024)
        # frame k=5 covers samples [5*160-512, 5*160+512) of the original signal
        start = 5 * HOP_LENGTH - 512
        frame = w.samples[start : start + 1024]
        oracle = naive_windowed_dft(frame, window)
        np.testing.assert_allclose(spec.values[5], oracle, atol=1e-8)


class TestIstft:
    def test_roundtrip_white_noise(self):
        w = white_noise(4.0, seed=3)
        out = istft(stft(w))
        err = np.linalg.norm(out.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-6

    def test_zeros_roundtrip(self):
        out = istft(stft(Waveform(np.zeros(32000))))
        assert np.allclose(out.samples, 0.0)

    def test_roundtrip_speech_like_max_deviation(self):
        # harmonic pulse train with envelope, a stand-in for a recorded clip
        t = np.arange(SAMPLE_RATE * 2) / SAMPLE_RATE
        x = sum(np.sin(2 * np.pi * 120 * k * t) / k for k in range(1, 9))
        x *= 0.3 * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t))
        w = Waveform(x)
        out = istft(stft(w))
        assert np.max(np.abs(out.samples - w.samples)) < 1e-5

    def test_roundtrip_many_random_inputs(self):
        for seed in range(100):
            n = 1600 + 173 * seed
            w = white_noise(n / SAMPLE_RATE, seed=seed)
            out = istft(stft(w))
            err = np.linalg.norm(out.samples - w.samples) / np.linalg.norm(w.samples)
            assert err < 1e-6, f"seed {seed}: {err}"

    def test_inconsistent_metadata_rejected(self):
        spec = stft(white_noise(1.0))
        spec.hop = 2048  # hop > window is not COLA-valid
        with pytest.raises(InvalidInput):
            istft(spec)


class TestMelSpectrogram:
    def test_shape_4s(self):
        mel = mel_spectrogram(white_noise(4.0))
        assert mel.values.shape == (401, 128)

    def test_silence_hits_log_floor(self):
        mel = mel_spectrogram(Waveform(np.zeros(16000)))
        assert np.allclose(mel.values, np.log(MEL_FLOOR))
        assert mel.values[0, 0] == pytest.approx(-11.5129, abs=1e-3)

    def test_matches_filterbank_matrix_oracle(self):
        w = white_noise(1.0, seed=11, amplitude=1.0)
        mel = mel_spectrogram(w)
        # oracle: explicit per-frame power spectrum times explicit triangle matrix
        spec = stft(w)
        fb = mel_filterbank()
        oracle = np.log(np.maximum((np.abs(spec.values) ** 2) @ fb.T, MEL_FLOOR))
        np.testing.assert_allclose(mel.values, oracle, atol=1e-6)

    def test_wrong_sample_rate_rejected(self):
        w = white_noise(1.0)
        w.sample_rate = 8000
        with pytest.raises(SampleRateMismatch):
            mel_spectrogram(w)

    def test_scale_monotone(self):
        w = white_noise(0.5, seed=5, amplitude=0.1)
        base = mel_spectrogram(w).values
        louder = mel_spectrogram(Waveform(w.samples * 3.0)).values
        assert np.all(louder >= base - 1e-12)

    def test_deterministic(self):
        w = white_noise(0.5, seed=6)
        a = mel_spectrogram(w).values
        b = mel_spectrogram(w).values
        assert np.array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=1600, max_value=96000))
    def test_framing_convention(self, n):
        mel = mel_spectrogram(Waveform(np.zeros(n)))
        assert mel.values.shape[0] == n // HOP_LENGTH + 1
        assert frame_count(n) == n // HOP_LENGTH + 1


class TestL1MelLoss:
    def test_identical_is_zero(self):
        m = mel_spectrogram(white_noise(0.5))
        assert l1_mel_loss(m, m) == 0.0

    def test_offset_by_one_is_one(self):
        m = mel_spectrogram(white_noise(0.5))
        shifted = MelSpectrogram(m.values + 1.0)
        assert l1_mel_loss(shifted, m) == pytest.approx(1.0)

    def test_hand_summed_pair(self):
        # oracle: |diffs| = [0.5, 1, 2, 0, 0.25, 0.75] summed by hand -> 4.5/6
        a = np.zeros((2, N_MELS))
        b = np.zeros((2, N_MELS))
        a[0, :3] = [0.5, -1.0, 2.0]
        a[1, :3] = [0.0, 0.25, -0.75]
        loss = l1_mel_loss(MelSpectrogram(a), MelSpectrogram(b))
        assert loss == pytest.approx(4.5 / (2 * N_MELS))

    def test_symmetric_nonnegative(self, rng):
        a = MelSpectrogram(rng.normal(size=(7, N_MELS)))
        b = MelSpectrogram(rng.normal(size=(7, N_MELS)))
        assert l1_mel_loss(a, b) == pytest.approx(l1_mel_loss(b, a))
        assert l1_mel_loss(a, b) > 0

    def test_shape_mismatch(self):
        a = MelSpectrogram(np.zeros((3, N_MELS)))
        b = MelSpectrogram(np.zeros((4, N_MELS)))
        with pytest.raises(ShapeMismatch):
            l1_mel_loss(a, b)


class TestCropOrPad:
    def test_long_input_cropped_with_valid_offset(self):
        w = white_noise(5.0, seed=1)
        for seed in range(20):
            out = crop_or_pad(w, 4.0, seed=seed)
            assert len(out) == 64000
            # locate the crop: exact subsequence of the source
            starts = [
                s
                for s in range(0, 16001, 1)
                if np.array_equal(w.samples[s : s + 64000], out.samples)
            ]
            assert starts and 0 <= starts[0] <= 16000

    def test_short_input_zero_padded(self):
        w = white_noise(3.0, seed=2)
        out = crop_or_pad(w, 4.0, seed=0)
        assert len(out) == 64000
        np.testing.assert_array_equal(out.samples[:48000], w.samples)
        assert np.all(out.samples[48000:] == 0)

    def test_exact_length_unchanged(self):
        w = white_noise(4.0, seed=3)
        out = crop_or_pad(w, 4.0, seed=9)
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_deterministic_per_seed(self):
        w = white_noise(6.0, seed=4)
        a = crop_or_pad(w, 4.0, seed=42)
        b = crop_or_pad(w, 4.0, seed=42)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_empty_input_gives_zeros(self):
        out = crop_or_pad(Waveform(np.zeros(0)), 1.0, seed=0)
        assert len(out) == SAMPLE_RATE
        assert np.all(out.samples == 0)


class TestWavIO:
    def test_roundtrip(self, tmp_path):
        w = white_noise(0.5, seed=8, amplitude=0.15)
        assert np.max(np.abs(w.samples)) < 1.0  # stays in quantizer range
        path = tmp_path / "x.wav"
        write_wav(path, w)
        back = read_wav(path)
        assert len(back) == len(w)
        assert np.max(np.abs(back.samples - w.samples)) <= 0.5 / 32768

    def test_rejects_wrong_rate(self, tmp_path):
        import wave as wavemod

        path = tmp_path / "bad.wav"
        with wavemod.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(8000)
            f.writeframes(b"\x00\x00" * 100)
        with pytest.raises(SampleRateMismatch):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        import wave as wavemod

        path = tmp_path / "stereo.wav"
        with wavemod.open(str(path), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(16000)
            f.writeframes(b"\x00\x00\x00\x00" * 100)
        with pytest.raises(ChannelMismatch):
            read_wav(path)
