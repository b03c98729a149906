import numpy as np
import pytest

from resynth.signal_core import SAMPLE_RATE, Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds=1.0, amplitude=1.0, sr=SAMPLE_RATE):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t))


def white_noise(seconds=1.0, seed=0, sr=SAMPLE_RATE, amplitude=0.5):
    rng = np.random.default_rng(seed)
    return Waveform(amplitude * rng.standard_normal(int(seconds * sr)))
