"""Speech resynthesis toolkit: generative enhancement of noisy-reverberant audio."""

__version__ = "0.1.0"
