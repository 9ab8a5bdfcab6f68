"""Shared fixtures and tone-measurement harness."""

from __future__ import annotations

import numpy as np
import pytest

from fome.signal_store import Recording


def make_tone(freq_hz: float, fs: float, duration_s: float, channels: int = 1,
              amplitude: float = 1.0, phase: float = 0.0) -> Recording:
    t = np.arange(int(round(duration_s * fs))) / fs
    x = amplitude * np.sin(2 * np.pi * freq_hz * t + phase)
    return Recording(np.tile(x, (channels, 1)), fs)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def steady_state_db(processed: Recording, original: Recording, settle_s: float = 2.0) -> float:
    """Level change in dB after discarding the filter transient."""
    skip = int(settle_s * original.sample_rate_hz)
    return 20.0 * np.log10(
        rms(processed.data[:, skip:]) / rms(original.data[:, skip:])
    )


def interior_tone_amplitude(x: np.ndarray, fs: float, freq_hz: float) -> tuple[int, float]:
    """(peak bin, amplitude) from the middle half of a real tone signal.

    The trim keeps filter edge transients out of the estimate; callers
    arrange durations so the tone lands exactly on a bin.
    """
    n = x.shape[-1]
    seg = x[n // 4 : n - n // 4]
    spectrum = np.abs(np.fft.rfft(seg))
    peak = int(np.argmax(spectrum[1:])) + 1
    return peak, 2.0 * spectrum[peak] / seg.size


@pytest.fixture
def rng():
    return np.random.default_rng(42)
