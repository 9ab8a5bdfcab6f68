"""Fourier analysis of patches: spectra, power density, and band powers.

The transform core is an iterative radix-2 Cooley-Tukey FFT plus Bluestein's
chirp-z algorithm for arbitrary lengths, so the canonical 1500-sample patch
(2^2 * 3 * 5^3) is handled exactly, without padding the signal itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .preprocess import PatchGrid

_twiddle_cache: dict[int, np.ndarray] = {}
_reverse_cache: dict[int, np.ndarray] = {}


def _bit_reverse_indices(n: int) -> np.ndarray:
    if n not in _reverse_cache:
        bits = n.bit_length() - 1
        idx = np.arange(n, dtype=np.int64)
        rev = np.zeros(n, dtype=np.int64)
        for _ in range(bits):
            rev = (rev << 1) | (idx & 1)
            idx >>= 1
        _reverse_cache[n] = rev
    return _reverse_cache[n]


def _stage_twiddles(size: int) -> np.ndarray:
    if size not in _twiddle_cache:
        half = size // 2
        _twiddle_cache[size] = np.exp(-2j * np.pi * np.arange(half) / size)
    return _twiddle_cache[size]


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """FFT along the last axis; length must be a power of two."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = np.ascontiguousarray(x[..., _bit_reverse_indices(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        w = _stage_twiddles(size)
        y = y.reshape(lead + (n // size, size))
        even = y[..., :half]
        odd = y[..., half:] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return y.reshape(lead + (n,))


def _bluestein(x: np.ndarray) -> np.ndarray:
    """Arbitrary-length FFT along the last axis via chirp-z convolution."""
    n = x.shape[-1]
    ns = np.arange(n, dtype=np.int64)
    # quadratic phase reduced mod 2n keeps the trig arguments small
    chirp = np.exp(-1j * np.pi * ((ns * ns) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    if n > 1:
        b[-(n - 1):] = np.conj(chirp)[1:][::-1]
    spec = _fft_pow2(a) * _fft_pow2(b)
    conv = np.conj(_fft_pow2(np.conj(spec))) / m
    return conv[..., :n] * chirp


def dft(x: np.ndarray) -> np.ndarray:
    """Discrete Fourier transform along the last axis.

    Unnormalized convention: X_k = sum_n x_n * exp(-2i*pi*k*n/L), so the
    inverse divides by L and Parseval reads sum|X|^2 = L * sum|x|^2.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1:
        raise ConfigError("dft needs at least one sample")
    if n == 1:
        return x.astype(np.complex128)
    if n & (n - 1) == 0:
        return _fft_pow2(x.astype(np.complex128))
    return _bluestein(x.astype(np.complex128))


def idft(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of `dft` (complex output; take .real for real signals)."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    n = spectrum.shape[-1]
    return np.conj(dft(np.conj(spectrum))) / n


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann taper."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def psd(patch: np.ndarray, rate_hz: float, taper: str = "none") -> np.ndarray:
    """One-sided power spectral density of a patch (last axis).

    P(k) = |X_k|^2 / T with T the patch duration in seconds; bins 0..L//2
    are retained (real-input symmetry) with no one-sided doubling factor.
    """
    patch = np.asarray(patch, dtype=np.float64)
    length = patch.shape[-1]
    if length < 2:
        raise ConfigError("psd needs at least two samples")
    if taper == "hann":
        patch = patch * hann_window(length)
    elif taper != "none":
        raise ConfigError(f"unknown taper {taper!r}")
    duration_s = length / rate_hz
    spectrum = dft(patch)
    return (np.abs(spectrum[..., : length // 2 + 1]) ** 2) / duration_s


def psd_frequencies(length: int, rate_hz: float) -> np.ndarray:
    """Center frequency in Hz of each one-sided PSD bin."""
    return np.arange(length // 2 + 1, dtype=np.float64) * (rate_hz / length)


_EIGHT_BANDS: tuple[tuple[float, float], ...] = (
    (1.0, 4.0),    # delta
    (4.0, 8.0),    # theta
    (8.0, 13.0),   # alpha
    (13.0, 30.0),  # beta
    (30.0, 50.0),  # gamma1
    (50.0, 70.0),  # gamma2
    (70.0, 90.0),  # gamma3
    (90.0, 100.0), # gamma4
)

BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma1", "gamma2", "gamma3", "gamma4")


@dataclass(frozen=True)
class BandScheme:
    """Ordered frequency bands; shared edges resolve half-open, low side wins.

    A bin at frequency f belongs to band [lo, hi) when lo <= f < hi; the
    final band additionally includes its upper edge.
    """

    edges: tuple[tuple[float, float], ...] = _EIGHT_BANDS

    def __post_init__(self) -> None:
        prev_hi = 0.0
        for lo, hi in self.edges:
            if not lo < hi:
                raise ConfigError(f"band ({lo}, {hi}) is not ascending")
            if lo < prev_hi:
                raise ConfigError(f"band ({lo}, {hi}) overlaps the previous one")
            prev_hi = hi

    @property
    def n_bands(self) -> int:
        return len(self.edges)

    def bin_slices(self, length: int, rate_hz: float) -> list[np.ndarray]:
        """Boolean masks selecting each band's one-sided PSD bins."""
        freqs = psd_frequencies(length, rate_hz)
        nyquist = rate_hz / 2.0
        masks = []
        for i, (lo, hi) in enumerate(self.edges):
            if hi > nyquist:
                raise ConfigError(f"band ({lo}, {hi}) exceeds Nyquist {nyquist} Hz")
            mask = (freqs >= lo) & (freqs < hi)
            if i == len(self.edges) - 1:
                mask |= freqs == hi
            masks.append(mask)
        return masks


@dataclass(eq=False)
class BandPowerTensor:
    """Per-patch log10 band powers with shape (channels, patches, n_bands)."""

    values: np.ndarray
    scheme: BandScheme = field(default_factory=BandScheme)


def band_powers(grid: PatchGrid, scheme: BandScheme | None = None, taper: str = "none") -> BandPowerTensor:
    """Log-compressed in-band PSD sums for every patch.

    Per patch and band: log10(1 + sum of P(f) over the band's bins), which
    is always >= 0 and exactly invertible via 10**v - 1.
    """
    scheme = scheme or BandScheme()
    spectra = psd(grid.patches, grid.source_rate_hz, taper=taper)
    masks = scheme.bin_slices(grid.patch_len, grid.source_rate_hz)
    c, p = grid.patches.shape[:2]
    values = np.empty((c, p, scheme.n_bands), dtype=np.float64)
    for i, mask in enumerate(masks):
        values[:, :, i] = np.log10(spectra[:, :, mask].sum(axis=-1) + 1.0)
    return BandPowerTensor(values=values, scheme=scheme)
