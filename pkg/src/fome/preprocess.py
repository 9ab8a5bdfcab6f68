"""Signal conditioning pipeline and patch segmentation.

Fixed stage order: notch -> band-pass -> resample -> detrend -> window ->
per-window exponential-moving standardization -> patching.  Filters are
causal (forward-only) IIR biquads; resampling is polyphase FIR over the
reduced rational rate ratio with a Kaiser-windowed low-pass (beta 8.6,
64 taps per phase).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import butter, iirnotch, sosfilt, upfirdn

from .errors import ConfigError, DataError, EmptyError, FormatError, IoError
from .signal_store import Recording

_KAISER_BETA = 8.6
_TAPS_PER_PHASE = 64


@dataclass
class PreprocessConfig:
    """Pipeline parameters; defaults match the 250 Hz / 6 s patch regime."""

    notch_hz: float = 50.0
    notch_q: float = 35.0
    band_lo_hz: float = 0.5
    band_hi_hz: float = 100.5
    target_rate_hz: float = 250.0
    window_len_samples: int = 1500
    ema_alpha: float = 0.05
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.notch_hz not in (50.0, 60.0):
            raise ConfigError(f"notch_hz must be 50 or 60, got {self.notch_hz}")
        if not 0 < self.band_lo_hz < self.band_hi_hz:
            raise ConfigError(f"invalid band ({self.band_lo_hz}, {self.band_hi_hz})")
        if self.window_len_samples < 2:
            raise ConfigError("window_len_samples must be >= 2")
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError(f"ema_alpha must be in (0, 1], got {self.ema_alpha}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class StandardizerState:
    """Final per-channel running statistics after a standardization pass."""

    ema: np.ndarray
    esd: np.ndarray


@dataclass(eq=False)
class PatchGrid:
    """Standardized signal cut into (channels, patches, patch_len)."""

    patches: np.ndarray
    patch_len: int
    source_rate_hz: float

    def __post_init__(self) -> None:
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 3:
            raise DataError(f"patches must be 3-D, got shape {self.patches.shape}")
        if self.patches.shape[2] != self.patch_len:
            raise DataError(
                f"patch_len {self.patch_len} != trailing dim {self.patches.shape[2]}"
            )
        if not np.all(np.isfinite(self.patches)):
            raise DataError("patch values must be finite")

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def notch_filter(r: Recording, f0_hz: float, q: float = 35.0) -> Recording:
    """Second-order IIR notch at f0, applied causally per channel."""
    nyquist = r.sample_rate_hz / 2.0
    if not 0 < f0_hz < nyquist:
        raise ConfigError(f"notch frequency {f0_hz} Hz outside (0, {nyquist}) Hz")
    b, a = iirnotch(f0_hz, q, fs=r.sample_rate_hz)
    sos = np.hstack([b, a]).reshape(1, 6)
    out = sosfilt(sos, r.data, axis=1)
    return Recording(out, r.sample_rate_hz, r.channel_labels, r.id)


def bandpass_filter(r: Recording, lo_hz: float, hi_hz: float) -> Recording:
    """4th-order Butterworth band-pass as cascaded biquads, causal."""
    nyquist = r.sample_rate_hz / 2.0
    if not 0 < lo_hz < hi_hz < nyquist:
        raise ConfigError(
            f"band ({lo_hz}, {hi_hz}) Hz invalid for Nyquist {nyquist} Hz"
        )
    sos = butter(2, [lo_hz, hi_hz], btype="bandpass", output="sos", fs=r.sample_rate_hz)
    out = sosfilt(sos, r.data, axis=1)
    return Recording(out, r.sample_rate_hz, r.channel_labels, r.id)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _rate_ratio(target_hz: float, source_hz: float) -> tuple[int, int]:
    ratio = target_hz / source_hz
    frac = Fraction(target_hz / source_hz).limit_denominator(1_000_000)
    if abs(float(frac) - ratio) > 1e-9 * ratio:
        raise ConfigError(
            f"rate ratio {target_hz}/{source_hz} has no rational form within 1e-9"
        )
    return frac.numerator, frac.denominator


def _kaiser_lowpass(up: int, down: int, source_hz: float) -> np.ndarray:
    """Anti-alias/anti-image FIR for the polyphase stage, gain `up` at DC."""
    n_taps = _TAPS_PER_PHASE * up
    cutoff_hz = min(source_hz, source_hz * up / down) / 2.0
    frac = cutoff_hz / (source_hz * up)
    n = np.arange(n_taps, dtype=np.float64)
    delay = (n_taps - 1) / 2.0
    taps = 2.0 * frac * np.sinc(2.0 * frac * (n - delay)) * np.kaiser(n_taps, _KAISER_BETA)
    return taps * (up / taps.sum())


def resample(r: Recording, target_hz: float) -> Recording:
    """Polyphase rational-rate conversion; exact identity when rates match.

    Output length is round(T * target / source); the FIR group delay is
    compensated so output sample m sits at time m / target.
    """
    if target_hz <= 0:
        raise ConfigError(f"target rate must be positive, got {target_hz}")
    up, down = _rate_ratio(target_hz, r.sample_rate_hz)
    if up == down:
        return Recording(r.data.copy(), r.sample_rate_hz, r.channel_labels, r.id)
    n_out = int(round(r.n_samples * up / down))
    if n_out < 1:
        raise EmptyError("resampled signal would be empty")
    taps = _kaiser_lowpass(up, down, r.sample_rate_hz)
    half = (len(taps) - 1) // 2
    n_pre = (-half) % down
    taps_padded = np.concatenate([np.zeros(n_pre), taps])
    skip = (half + n_pre) // down
    pad_tail = len(taps_padded) // up + down + 2
    x = np.concatenate([r.data, np.zeros((r.channels, pad_tail))], axis=1)
    filtered = upfirdn(taps_padded, x, up=up, down=down, axis=1)
    out = filtered[:, skip : skip + n_out]
    return Recording(out, target_hz, r.channel_labels, r.id)


# ---------------------------------------------------------------------------
# detrend + standardization
# ---------------------------------------------------------------------------


def detrend(r: Recording) -> Recording:
    """Remove the per-channel least-squares line."""
    if r.n_samples < 2:
        raise ConfigError("detrend needs at least two samples")
    t = np.arange(r.n_samples, dtype=np.float64)
    tc = t - t.mean()
    slope = (r.data @ tc) / (tc @ tc)
    intercept = r.data.mean(axis=1) - slope * t.mean()
    out = r.data - (intercept[:, None] + slope[:, None] * t)
    return Recording(out, r.sample_rate_hz, r.channel_labels, r.id)


def standardize_ema(
    r: Recording, cfg: PreprocessConfig
) -> tuple[Recording, StandardizerState]:
    """Exponential moving standardization, strictly left-to-right in time.

    With smoothing factor a, running stats initialized to ema = first
    sample and esd = 0, each step computes

        ema_t = a*x_t + (1-a)*ema_{t-1}
        esd_t = sqrt(a*(x_t - ema_t)^2 + (1-a)*esd_{t-1}^2)
        out_t = (x_t - ema_t) / (esd_t + eps)
    """
    a = cfg.ema_alpha
    x = r.data
    out = np.empty_like(x)
    ema = x[:, 0].copy()
    esd = np.zeros(r.channels)
    for t in range(r.n_samples):
        xt = x[:, t]
        ema = a * xt + (1.0 - a) * ema
        esd = np.sqrt(a * (xt - ema) ** 2 + (1.0 - a) * esd**2)
        out[:, t] = (xt - ema) / (esd + cfg.eps)
    rec = Recording(out, r.sample_rate_hz, r.channel_labels, r.id)
    return rec, StandardizerState(ema=ema, esd=esd)


# ---------------------------------------------------------------------------
# windowing + patching
# ---------------------------------------------------------------------------


def window_and_patch(r: Recording, cfg: PreprocessConfig, patch_len: int) -> PatchGrid:
    """Cut into complete windows, then non-overlapping patches of patch_len.

    Trailing samples short of a full window are dropped; with the default
    window == patch this is exactly floor(T / L) patches.
    """
    window = cfg.window_len_samples
    if patch_len < 1:
        raise ConfigError("patch_len must be >= 1")
    if window % patch_len != 0:
        raise ConfigError(f"patch_len {patch_len} must divide window {window}")
    n_windows = r.n_samples // window
    if n_windows == 0:
        raise EmptyError(
            f"signal of {r.n_samples} samples is shorter than one window ({window})"
        )
    total = n_windows * window
    patches = r.data[:, :total].reshape(r.channels, total // patch_len, patch_len)
    return PatchGrid(patches=patches.copy(), patch_len=patch_len, source_rate_hz=r.sample_rate_hz)


def preprocess_pipeline(
    r: Recording, cfg: PreprocessConfig, patch_len: int | None = None
) -> PatchGrid:
    """Full conditioning chain ending in a standardized PatchGrid."""
    patch_len = cfg.window_len_samples if patch_len is None else patch_len
    window = cfg.window_len_samples
    stage = notch_filter(r, cfg.notch_hz, cfg.notch_q)
    stage = bandpass_filter(stage, cfg.band_lo_hz, cfg.band_hi_hz)
    stage = resample(stage, cfg.target_rate_hz)
    stage = detrend(stage)
    n_windows = stage.n_samples // window
    if n_windows == 0:
        raise EmptyError(
            f"{stage.n_samples} samples at {cfg.target_rate_hz} Hz is shorter "
            f"than one window ({window})"
        )
    pieces = []
    for w in range(n_windows):
        segment = Recording(
            stage.data[:, w * window : (w + 1) * window], cfg.target_rate_hz
        )
        standardized, _ = standardize_ema(segment, cfg)
        pieces.append(standardized.data)
    signal = np.concatenate(pieces, axis=1)
    windowed = Recording(signal, cfg.target_rate_hz, r.channel_labels, r.id)
    return window_and_patch(windowed, cfg, patch_len)


# ---------------------------------------------------------------------------
# FEGP v1 grid file format
# ---------------------------------------------------------------------------

_GRID_MAGIC = b"FEGP"
_GRID_HEADER = struct.Struct("<4sIIId")


def grid_to_bytes(grid: PatchGrid) -> bytes:
    c, p, length = grid.patches.shape
    header = _GRID_HEADER.pack(_GRID_MAGIC, c, p, length, grid.source_rate_hz)
    return header + np.ascontiguousarray(grid.patches, dtype="<f4").tobytes()


def grid_from_bytes(buf: bytes, source: str = "<bytes>") -> PatchGrid:
    if len(buf) < _GRID_HEADER.size:
        raise FormatError(f"{source}: truncated grid header")
    magic, c, p, length, rate = _GRID_HEADER.unpack_from(buf, 0)
    if magic != _GRID_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {_GRID_MAGIC!r}")
    expected = _GRID_HEADER.size + 4 * c * p * length
    if len(buf) != expected:
        raise FormatError(f"{source}: payload is {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f4", offset=_GRID_HEADER.size)
    patches = flat.astype(np.float64).reshape(c, p, length)
    return PatchGrid(patches=patches, patch_len=length, source_rate_hz=rate)


def write_patch_grid(grid: PatchGrid, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(grid_to_bytes(grid))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_patch_grid(path) -> PatchGrid:
    try:
        with open(path, "rb") as fh:
            return grid_from_bytes(fh.read(), source=str(path))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
