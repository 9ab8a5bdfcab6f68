"""Recording data model, bit-exact file I/O, and synthetic-signal generation.

Two on-disk formats are supported.  The authoritative one is the binary
"FEEG v1" layout::

    magic 0x46 0x45 0x45 0x47 ("FEEG")
    u8  version = 1
    u32 little-endian channel count C
    u64 little-endian sample count T
    f64 little-endian sample rate in Hz
    C*T f32 little-endian samples, channel-major

The CSV alternative is column-per-channel with a two-line header: line 1 is
``# rate_hz=<float>``, line 2 the comma-separated channel labels, then T
rows of C values.

Samples are stored as 32-bit floats on disk and widened to float64 in
memory.  Everything produced by `generate_synthetic` is quantized to the
32-bit storage grid up front, so write -> read round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError, FormatError, IoError, SpecError
from .rng import Rng

_MAGIC = b"FEEG"
_VERSION = 1
_HEADER = struct.Struct("<4sBIQd")


@dataclass(eq=False)
class Recording:
    """A multi-channel signal with shape (channels, samples), microvolt scale."""

    data: np.ndarray
    sample_rate_hz: float
    channel_labels: list[str] | None = None
    id: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"data must be 2-D (channels, samples), got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DataError(f"need at least one channel and one sample, got {self.data.shape}")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.data)):
            c, t = _first_nonfinite(self.data)
            raise DataError(f"non-finite sample at channel {c}, index {t}")
        if self.channel_labels is not None and len(self.channel_labels) != self.data.shape[0]:
            raise DataError(
                f"{len(self.channel_labels)} labels for {self.data.shape[0]} channels"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


class Component(NamedTuple):
    """One sinusoid: amplitude * sin(2*pi*f*t + phase) on a single channel."""

    channel: int
    frequency_hz: float
    amplitude: float
    phase_rad: float


@dataclass
class SyntheticSpec:
    """Recipe for a reproducible synthetic recording."""

    channels: int
    duration_s: float
    sample_rate_hz: float
    seed: int
    components: list[Component] = field(default_factory=list)
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise SpecError(f"channels must be >= 1, got {self.channels}")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise SpecError("duration_s and sample_rate_hz must be positive")
        if self.noise_std < 0:
            raise SpecError(f"noise_std must be >= 0, got {self.noise_std}")
        self.components = [Component(*c) for c in self.components]
        nyquist = self.sample_rate_hz / 2.0
        for comp in self.components:
            if not 0 <= comp.channel < self.channels:
                raise SpecError(f"component channel {comp.channel} out of range")
            if comp.frequency_hz >= nyquist:
                raise SpecError(
                    f"component frequency {comp.frequency_hz} Hz >= Nyquist {nyquist} Hz"
                )


def _first_nonfinite(data: np.ndarray) -> tuple[int, int]:
    bad = np.argwhere(~np.isfinite(data))
    return int(bad[0][0]), int(bad[0][1])


def generate_synthetic(spec: SyntheticSpec) -> Recording:
    """Render a SyntheticSpec into a Recording.

    Sample t of channel c is the sum of that channel's sinusoid components
    plus N(0, noise_std) noise drawn row-major over (channel, time) from the
    seeded stream.  Output is quantized to the float32 storage grid.
    """
    n = int(round(spec.duration_s * spec.sample_rate_hz))
    t = np.arange(n, dtype=np.float64) / spec.sample_rate_hz
    data = np.zeros((spec.channels, n), dtype=np.float64)
    for comp in spec.components:
        data[comp.channel] += comp.amplitude * np.sin(
            2.0 * np.pi * comp.frequency_hz * t + comp.phase_rad
        )
    if spec.noise_std > 0:
        noise = Rng(spec.seed).normals(spec.channels * n)
        data += spec.noise_std * noise.reshape(spec.channels, n)
    data = data.astype(np.float32).astype(np.float64)
    return Recording(data=data, sample_rate_hz=spec.sample_rate_hz, id=f"synth-{spec.seed}")


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------


def recording_to_bytes(r: Recording) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, r.channels, r.n_samples, r.sample_rate_hz)
    samples = np.ascontiguousarray(r.data, dtype="<f4")
    return header + samples.tobytes()


def recording_from_bytes(buf: bytes, source: str = "<bytes>") -> Recording:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, c, t, rate = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + 4 * c * t
    if len(buf) != expected:
        raise FormatError(f"{source}: payload is {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    data = flat.astype(np.float64).reshape(c, t)
    if not np.all(np.isfinite(data)):
        ch, idx = _first_nonfinite(data)
        raise DataError(f"{source}: non-finite sample at channel {ch}, index {idx}")
    return Recording(data=data, sample_rate_hz=rate, id=source)


# ---------------------------------------------------------------------------
# csv format
# ---------------------------------------------------------------------------


def _recording_to_csv(r: Recording) -> str:
    labels = r.channel_labels or [f"ch{i}" for i in range(r.channels)]
    lines = [f"# rate_hz={r.sample_rate_hz!r}", ",".join(labels)]
    cols = r.data.astype(np.float32).T
    for row in cols:
        lines.append(",".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"


def _recording_from_csv(text: str, source: str) -> Recording:
    lines = text.splitlines()
    if len(lines) < 3:
        raise FormatError(f"{source}: need a 2-line header plus at least one sample row")
    if not lines[0].startswith("# rate_hz="):
        raise FormatError(f"{source}: first line must be '# rate_hz=<float>'")
    try:
        rate = float(lines[0].removeprefix("# rate_hz="))
    except ValueError as exc:
        raise FormatError(f"{source}: unparseable sample rate: {lines[0]!r}") from exc
    labels = [s.strip() for s in lines[1].split(",")]
    c = len(labels)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != c:
            raise FormatError(
                f"{source}: line {lineno} has {len(parts)} values for {c} channels"
            )
        try:
            rows.append([np.float32(p) for p in parts])
        except ValueError as exc:
            raise FormatError(f"{source}: line {lineno}: unparseable value") from exc
    data = np.array(rows, dtype=np.float32).T.astype(np.float64)
    if not np.all(np.isfinite(data)):
        ch, idx = _first_nonfinite(data)
        raise DataError(f"{source}: non-finite sample at channel {ch}, index {idx}")
    return Recording(data=data, sample_rate_hz=rate, channel_labels=labels, id=source)


# ---------------------------------------------------------------------------
# file-level API
# ---------------------------------------------------------------------------


def write_recording(r: Recording, path, format: str = "binary") -> None:
    """Serialize ``r`` to ``path``; rejects invalid data before writing."""
    if not np.all(np.isfinite(r.data)):
        c, t = _first_nonfinite(r.data)
        raise DataError(f"refusing to write non-finite sample at channel {c}, index {t}")
    if format == "binary":
        payload: bytes = recording_to_bytes(r)
        mode = "wb"
    elif format == "csv":
        payload = _recording_to_csv(r)
        mode = "w"
    else:
        raise FormatError(f"unknown format {format!r}")
    try:
        with open(path, mode) as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_recording(path, format: str = "binary") -> Recording:
    """Load a Recording from ``path`` in the given format."""
    try:
        if format == "binary":
            with open(path, "rb") as fh:
                return recording_from_bytes(fh.read(), source=str(path))
        elif format == "csv":
            with open(path, "r") as fh:
                return _recording_from_csv(fh.read(), source=str(path))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    raise FormatError(f"unknown format {format!r}")


def read_recording_stream(stream: io.BufferedIOBase) -> Recording:
    """Read one binary recording from an already-open byte stream."""
    return recording_from_bytes(stream.read(), source="<stream>")
