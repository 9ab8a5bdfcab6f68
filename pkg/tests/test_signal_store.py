"""Recording I/O round-trips, format errors, and synthetic generation."""

import struct

import numpy as np
import pytest

from fome.errors import DataError, FormatError, IoError, SpecError
from fome.signal_store import (
    Component,
    Recording,
    SyntheticSpec,
    generate_synthetic,
    read_recording,
    recording_to_bytes,
    write_recording,
)


def random_f32_recording(rng, channels, samples, rate):
    data = rng.standard_normal((channels, samples)).astype(np.float32).astype(np.float64)
    return Recording(data, rate, id="test")


class TestBinaryFormat:
    def test_round_trip_bit_identical(self, rng, tmp_path):
        r = random_f32_recording(rng, 3, 500, 250.0)
        path = tmp_path / "r.feeg"
        write_recording(r, path)
        back = read_recording(path)
        assert np.array_equal(back.data, r.data)
        assert back.sample_rate_hz == r.sample_rate_hz
        assert back.channels == 3 and back.n_samples == 500

    def test_file_constructed_byte_by_byte(self, tmp_path):
        c, t, rate = 3, 1500, 250.0
        payload = bytearray()
        payload += b"FEEG"
        payload += bytes([1])
        payload += struct.pack("<I", c)
        payload += struct.pack("<Q", t)
        payload += struct.pack("<d", rate)
        values = np.arange(c * t, dtype="<f4") * 0.25
        payload += values.tobytes()
        path = tmp_path / "built.feeg"
        path.write_bytes(bytes(payload))
        r = read_recording(path)
        assert r.channels == 3 and r.n_samples == 1500
        assert r.sample_rate_hz == 250.0
        assert np.array_equal(r.data, values.astype(np.float64).reshape(c, t))

    def test_double_round_trip_byte_compare(self, rng, tmp_path):
        spec = SyntheticSpec(channels=64, duration_s=10.0, sample_rate_hz=500.0,
                             seed=7, noise_std=12.5,
                             components=[Component(0, 11.0, 30.0, 0.4)])
        r = generate_synthetic(spec)
        assert r.channels == 64 and r.n_samples == 5000
        p1, p2 = tmp_path / "a.feeg", tmp_path / "b.feeg"
        write_recording(r, p1)
        write_recording(read_recording(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_single_sample_round_trip(self, tmp_path):
        r = Recording(np.zeros((1, 1)), 100.0)
        path = tmp_path / "tiny.feeg"
        write_recording(r, path)
        back = read_recording(path)
        assert np.array_equal(back.data, r.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feeg"
        path.write_bytes(b"NOPE" + bytes(30))
        with pytest.raises(FormatError):
            read_recording(path)

    def test_truncated_payload(self, tmp_path, rng):
        r = random_f32_recording(rng, 2, 100, 250.0)
        blob = recording_to_bytes(r)
        path = tmp_path / "short.feeg"
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            read_recording(path)

    def test_nan_rejected_before_write(self, tmp_path):
        r = Recording(np.ones((2, 4)), 250.0)
        r.data[1, 2] = np.nan
        path = tmp_path / "nan.feeg"
        with pytest.raises(DataError, match="channel 1, index 2"):
            write_recording(r, path)
        assert not path.exists()

    def test_unwritable_path(self, rng):
        r = random_f32_recording(rng, 1, 10, 100.0)
        with pytest.raises(IoError):
            write_recording(r, "/nonexistent-dir/x.feeg")


class TestCsvFormat:
    def test_round_trip(self, rng, tmp_path):
        r = Recording(
            rng.standard_normal((2, 40)).astype(np.float32).astype(np.float64),
            512.0,
            channel_labels=["Fz", "Cz"],
        )
        path = tmp_path / "r.csv"
        write_recording(r, path, format="csv")
        back = read_recording(path, format="csv")
        assert back.channel_labels == ["Fz", "Cz"]
        assert back.sample_rate_hz == 512.0
        assert np.array_equal(back.data, r.data)

    def test_arity_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# rate_hz=250.0\ncha,chb\n1.0,2.0\n1.0,2.0,3.0\n")
        with pytest.raises(FormatError, match="line 4"):
            read_recording(path, format="csv")

    def test_missing_rate_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cha,chb\n1.0,2.0\n1.0,2.0\n")
        with pytest.raises(FormatError):
            read_recording(path, format="csv")


class TestGenerateSynthetic:
    def test_sine_starts_at_zero(self):
        spec = SyntheticSpec(channels=1, duration_s=1.0, sample_rate_hz=250.0, seed=0,
                             components=[Component(0, 10.0, 1.0, 0.0)])
        r = generate_synthetic(spec)
        assert r.data[0, 0] == 0.0

    def test_quarter_period_lattice(self):
        fs = 100.0
        spec = SyntheticSpec(channels=1, duration_s=0.12, sample_rate_hz=fs, seed=0,
                             components=[Component(0, fs / 4.0, 1.0, 0.0)])
        r = generate_synthetic(spec)
        expected = np.array([0.0, 1.0, 0.0, -1.0] * 3)
        assert np.allclose(r.data[0], expected, atol=1e-6)

    def test_seed_determinism(self):
        spec = dict(channels=2, duration_s=0.5, sample_rate_hz=250.0, noise_std=1.0,
                    components=[Component(1, 12.0, 2.0, 0.1)])
        a = generate_synthetic(SyntheticSpec(seed=5, **spec))
        b = generate_synthetic(SyntheticSpec(seed=5, **spec))
        c = generate_synthetic(SyntheticSpec(seed=6, **spec))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_superposition(self):
        spec = SyntheticSpec(channels=2, duration_s=0.2, sample_rate_hz=250.0, seed=0,
                             components=[Component(0, 10.0, 1.0, 0.0),
                                         Component(0, 20.0, 0.5, 1.0)])
        r = generate_synthetic(spec)
        t = np.arange(50) / 250.0
        expected = np.sin(2 * np.pi * 10 * t) + 0.5 * np.sin(2 * np.pi * 20 * t + 1.0)
        assert np.allclose(r.data[0], expected, atol=1e-6)
        assert np.allclose(r.data[1], 0.0)

    def test_nyquist_rejected(self):
        with pytest.raises(SpecError):
            SyntheticSpec(channels=1, duration_s=1.0, sample_rate_hz=100.0, seed=0,
                          components=[Component(0, 50.0, 1.0, 0.0)])

    def test_bad_channel_rejected(self):
        with pytest.raises(SpecError):
            SyntheticSpec(channels=1, duration_s=1.0, sample_rate_hz=100.0, seed=0,
                          components=[Component(3, 10.0, 1.0, 0.0)])


class TestSpectralCrossCheck:
    def test_zero_noise_tone_peaks_at_nearest_bin(self):
        from fome.spectral import psd

        fs, seconds = 250.0, 4.0
        for freq in (10.0, 12.3, 40.7):
            spec = SyntheticSpec(channels=1, duration_s=seconds, sample_rate_hz=fs,
                                 seed=0, components=[Component(0, freq, 1.0, 0.3)])
            r = generate_synthetic(spec)
            spectrum = psd(r.data[0], fs)
            peak = int(np.argmax(spectrum))
            assert peak == round(freq * r.n_samples / fs)


class TestRecordingInvariants:
    def test_rejects_nonfinite(self):
        data = np.ones((2, 3))
        data[0, 1] = np.inf
        with pytest.raises(DataError, match="channel 0, index 1"):
            Recording(data, 250.0)

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            Recording(np.zeros((0, 10)), 250.0)

    def test_label_count_checked(self):
        with pytest.raises(DataError):
            Recording(np.zeros((2, 4)), 250.0, channel_labels=["one"])
