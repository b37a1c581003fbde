"""Mono audio loading, saving, and resampling.

Reads little-endian RIFF/WAVE files carrying PCM 16-bit or IEEE float
32-bit samples, averages multi-channel material down to mono, and writes
PCM 16-bit mono. All pipelines in this package run at 16 kHz, so loaders
typically chain into resample_linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WORKING_RATE_HZ = 16000

_FORMAT_PCM = 0x0001
_FORMAT_IEEE_FLOAT = 0x0003


class MalformedWavError(ValueError):
    """File is not a structurally valid RIFF/WAVE stream."""


class UnsupportedWavError(ValueError):
    """File is valid WAVE but uses an encoding this reader does not handle."""


@dataclass
class AudioBuffer:
    """Mono PCM samples with their sample rate.

    samples is a 1-d float64 array of amplitudes in [-1, 1];
    sample_rate_hz is a positive integer in samples per second.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def duration_seconds(self):
        return len(self.samples) / self.sample_rate_hz


def load_wav(path) -> AudioBuffer:
    """Read a WAV file as a mono AudioBuffer.

    PCM-16 samples are scaled by 1/32768 and float-32 samples are clipped
    to [-1, 1]; multiple channels are averaged. Raises FileNotFoundError,
    MalformedWavError, or UnsupportedWavError.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: missing RIFF/WAVE magic")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id = raw[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, offset + 4)
        body = raw[offset + 8:offset + 8 + chunk_size]
        if len(body) < chunk_size:
            raise MalformedWavError(f"{path}: truncated '{chunk_id.decode(errors='replace')}' chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    format_tag, n_channels, sample_rate, _, _, bits = fmt
    if n_channels < 1 or sample_rate <= 0:
        raise MalformedWavError(f"{path}: invalid channel count or sample rate")

    if format_tag == _FORMAT_PCM and bits == 16:
        frames = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif format_tag == _FORMAT_IEEE_FLOAT and bits == 32:
        frames = np.frombuffer(data, dtype="<f4").astype(np.float64)
        frames = np.clip(np.nan_to_num(frames, nan=0.0, posinf=1.0, neginf=-1.0), -1.0, 1.0)
    else:
        raise UnsupportedWavError(
            f"{path}: format tag {format_tag} at {bits} bits is not supported")

    usable = (len(frames) // n_channels) * n_channels
    if usable == 0:
        raise MalformedWavError(f"{path}: empty data chunk")
    mono = frames[:usable].reshape(-1, n_channels).mean(axis=1)
    return AudioBuffer(mono, int(sample_rate))


def save_wav(path, audio: AudioBuffer) -> None:
    """Write an AudioBuffer as PCM 16-bit mono RIFF/WAVE."""
    quantized = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = quantized.tobytes()
    header = b"".join([
        b"RIFF",
        struct.pack("<I", 36 + len(payload)),
        b"WAVE",
        b"fmt ",
        struct.pack("<IHHIIHH", 16, _FORMAT_PCM, 1, audio.sample_rate_hz,
                    audio.sample_rate_hz * 2, 2, 16),
        b"data",
        struct.pack("<I", len(payload)),
    ])
    Path(path).write_bytes(header + payload)


def resample_linear(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Resample by linear interpolation between neighboring samples.

    Output length is round(input_length * target/source); equal rates
    return an identical copy.
    """
    if target_rate_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate_hz}")
    if target_rate_hz == audio.sample_rate_hz:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    n_in = len(audio.samples)
    n_out = int(round(n_in * target_rate_hz / audio.sample_rate_hz))
    positions = np.arange(n_out) * (audio.sample_rate_hz / target_rate_hz)
    positions = np.minimum(positions, n_in - 1)
    lo = np.floor(positions).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = positions - lo
    resampled = audio.samples[lo] * (1.0 - frac) + audio.samples[hi] * frac
    return AudioBuffer(resampled, target_rate_hz)
