"""Spectrogram analysis and synthesis.

Converts between time-domain audio and (mel) magnitude spectrograms and
reconstructs phase with the Griffin-Lim iteration. The default profile is
a 1024-point FFT, hop 256, periodic Hann window, and a 128-band mel
filterbank spanning 40-8000 Hz at a 16 kHz sample rate.

The inverse STFT solves the least-squares synthesis problem exactly,
including the frames that overlap the reflective center padding, so that
repeated analysis/synthesis round trips contract rather than drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer, WORKING_RATE_HZ


class DegenerateBandError(ValueError):
    """A mel triangle is narrower than one FFT bin; n_mels is too large."""


class ZeroEnvelopeError(ValueError):
    """The window/hop combination leaves samples no frame can reconstruct."""


def periodic_hann(n_fft: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)


@dataclass
class StftConfig:
    """Analysis window length, frame advance, and window shape."""

    n_fft: int = 1024
    hop: int = 256
    window: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")
        if self.window is None:
            self.window = periodic_hann(self.n_fft)
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.window.shape != (self.n_fft,):
            raise ValueError("window length must equal n_fft")
        if self.window.min() < 0.0 or self.window.max() > 1.0:
            raise ValueError("window values must lie in [0, 1]")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1


@dataclass
class ComplexSpectrogram:
    """Complex STFT bins, laid out (n_fft/2 + 1) x frames."""

    bins: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bin rows, got {self.bins.shape}")


@dataclass
class Spectrogram:
    """Non-negative magnitude spectrogram, (n_fft/2 + 1) x frames."""

    magnitudes: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[0] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bin rows, got {self.magnitudes.shape}")
        if self.magnitudes.size and self.magnitudes.min() < 0.0:
            raise ValueError("magnitudes must be non-negative")


@dataclass
class MelFilterbank:
    """Triangular mel-spaced filters as an n_mels x (n_fft/2 + 1) matrix."""

    weights: np.ndarray
    n_mels: int
    f_min_hz: float
    f_max_hz: float
    sample_rate_hz: int
    n_fft: int


@dataclass
class MelSpectrogram:
    """Non-negative mel-band magnitudes, n_mels x frames."""

    magnitudes: np.ndarray
    filterbank: MelFilterbank

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[0] != self.filterbank.n_mels:
            raise ValueError(
                f"expected {self.filterbank.n_mels} mel rows, got {self.magnitudes.shape}")


def hz_to_mel(f):
    """Map frequency in Hz to mel, 2595*log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    """Inverse of hz_to_mel."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_mels=128, f_min_hz=40.0, f_max_hz=8000.0,
                         sample_rate_hz=WORKING_RATE_HZ, n_fft=1024) -> MelFilterbank:
    """Construct overlapping triangular filters equally spaced in mel.

    Peak frequencies are the n_mels interior points of an (n_mels + 2)-point
    mel grid from f_min to f_max; each triangle spans its two neighbors.
    Raises DegenerateBandError when a triangle captures no FFT bin.
    """
    if not (0 <= f_min_hz < f_max_hz <= sample_rate_hz / 2):
        raise ValueError(f"need 0 <= f_min < f_max <= Nyquist, got [{f_min_hz}, {f_max_hz}]")
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")

    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_min_hz), hz_to_mel(f_max_hz), n_mels + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate_hz / n_fft)

    lower = edges_hz[:-2, None]
    peak = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (fft_freqs[None, :] - lower) / (peak - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - peak)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.where(~(weights > 0.0).any(axis=1))[0]
    if empty.size:
        raise DegenerateBandError(
            f"filter {empty[0]} spans less than one FFT bin; "
            f"reduce n_mels (got {n_mels}) or increase n_fft")
    return MelFilterbank(weights, n_mels, float(f_min_hz), float(f_max_hz),
                         int(sample_rate_hz), int(n_fft))


def stft(audio: AudioBuffer, config: StftConfig | None = None) -> ComplexSpectrogram:
    """Windowed FFT of reflect-center-padded audio.

    Frame t covers padded samples [t*hop, t*hop + n_fft); the frame count
    is floor(len/hop) + 1.
    """
    if config is None:
        config = StftConfig()
    samples = np.asarray(audio.samples, dtype=np.float64)
    if samples.size < 1:
        raise ValueError("cannot analyze empty audio")
    pad = config.n_fft // 2
    padded = np.pad(samples, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.n_fft)[::config.hop]
    bins = np.fft.rfft(frames * config.window, axis=1).T
    return ComplexSpectrogram(bins, config)


def _fold_indices(interior_len: int, pad: int) -> np.ndarray:
    # Source index in the unpadded signal for every padded position. Built
    # with np.pad itself so the mapping matches reflect-mode exactly.
    return np.pad(np.arange(interior_len), pad, mode="reflect")


def istft(spec: ComplexSpectrogram, sample_rate_hz: int = WORKING_RATE_HZ) -> AudioBuffer:
    """Least-squares inverse STFT.

    Overlap-adds windowed frames and normalizes by the summed squared
    window envelope, folding contributions that land in the reflective
    padding back onto their interior samples. For frames produced by
    stft(), this reconstructs the analyzed samples exactly (the trailing
    sub-hop remainder is dropped).
    """
    config = spec.config
    n_frames = spec.bins.shape[1]
    pad = config.n_fft // 2
    out_len = (n_frames - 1) * config.hop
    if out_len <= 0:
        return AudioBuffer(np.zeros(0), sample_rate_hz)

    frames = np.fft.irfft(spec.bins.T, n=config.n_fft, axis=1)
    weighted = frames * config.window
    padded_len = out_len + 2 * pad
    signal_acc = np.zeros(padded_len)
    envelope_acc = np.zeros(padded_len)
    win_sq = config.window * config.window
    for t in range(n_frames):
        start = t * config.hop
        signal_acc[start:start + config.n_fft] += weighted[t]
        envelope_acc[start:start + config.n_fft] += win_sq

    fold = _fold_indices(out_len, pad)
    signal = np.bincount(fold, weights=signal_acc, minlength=out_len)
    envelope = np.bincount(fold, weights=envelope_acc, minlength=out_len)
    if envelope.min() < 1e-8:
        raise ZeroEnvelopeError(
            f"window/hop combination (hop {config.hop}, n_fft {config.n_fft}) "
            "leaves unnormalizable samples")
    return AudioBuffer(signal / envelope, sample_rate_hz)


def magnitude(spec: ComplexSpectrogram) -> Spectrogram:
    return Spectrogram(np.abs(spec.bins), spec.config)


def apply_mel(spec: Spectrogram, fb: MelFilterbank) -> MelSpectrogram:
    """Project linear-frequency magnitudes onto the mel filterbank."""
    if spec.magnitudes.shape[0] != fb.weights.shape[1]:
        raise ValueError(
            f"spectrogram has {spec.magnitudes.shape[0]} bins, "
            f"filterbank expects {fb.weights.shape[1]}")
    return MelSpectrogram(fb.weights @ spec.magnitudes, fb)


def mel_to_linear(mel: MelSpectrogram, fb: MelFilterbank,
                  config: StftConfig | None = None) -> Spectrogram:
    """Least-squares unprojection of mel magnitudes, clamped to >= 0."""
    if mel.magnitudes.shape[0] != fb.weights.shape[0]:
        raise ValueError(
            f"mel spectrogram has {mel.magnitudes.shape[0]} bands, "
            f"filterbank has {fb.weights.shape[0]}")
    if config is None:
        config = StftConfig(n_fft=fb.n_fft)
    linear = np.linalg.pinv(fb.weights) @ mel.magnitudes
    return Spectrogram(np.maximum(linear, 0.0), config)


def _impose_magnitudes(target: np.ndarray, bins: np.ndarray) -> np.ndarray:
    mags = np.abs(bins)
    safe = np.where(mags == 0.0, 1.0, mags)
    return np.where(mags > 0.0, target * bins / safe, target.astype(complex))


def _griffin_lim_run(target, config, rng, iterations, momentum, sample_rate_hz):
    phases = rng.uniform(0.0, 2.0 * np.pi, size=target.shape)
    audio = istft(ComplexSpectrogram(target * np.exp(1j * phases), config), sample_rate_hz)
    beta = momentum / (1.0 + momentum)
    prev_bins = None
    curve = []
    for _ in range(iterations):
        bins = stft(audio, config).bins
        distance = np.linalg.norm(np.abs(bins) - target)
        blended = bins if prev_bins is None else bins - beta * prev_bins
        candidate = istft(ComplexSpectrogram(_impose_magnitudes(target, blended), config),
                          sample_rate_hz)
        if prev_bins is None:
            audio = candidate
        else:
            # Accelerated steps are not monotone by themselves: keep one only
            # if it reduced the consistency distance, else take the plain
            # projection, which provably never increases it.
            cand_distance = np.linalg.norm(np.abs(stft(candidate, config).bins) - target)
            if cand_distance <= distance:
                audio = candidate
            else:
                audio = istft(ComplexSpectrogram(_impose_magnitudes(target, bins), config),
                              sample_rate_hz)
        prev_bins = bins
        curve.append(distance)
    final_distance = np.linalg.norm(np.abs(stft(audio, config).bins) - target)
    curve.append(final_distance)
    return final_distance, audio, curve


def griffin_lim(spec: Spectrogram, iterations: int = 60, rng_seed: int = 0,
                sample_rate_hz: int = WORKING_RATE_HZ, momentum: float = 0.99,
                restarts: int = 4, distance_log: list | None = None) -> AudioBuffer:
    """Estimate a phase-consistent signal for a magnitude spectrogram.

    Each restart draws uniformly random initial phases from the seed and
    alternates between signal synthesis and re-imposing the target
    magnitudes, with momentum acceleration behind a monotonicity guard;
    the best restart (lowest consistency distance) is returned. The
    Frobenius distance between the target and the running signal's
    magnitudes is non-increasing in the iteration count; passing a list
    as distance_log collects the winning restart's per-iteration curve.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    if not spec.magnitudes.size or spec.magnitudes.shape[1] < 2:
        return istft(ComplexSpectrogram(spec.magnitudes.astype(complex), spec.config),
                     sample_rate_hz)
    best = None
    for restart in range(restarts):
        rng = np.random.default_rng([rng_seed, restart])
        distance, audio, curve = _griffin_lim_run(spec.magnitudes, spec.config, rng,
                                                  iterations, momentum, sample_rate_hz)
        if best is None or distance < best[0]:
            best = (distance, audio, curve)
    if distance_log is not None:
        distance_log.extend(best[2])
    return best[1]


def audio_to_mel(audio: AudioBuffer, fb: MelFilterbank,
                 config: StftConfig | None = None, log_compress=False) -> MelSpectrogram:
    """Full analysis path: STFT magnitudes projected onto mel bands."""
    if config is None:
        config = StftConfig(n_fft=fb.n_fft)
    mel = apply_mel(magnitude(stft(audio, config)), fb)
    if log_compress:
        mel = MelSpectrogram(np.log1p(mel.magnitudes), fb)
    return mel


def mel_to_audio(mel: MelSpectrogram, fb: MelFilterbank,
                 config: StftConfig | None = None, iterations=60, rng_seed=0,
                 log_compress=False) -> AudioBuffer:
    """Full synthesis path: mel inversion followed by Griffin-Lim."""
    values = mel.magnitudes
    if log_compress:
        values = np.expm1(values)
    clamped = MelSpectrogram(np.maximum(values, 0.0), fb)
    linear = mel_to_linear(clamped, fb, config)
    return griffin_lim(linear, iterations=iterations, rng_seed=rng_seed)
