"""Mutual-information bounds and objective conversion metrics.

The speaker-classification game has an information-theoretic reading: any
classifier's error probability on codes lower-bounds the mutual
information between speaker label and code (Fano), and the best
classifier's error upper-bounds it. Both bounds are reported in bits,
assuming a uniform speaker prior unless an empirical label entropy is
supplied.

Because listening tests need humans, conversion direction is scored
objectively instead: the mel-band centroid of a converted utterance is
compared against the source and target speakers' centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as vc_model
from .dsp import MelSpectrogram


class SilentInputError(ValueError):
    """An all-zero spectrogram has no spectral centroid."""


class SpeakerMismatchError(ValueError):
    """Evaluation data labels speakers the model was not trained with."""


@dataclass
class BoundsCurve:
    """Sampled lower/upper MI bounds as functions of classifier error."""

    n_classes: int
    samples: list[tuple[float, float, float | None]]  # (p, lower_bits, upper_bits)


@dataclass
class MetricsReport:
    reconstruction_l1: float
    reconstruction_l1_per_speaker: dict[str, float]
    code_classifier_error: float
    mi_lower_bits: float
    mi_upper_bits: float
    mi_upper_is_conditional: bool = True  # valid only if the classifier is optimal
    centroid_shifts: dict[tuple[str, str], float] = field(default_factory=dict)


def binary_entropy(p: float) -> float:
    """Entropy of a Bernoulli(p) in bits, with 0*log(0) = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    if p in (0.0, 1.0):
        return 0.0
    return float(-p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p))


def mi_lower_bound(p_e: float, n: int, entropy_bits: float | None = None) -> float:
    """Fano lower bound on I(label; code) from a classifier's error p_e.

    With a uniform prior over n classes this is
    log2(n) - h(p_e) - p_e*log2(n-1); pass entropy_bits to replace the
    log2(n) term with an empirical label entropy.
    """
    if not 0.0 <= p_e <= 1.0:
        raise ValueError(f"error probability out of range: {p_e}")
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    h_label = float(np.log2(n)) if entropy_bits is None else float(entropy_bits)
    return h_label - binary_entropy(p_e) - p_e * float(np.log2(n - 1))


def mi_upper_bound(p_e_star: float, n: int, entropy_bits: float | None = None) -> float:
    """Upper bound on I(label; code) from the best classifier's error.

    With a uniform prior this is log2(n) + log2(1 - p_e_star); undefined
    at p_e_star = 1.
    """
    if not 0.0 <= p_e_star < 1.0:
        raise ValueError(f"best-classifier error out of range: {p_e_star}")
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    h_label = float(np.log2(n)) if entropy_bits is None else float(entropy_bits)
    return h_label + float(np.log2(1.0 - p_e_star))


def label_entropy_bits(counts) -> float:
    """Empirical entropy of a label histogram, in bits."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.min() < 0 or counts.sum() <= 0:
        raise ValueError("histogram must be non-negative with positive total")
    probs = counts / counts.sum()
    nonzero = probs[probs > 0]
    return float(-(nonzero * np.log2(nonzero)).sum())


def bounds_curve(n: int, grid_points: int = 101) -> BoundsCurve:
    """Sample both bounds over an error-probability grid.

    The lower bound is sampled on [0, 1]; the upper bound only on
    [0, 1 - 1/n], past which it is no longer informative for a
    non-negative quantity. For n = 4 both curves start at 2 bits and
    reach 0 at p = 0.75.
    """
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    if grid_points < 2:
        raise ValueError(f"need at least 2 grid points, got {grid_points}")
    upper_limit = 1.0 - 1.0 / n
    samples = []
    for i in range(grid_points):
        p = i / (grid_points - 1)
        lower = mi_lower_bound(p, n)
        upper = mi_upper_bound(p, n) if p <= upper_limit + 1e-12 else None
        samples.append((p, lower, upper))
    return BoundsCurve(n, samples)


def mel_band_centroid(mel: MelSpectrogram | np.ndarray) -> float:
    """Energy-weighted mean band index of the time-averaged mel spectrum."""
    values = mel.magnitudes if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    profile = values.mean(axis=1)
    total = profile.sum()
    if total <= 0.0:
        raise SilentInputError("spectrogram is silent; centroid undefined")
    return float((np.arange(len(profile)) * profile).sum() / total)


def spectral_centroid_shift(source_mel, converted_mel, target_reference_mels) -> float:
    """Fraction of the source-to-target centroid gap a conversion covered.

    0 means the conversion kept the source's spectral balance, 1 means it
    landed on the target's; the references are pooled before measuring.
    """
    refs = [m.magnitudes if isinstance(m, MelSpectrogram) else np.asarray(m)
            for m in target_reference_mels]
    if not refs:
        raise ValueError("need at least one target reference")
    source_c = mel_band_centroid(source_mel)
    converted_c = mel_band_centroid(converted_mel)
    target_c = mel_band_centroid(np.concatenate(refs, axis=1))
    gap = target_c - source_c
    if gap == 0.0:
        raise ValueError("target and source centroids coincide; shift undefined")
    return (converted_c - source_c) / gap


def evaluate_model(bundle: vc_model.ModelBundle, dataset) -> MetricsReport:
    """Reconstruction quality and code-classifier MI bounds on a dataset.

    Per-utterance codes are classified by the bundle's own adversarial
    classifier; its empirical error feeds both bounds, with the upper one
    flagged conditional since the trained classifier need not be optimal.
    """
    extra = set(dataset.speakers) - set(bundle.speakers)
    if extra:
        raise SpeakerMismatchError(f"dataset speakers {sorted(extra)} unknown to the model")
    if not dataset.items:
        raise ValueError("dataset has no items")

    per_speaker_losses: dict[str, list[float]] = {spk: [] for spk in bundle.speakers}
    errors = 0
    for mel, speaker in dataset.items:
        features = np.asarray(mel, dtype=np.float32)
        code = vc_model.encode(bundle, features)
        recon = vc_model.decode(bundle, speaker, code.detach())
        per_speaker_losses[speaker].append(
            float(np.abs(recon.data - features).mean()))
        logits = vc_model.classify(bundle, code.detach())
        predicted = int(logits.data.argmax())
        if predicted != bundle.speaker_index(speaker):
            errors += 1

    p_e = errors / len(dataset.items)
    n = len(bundle.speakers)
    per_speaker = {spk: float(np.mean(vals)) for spk, vals in per_speaker_losses.items() if vals}
    overall = float(np.mean([loss for vals in per_speaker_losses.values() for loss in vals]))
    upper = mi_upper_bound(p_e, n) if p_e < 1.0 else float("-inf")
    return MetricsReport(
        reconstruction_l1=overall,
        reconstruction_l1_per_speaker=per_speaker,
        code_classifier_error=p_e,
        mi_lower_bits=mi_lower_bound(p_e, n),
        mi_upper_bits=upper,
    )
