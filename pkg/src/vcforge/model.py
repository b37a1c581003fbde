"""The conversion networks: one encoder, one decoder per speaker, one classifier.

Every network is a stack of three 1-d convolutions with kernel 3. Hidden
layers apply instance normalization and ReLU; the final layer of each
network is linear so codes can be signed and decoder outputs can match
arbitrary magnitudes. Channel widths follow the 128 -> 256 -> 256 -> out
schedule, with out = 128 for encoder/decoders and the speaker count for
the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CODE_CHANNELS = 128
HIDDEN_CHANNELS = 256
N_MELS = 128
KERNEL = 3


class UnknownSpeakerError(KeyError):
    """A speaker id was requested that the bundle was not trained with."""


class TooFewSpeakersError(ValueError):
    """Conversion needs at least two speakers."""


@dataclass
class ConvLayer:
    weight: ad.Tensor  # [C_out, C_in, 3]
    bias: ad.Tensor    # [C_out]
    activated: bool    # instance norm + ReLU after the convolution


@dataclass
class ConvStack:
    layers: list[ConvLayer]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for layer in self.layers:
            x = ad.conv1d(x, layer.weight, layer.bias)
            if layer.activated:
                x = ad.relu(ad.instance_norm(x))
        return x

    def parameters(self) -> list[ad.Tensor]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


@dataclass
class ModelBundle:
    """Everything needed to run conversion: networks plus the speaker table."""

    encoder: ConvStack
    decoders: dict[str, ConvStack]
    classifier: ConvStack
    speakers: list[str]
    n_mels: int = N_MELS

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise UnknownSpeakerError(
                f"speaker {speaker!r} not in bundle (have {self.speakers})") from None

    def autoencoder_parameters(self) -> list[ad.Tensor]:
        params = self.encoder.parameters()
        for speaker in self.speakers:
            params.extend(self.decoders[speaker].parameters())
        return params

    def classifier_parameters(self) -> list[ad.Tensor]:
        return self.classifier.parameters()

    def all_parameters(self) -> list[ad.Tensor]:
        return self.autoencoder_parameters() + self.classifier_parameters()


def _build_stack(channel_schedule, rng) -> ConvStack:
    layers = []
    last = len(channel_schedule) - 2
    for i, (c_in, c_out) in enumerate(zip(channel_schedule[:-1], channel_schedule[1:])):
        weight, bias = ad.uniform_conv_init(c_out, c_in, KERNEL, rng)
        layers.append(ConvLayer(weight, bias, activated=i < last))
    return ConvStack(layers)


def build_bundle(speakers, seed: int = 0) -> ModelBundle:
    """Deterministically initialize all networks for the given speakers."""
    speakers = list(speakers)
    if len(speakers) < 2:
        raise TooFewSpeakersError(f"need at least 2 speakers, got {len(speakers)}")
    if len(set(speakers)) != len(speakers):
        raise ValueError(f"duplicate speaker ids: {speakers}")
    rng = np.random.default_rng(seed)
    encoder = _build_stack([N_MELS, HIDDEN_CHANNELS, HIDDEN_CHANNELS, CODE_CHANNELS], rng)
    decoders = {
        spk: _build_stack([CODE_CHANNELS, HIDDEN_CHANNELS, HIDDEN_CHANNELS, N_MELS], rng)
        for spk in speakers
    }
    classifier = _build_stack(
        [CODE_CHANNELS, HIDDEN_CHANNELS, HIDDEN_CHANNELS, len(speakers)], rng)
    return ModelBundle(encoder, decoders, classifier, speakers)


def build_classifier(n_speakers: int, seed: int = 0) -> ConvStack:
    """A freshly initialized speaker classifier, e.g. for probing codes."""
    rng = np.random.default_rng(seed)
    return _build_stack([CODE_CHANNELS, HIDDEN_CHANNELS, HIDDEN_CHANNELS, n_speakers], rng)


def _as_feature_tensor(mel, n_channels, what):
    x = mel if isinstance(mel, ad.Tensor) else ad.Tensor(np.asarray(mel, dtype=np.float32))
    if x.data.ndim not in (2, 3) or x.data.shape[-2] != n_channels:
        raise ValueError(f"{what} must be [{n_channels} x T] or batched, got {x.data.shape}")
    return x


def encode(bundle: ModelBundle, mel) -> ad.Tensor:
    """Per-frame latent code for a mel segment, shape [128 x T]."""
    return bundle.encoder(_as_feature_tensor(mel, bundle.n_mels, "mel input"))


def decode(bundle: ModelBundle, speaker: str, code) -> ad.Tensor:
    """Reconstruct mel magnitudes in the given speaker's voice.

    The final layer is linear, so outputs may be negative; the DSP
    boundary clamps, not this function.
    """
    if speaker not in bundle.decoders:
        raise UnknownSpeakerError(
            f"speaker {speaker!r} not in bundle (have {bundle.speakers})")
    return bundle.decoders[speaker](_as_feature_tensor(code, CODE_CHANNELS, "code"))


def classify(bundle: ModelBundle, code) -> ad.Tensor:
    """Speaker logits for a code: per-frame logits averaged over time."""
    frame_logits = bundle.classifier(_as_feature_tensor(code, CODE_CHANNELS, "code"))
    return ad.mean(frame_logits, axis=frame_logits.data.ndim - 1)
