"""Adversarial training of the conversion networks, with checkpointing.

Training alternates two updates over mixed-speaker batches of fixed-length
mel segments: the classifier descends its cross-entropy on codes (with the
encoder frozen for that step), then the encoder and the batch's decoders
descend reconstruction minus the weighted classification term. The two
parameter groups are strictly isolated: neither step touches the other
group's parameters.

Checkpoints are single little-endian files: magic "VCAE", a u16 format
version, a JSON header carrying the speaker table, layer shapes, step
counter and config echo, an fp32 payload of parameters followed by both
optimizers' moment arrays, and a trailing CRC32.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as vc_model

CHECKPOINT_MAGIC = b"VCAE"
CHECKPOINT_VERSION = 1
TRAIN_LOG_HEADER = ["step", "f_r", "f_c_classifier", "adv_term", "code_acc"]


class EmptyDatasetError(ValueError):
    """Batch sampling was asked to draw from a dataset with no items."""


class UtteranceTooShortError(ValueError):
    """An utterance has fewer frames than the configured segment length."""


class CheckpointError(ValueError):
    """File is not a usable checkpoint."""


class VersionMismatchError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class ChecksumError(CheckpointError):
    """Checkpoint bytes fail their integrity check (truncation/corruption)."""


@dataclass
class Dataset:
    """Mel utterances paired with speaker ids; no cross-speaker alignment."""

    items: list[tuple[np.ndarray, str]]
    speakers: list[str]

    def __post_init__(self):
        known = set(self.speakers)
        for _, speaker in self.items:
            if speaker not in known:
                raise ValueError(f"item labeled {speaker!r} not in speaker list {self.speakers}")


@dataclass
class TrainConfig:
    lambda_adv: float = 1.0
    steps: int = 10000
    batch_size: int = 12
    segment_frames: int = 64
    classifier_steps_per_ae_step: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        for name in ("batch_size", "segment_frames", "classifier_steps_per_ae_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainRecord:
    step: int
    recon_loss: float
    classifier_loss: float
    adversarial_term: float
    code_accuracy: float


@dataclass
class TrainState:
    bundle: vc_model.ModelBundle
    opt_autoenc: ad.Adam
    opt_classifier: ad.Adam
    step: int = 0


@dataclass
class Checkpoint:
    bundle: vc_model.ModelBundle
    opt_autoenc: ad.Adam
    opt_classifier: ad.Adam
    step: int
    config: TrainConfig
    version: int = CHECKPOINT_VERSION


def init_train_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    bundle = vc_model.build_bundle(dataset.speakers, seed=config.seed)
    opt_kwargs = dict(lr=config.learning_rate, beta1=config.adam_beta1,
                      beta2=config.adam_beta2, eps=config.adam_eps)
    return TrainState(
        bundle=bundle,
        opt_autoenc=ad.Adam(bundle.autoencoder_parameters(), **opt_kwargs),
        opt_classifier=ad.Adam(bundle.classifier_parameters(), **opt_kwargs),
    )


def sample_batch(dataset: Dataset, config: TrainConfig, rng):
    """Uniformly sampled utterances, each with a uniformly placed crop.

    Returns (segments [B x n_mels x T] float32, speaker id list).
    """
    if not dataset.items:
        raise EmptyDatasetError("dataset has no items")
    n_time = config.segment_frames
    picks = rng.integers(0, len(dataset.items), size=config.batch_size)
    segments = np.empty((config.batch_size, dataset.items[0][0].shape[0], n_time),
                        dtype=np.float32)
    speaker_ids = []
    for row, pick in enumerate(picks):
        mel, speaker = dataset.items[pick]
        n_frames = mel.shape[1]
        if n_frames < n_time:
            raise UtteranceTooShortError(
                f"utterance has {n_frames} frames, need >= {n_time}")
        start = int(rng.integers(0, n_frames - n_time + 1))
        segments[row] = mel[:, start:start + n_time]
        speaker_ids.append(speaker)
    return segments, speaker_ids


def classifier_step(state: TrainState, batch):
    """One classifier update on detached codes.

    Encoder and decoder parameters are untouched; gradient never flows
    past the code. Returns (cross-entropy loss, batch accuracy).
    """
    segments, speaker_ids = batch
    bundle = state.bundle
    labels = np.array([bundle.speaker_index(s) for s in speaker_ids])
    codes = vc_model.encode(bundle, segments).detach()
    logits = vc_model.classify(bundle, codes)
    loss = ad.cross_entropy(logits, labels)
    ad.backward(loss)
    state.opt_classifier.step()
    accuracy = float((logits.data.argmax(axis=1) == labels).mean())
    return float(loss.data), accuracy


def autoencoder_step(state: TrainState, batch, lambda_adv: float):
    """One encoder/decoder update on reconstruction minus the adversarial term.

    Each item is reconstructed through its own speaker's decoder; the
    classification term is computed through the (frozen) classifier, whose
    parameters are left untouched. Returns (reconstruction loss,
    weighted adversarial term), both as batch means.
    """
    segments, speaker_ids = batch
    bundle = state.bundle
    n_batch = segments.shape[0]

    by_speaker: dict[str, list[int]] = {}
    for row, speaker in enumerate(speaker_ids):
        by_speaker.setdefault(speaker, []).append(row)

    total = None
    recon_value = 0.0
    adv_ce_value = 0.0
    for speaker, rows in by_speaker.items():
        chunk = segments[rows]
        share = len(rows) / n_batch
        label = bundle.speaker_index(speaker)
        code = vc_model.encode(bundle, chunk)
        recon = ad.l1_loss(vc_model.decode(bundle, speaker, code), chunk)
        adv_ce = ad.cross_entropy(vc_model.classify(bundle, code), [label] * len(rows))
        term = recon * share - adv_ce * (lambda_adv * share)
        total = term if total is None else total + term
        recon_value += float(recon.data) * share
        adv_ce_value += float(adv_ce.data) * share

    ad.backward(total)
    # Decoders absent from this batch received no gradient; give them an
    # explicit zero so the shared optimizer contract holds.
    for p in state.opt_autoenc.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    state.opt_autoenc.step()
    state.opt_classifier.zero_grad()
    return recon_value, lambda_adv * adv_ce_value


def train_loop(dataset: Dataset, config: TrainConfig, on_record=None):
    """Alternating min-max optimization; returns (Checkpoint, records).

    Fully deterministic given (dataset, config): equal seeds give equal
    checkpoints and logs. on_record, if given, is called with each
    TrainRecord as it is produced (e.g. for progress reporting).
    """
    if len(dataset.speakers) < 2:
        raise vc_model.TooFewSpeakersError("training needs at least 2 speakers")
    state = init_train_state(dataset, config)
    rng = np.random.default_rng([config.seed, 0x5eed])
    records: list[TrainRecord] = []
    for step in range(1, config.steps + 1):
        cls_loss, accuracy = 0.0, 0.0
        for _ in range(config.classifier_steps_per_ae_step):
            cls_loss, accuracy = classifier_step(state, sample_batch(dataset, config, rng))
        recon, adv_term = autoencoder_step(
            state, sample_batch(dataset, config, rng), config.lambda_adv)
        state.step = step
        record = TrainRecord(step, recon, cls_loss, adv_term, accuracy)
        records.append(record)
        if on_record is not None:
            on_record(record)
    checkpoint = Checkpoint(state.bundle, state.opt_autoenc, state.opt_classifier,
                            state.step, config)
    return checkpoint, records


def segment_grid(mel: np.ndarray, segment_frames: int, stride: int | None = None):
    """Deterministic fixed-length crops covering an utterance."""
    if stride is None:
        stride = segment_frames
    n_frames = mel.shape[1]
    if n_frames < segment_frames:
        return []
    starts = list(range(0, n_frames - segment_frames + 1, stride))
    return [mel[:, s:s + segment_frames] for s in starts]


def probe_code_classifier(bundle, dataset: Dataset, *, steps=2500, batch_size=12,
                          segment_frames=64, holdout_fraction=0.25, seed=0,
                          learning_rate=1e-3, holdout_by="utterance", stride=None):
    """Train a fresh classifier on frozen codes; report held-out accuracy.

    Measures how much speaker information survives in the encoder output:
    codes for fixed-length crops are computed once, split into
    train/held-out, and a newly initialized classifier is fit on the
    training share alone. Holding out whole utterances (the default)
    keeps sibling crops of a training utterance out of the held-out set,
    so the score reflects speaker identity rather than utterance
    recognition; holdout_by="segment" splits at the crop level instead
    and forces non-overlapping crops so no frame leaks across the split.
    """
    if holdout_by not in ("utterance", "segment"):
        raise ValueError(f"holdout_by must be 'utterance' or 'segment', got {holdout_by!r}")
    if stride is None:
        stride = 16 if holdout_by == "utterance" else segment_frames
    if holdout_by == "segment":
        stride = max(stride, segment_frames)
    codes = []
    labels = []
    utterance_ids = []
    for utt_id, (mel, speaker) in enumerate(dataset.items):
        for segment in segment_grid(mel, segment_frames, stride):
            code = vc_model.encode(bundle, segment.astype(np.float32)).data
            codes.append(code)
            labels.append(bundle.speaker_index(speaker))
            utterance_ids.append(utt_id)
    codes = np.stack(codes)
    labels = np.array(labels)
    utterance_ids = np.array(utterance_ids)

    rng = np.random.default_rng([seed, 0xab])
    if holdout_by == "utterance":
        # held-out utterances, stratified by speaker
        held_utts = []
        for speaker in range(len(bundle.speakers)):
            utts = np.unique([u for u, l in zip(utterance_ids, labels) if l == speaker])
            n_held = max(1, int(round(len(utts) * holdout_fraction)))
            held_utts.extend(rng.permutation(utts)[:n_held])
        held_mask = np.isin(utterance_ids, held_utts)
    else:
        order = rng.permutation(len(codes))
        n_holdout = max(1, int(round(len(codes) * holdout_fraction)))
        held_mask = np.zeros(len(codes), dtype=bool)
        held_mask[order[:n_holdout]] = True
    held_idx = np.where(held_mask)[0]
    fit_idx = np.where(~held_mask)[0]

    probe = vc_model.build_classifier(len(bundle.speakers), seed=seed + 1)
    opt = ad.Adam(probe.parameters(), lr=learning_rate)
    for _ in range(steps):
        rows = rng.integers(0, len(fit_idx), size=batch_size)
        chunk = codes[fit_idx[rows]]
        frame_logits = probe(ad.Tensor(chunk))
        logits = ad.mean(frame_logits, axis=2)
        loss = ad.cross_entropy(logits, labels[fit_idx[rows]])
        ad.backward(loss)
        opt.step()

    held_logits = ad.mean(probe(ad.Tensor(codes[held_idx])), axis=2).data
    accuracy = float((held_logits.argmax(axis=1) == labels[held_idx]).mean())
    return accuracy, len(held_idx)


def write_train_log(path, records) -> None:
    """Per-step CSV of the losses and the code-classifier accuracy."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_LOG_HEADER)
        for r in records:
            writer.writerow([r.step, repr(r.recon_loss), repr(r.classifier_loss),
                             repr(r.adversarial_term), repr(r.code_accuracy)])


def read_train_log(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRAIN_LOG_HEADER:
            raise ValueError(f"unexpected log header: {header}")
        for row in reader:
            records.append(TrainRecord(int(row[0]), float(row[1]), float(row[2]),
                                       float(row[3]), float(row[4])))
    return records


def _network_order(speakers):
    return ["encoder"] + [f"decoder:{spk}" for spk in speakers] + ["classifier"]


def _stacks_in_order(bundle):
    stacks = [bundle.encoder]
    stacks += [bundle.decoders[spk] for spk in bundle.speakers]
    stacks.append(bundle.classifier)
    return stacks


def _checkpoint_header(ckpt: Checkpoint) -> dict:
    networks = {}
    for name, stack in zip(_network_order(ckpt.bundle.speakers), _stacks_in_order(ckpt.bundle)):
        networks[name] = [
            {"weight": list(layer.weight.data.shape), "bias": list(layer.bias.data.shape),
             "activated": layer.activated}
            for layer in stack.layers
        ]
    return {
        "speakers": ckpt.bundle.speakers,
        "n_mels": ckpt.bundle.n_mels,
        "step": ckpt.step,
        "config": asdict(ckpt.config),
        "networks": networks,
        "optimizers": {
            "autoencoder": _optimizer_meta(ckpt.opt_autoenc),
            "classifier": _optimizer_meta(ckpt.opt_classifier),
        },
    }


def _optimizer_meta(opt: ad.Adam) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step_count": opt.step_count}


def _payload_arrays(ckpt: Checkpoint):
    arrays = []
    for stack in _stacks_in_order(ckpt.bundle):
        for p in stack.parameters():
            arrays.append(p.data)
    for opt in (ckpt.opt_autoenc, ckpt.opt_classifier):
        arrays.extend(opt.m)
        arrays.extend(opt.v)
    return arrays


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_checkpoint_header(ckpt), separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", ckpt.version),
             struct.pack("<I", len(header)), header]
    for arr in _payload_arrays(ckpt):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise ChecksumError(f"{path}: too short to be a checkpoint")
    if raw[0:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[0:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch (truncated or corrupted)")

    (header_len,) = struct.unpack_from("<I", raw, 6)
    header = json.loads(raw[10:10 + header_len].decode())
    offset = 10 + header_len

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += count * 4
        return arr

    speakers = header["speakers"]
    stacks = {}
    for name in _network_order(speakers):
        layers = []
        for layer_meta in header["networks"][name]:
            weight = ad.Tensor(take(layer_meta["weight"]), requires_grad=True)
            bias = ad.Tensor(take(layer_meta["bias"]), requires_grad=True)
            layers.append(vc_model.ConvLayer(weight, bias, layer_meta["activated"]))
        stacks[name] = vc_model.ConvStack(layers)
    bundle = vc_model.ModelBundle(
        encoder=stacks["encoder"],
        decoders={spk: stacks[f"decoder:{spk}"] for spk in speakers},
        classifier=stacks["classifier"],
        speakers=speakers,
        n_mels=header["n_mels"],
    )

    def rebuild_opt(meta, params):
        opt = ad.Adam(params, lr=meta["lr"], beta1=meta["beta1"],
                      beta2=meta["beta2"], eps=meta["eps"])
        opt.step_count = meta["step_count"]
        opt.m = [take(p.data.shape) for p in params]
        opt.v = [take(p.data.shape) for p in params]
        return opt

    opt_autoenc = rebuild_opt(header["optimizers"]["autoencoder"],
                              bundle.autoencoder_parameters())
    opt_classifier = rebuild_opt(header["optimizers"]["classifier"],
                                 bundle.classifier_parameters())
    config = TrainConfig(**header["config"])
    return Checkpoint(bundle, opt_autoenc, opt_classifier, header["step"], config, version)
