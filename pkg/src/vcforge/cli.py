"""Command-line entry points: synth-data, train, convert, eval, bounds.

Each command resolves its settings (defaults < config file < flags),
performs one batch workflow, and writes a JSON manifest next to its
outputs with everything needed to reproduce the run. All file outputs go
through a temp-then-rename so interrupted runs leave no partial files.

The synthetic-speaker generator produces harmonic tones with randomized
pitch glides and amplitude contours, giving each configured "voice" a
distinct register without requiring any recorded corpus.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis
from . import dsp
from . import model as vc_model
from . import plotting
from . import train as vc_train
from .audio_io import AudioBuffer, WORKING_RATE_HZ, load_wav, save_wav, resample_linear

TENSOR_MAGIC = b"VCT1"


# ---------------------------------------------------------------------------
# atomic file helpers

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def save_wav_atomic(path, audio: AudioBuffer) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_wav(tmp, audio)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# debug tensor container and CSV dumps

def write_tensor_container(path, array) -> None:
    """Binary tensor dump: magic VCT1, u8 rank, u32 extents, fp32 payload."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank too large for container")
    parts = [TENSOR_MAGIC, struct.pack("<B", arr.ndim)]
    for extent in arr.shape:
        parts.append(struct.pack("<I", extent))
    parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_tensor_container(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[0:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad tensor container magic")
    (rank,) = struct.unpack_from("<B", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 5)
    offset = 5 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()


def save_matrix_csv(path, matrix) -> None:
    """Plain CSV of a 2-d array, one row per line, for inspection."""
    matrix = np.asarray(matrix)
    lines = [",".join(repr(float(v)) for v in row) for row in matrix]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# manifests

def write_manifest(path, command: str, settings: dict, inputs: dict, outputs: dict) -> None:
    manifest = {
        "tool": "vcforge",
        "tool_version": __version__,
        "command": command,
        "settings": settings,
        "inputs": inputs,
        "outputs": outputs,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic speakers

@dataclass
class SynthSpeakerSpec:
    """A harmonic-tone 'voice': register, brightness, and vibrato.

    When n_harmonics is left unset, the series extends to a shared
    spectral cutoff, so differently pitched voices cover the same band
    (a low voice simply has a denser harmonic stack).
    """

    fundamental_hz: float
    n_harmonics: int | None = None
    harmonic_decay: float = 0.8
    vibrato_depth: float = 0.02
    vibrato_rate_hz: float = 5.0
    utterance_seconds: float = 3.0
    glide_range: float = 0.20
    spectral_cutoff_hz: float = 2400.0

    def __post_init__(self):
        if not 60.0 <= self.fundamental_hz <= 400.0:
            raise ValueError(f"fundamental must lie in [60, 400] Hz, got {self.fundamental_hz}")
        if self.n_harmonics is None:
            self.n_harmonics = min(24, max(1, int(self.spectral_cutoff_hz
                                                  // self.fundamental_hz)))
        for name in ("n_harmonics", "harmonic_decay", "vibrato_rate_hz",
                     "utterance_seconds", "spectral_cutoff_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vibrato_depth < 0 or self.glide_range < 0:
            raise ValueError("vibrato_depth and glide_range must be >= 0")


def synth_utterance(spec: SynthSpeakerSpec, rng) -> AudioBuffer:
    """One randomized 'phrase': pitch glide, vibrato, amplitude contour."""
    sr = WORKING_RATE_HZ
    n = int(round(spec.utterance_seconds * sr))
    t = np.arange(n) / sr

    glide_nodes = rng.uniform(-spec.glide_range, spec.glide_range, size=4)
    glide = np.interp(t, np.linspace(0.0, t[-1], len(glide_nodes)), glide_nodes)
    vibrato = spec.vibrato_depth * np.sin(
        2.0 * np.pi * spec.vibrato_rate_hz * t + rng.uniform(0.0, 2.0 * np.pi))
    f0 = spec.fundamental_hz * np.exp(glide) * (1.0 + vibrato)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    signal = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        amp = spec.harmonic_decay ** (k - 1)
        signal += amp * np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi))

    contour_rate = rng.uniform(0.5, 1.5)
    contour = 1.0 + 0.25 * np.sin(2.0 * np.pi * contour_rate * t + rng.uniform(0.0, 2.0 * np.pi))
    edge = max(1, int(0.05 * sr))
    ramp = np.ones(n)
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    ramp[:edge] = fade
    ramp[-edge:] = fade[::-1]
    signal *= contour * ramp
    signal *= 0.25 / np.abs(signal).max()
    return AudioBuffer(signal, sr)


def cmd_synth_dataset(specs, utterances_per_speaker: int, out_dir, seed: int = 0,
                      speaker_ids=None) -> Path:
    """Write a WAV corpus plus its index and manifest; returns the index path."""
    if len(specs) < 2:
        raise ValueError(f"need at least 2 speaker specs, got {len(specs)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if speaker_ids is None:
        speaker_ids = [f"spk{i}" for i in range(len(specs))]
    if len(speaker_ids) != len(specs):
        raise ValueError("speaker id count must match spec count")

    rows = []
    for s_idx, (speaker, spec) in enumerate(zip(speaker_ids, specs)):
        for u_idx in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, s_idx, u_idx])
            name = f"{speaker}_{u_idx:03d}.wav"
            save_wav_atomic(out_dir / name, synth_utterance(spec, rng))
            rows.append((name, speaker))

    index_path = out_dir / "index.csv"
    lines = ["path,speaker_id"] + [f"{name},{speaker}" for name, speaker in rows]
    atomic_write_text(index_path, "\n".join(lines) + "\n")
    write_manifest(
        out_dir / "manifest.json",
        command="synth-data",
        settings={"seed": seed, "utterances_per_speaker": utterances_per_speaker,
                  "speakers": [dict(asdict(spec), speaker_id=sid)
                               for sid, spec in zip(speaker_ids, specs)]},
        inputs={},
        outputs={"dir": str(out_dir), "index": str(index_path), "files": len(rows)},
    )
    return index_path


# ---------------------------------------------------------------------------
# settings resolution

FEATURE_DEFAULTS = {
    "n_fft": 1024,
    "hop": 256,
    "n_mels": 128,
    "f_min_hz": 40.0,
    "f_max_hz": 8000.0,
    "log_mel": False,
    "griffin_lim_iterations": 60,
}


def parse_config_file(path) -> dict:
    """Flat key=value settings; '#' starts a comment."""
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(template_value, raw: str):
    if isinstance(template_value, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    return type(template_value)(raw)


def resolve_settings(config_path=None, overrides=None) -> dict:
    """defaults < config file < explicit flags, over all known keys."""
    settings = dict(FEATURE_DEFAULTS)
    for f in vc_train.TrainConfig.__dataclass_fields__.values():
        settings[f.name] = f.default
    if config_path is not None:
        for key, raw in parse_config_file(config_path).items():
            if key not in settings:
                raise ValueError(f"unknown config key {key!r}")
            settings[key] = _coerce(settings[key], raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def _train_config(settings: dict) -> vc_train.TrainConfig:
    keys = vc_train.TrainConfig.__dataclass_fields__.keys()
    return vc_train.TrainConfig(**{k: settings[k] for k in keys})


def _feature_front_end(settings: dict):
    config = dsp.StftConfig(n_fft=settings["n_fft"], hop=settings["hop"])
    fb = dsp.build_mel_filterbank(
        n_mels=settings["n_mels"], f_min_hz=settings["f_min_hz"],
        f_max_hz=settings["f_max_hz"], sample_rate_hz=WORKING_RATE_HZ,
        n_fft=settings["n_fft"])
    return config, fb


def wav_to_features(path, fb, config, log_mel=False) -> np.ndarray:
    audio = resample_linear(load_wav(path), WORKING_RATE_HZ)
    return dsp.audio_to_mel(audio, fb, config, log_compress=log_mel).magnitudes.astype(np.float32)


def load_dataset(data_dir, fb, config, log_mel=False) -> vc_train.Dataset:
    """Ingest an indexed WAV directory into mel utterances."""
    data_dir = Path(data_dir)
    index_path = data_dir / "index.csv"
    if not index_path.is_file():
        raise FileNotFoundError(f"no index.csv in {data_dir}")
    items = []
    speakers: dict[str, None] = {}
    with open(index_path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, 1):
            if not row or row == ["path", "speaker_id"]:
                continue
            if len(row) < 2:
                raise ValueError(f"{index_path}:{line_no}: expected 'path,speaker_id'")
            rel_path, speaker = row[0].strip(), row[1].strip()
            items.append((wav_to_features(data_dir / rel_path, fb, config, log_mel), speaker))
            speakers.setdefault(speaker)
    if not items:
        raise ValueError(f"{index_path}: no entries")
    return vc_train.Dataset(items, list(speakers))


# ---------------------------------------------------------------------------
# commands

def cmd_train(data_dir, out_checkpoint, config_path=None, overrides=None,
              progress_every=1000) -> Path:
    settings = resolve_settings(config_path, overrides)
    stft_config, fb = _feature_front_end(settings)
    dataset = load_dataset(data_dir, fb, stft_config, settings["log_mel"])
    config = _train_config(settings)

    def progress(record):
        if progress_every and record.step % progress_every == 0:
            print(f"step {record.step}/{config.steps}: "
                  f"recon {record.recon_loss:.4f} "
                  f"classifier {record.classifier_loss:.4f} "
                  f"code-acc {record.code_accuracy:.2f}", flush=True)

    checkpoint, records = vc_train.train_loop(dataset, config, on_record=progress)

    out_checkpoint = Path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out_checkpoint, vc_train.checkpoint_bytes(checkpoint))
    log_path = out_checkpoint.with_name(out_checkpoint.stem + "_log.csv")
    tmp_log = log_path.with_name(log_path.name + ".tmp")
    vc_train.write_train_log(tmp_log, records)
    os.replace(tmp_log, log_path)
    if records:
        plotting.save_training_figure(records, log_path.with_suffix(".png"))

    write_manifest(
        Path(str(out_checkpoint) + ".manifest.json"),
        command="train",
        settings=settings,
        inputs={"data_dir": str(data_dir), "config_file": str(config_path) if config_path else None},
        outputs={"checkpoint": str(out_checkpoint), "log": str(log_path)},
    )
    return out_checkpoint


def convert_features(bundle, mel: np.ndarray, target_speaker: str) -> np.ndarray:
    """mel utterance -> code -> target decoder; clamped at the DSP boundary."""
    code = vc_model.encode(bundle, mel.astype(np.float32))
    converted = vc_model.decode(bundle, target_speaker, code)
    return np.maximum(converted.data.astype(np.float64), 0.0)


def cmd_convert(checkpoint_path, input_wav, target_speaker, output_wav,
                config_path=None, overrides=None, dump_features_dir=None) -> Path:
    settings = resolve_settings(config_path, overrides)
    checkpoint = vc_train.load_checkpoint(checkpoint_path)
    bundle = checkpoint.bundle
    if target_speaker not in bundle.decoders:
        raise vc_model.UnknownSpeakerError(
            f"speaker {target_speaker!r} not in checkpoint (have {bundle.speakers})")
    stft_config, fb = _feature_front_end(settings)

    mel = wav_to_features(input_wav, fb, stft_config, settings["log_mel"])
    converted = convert_features(bundle, mel, target_speaker)
    mel_out = dsp.MelSpectrogram(converted, fb)
    audio = dsp.mel_to_audio(mel_out, fb, stft_config,
                             iterations=settings["griffin_lim_iterations"],
                             rng_seed=settings["seed"], log_compress=settings["log_mel"])
    output_wav = Path(output_wav)
    output_wav.parent.mkdir(parents=True, exist_ok=True)
    save_wav_atomic(output_wav, audio)

    if dump_features_dir is not None:
        dump_dir = Path(dump_features_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for tag, matrix in (("input_mel", mel), ("converted_mel", converted)):
            write_tensor_container(dump_dir / f"{tag}.vct", matrix)
            save_matrix_csv(dump_dir / f"{tag}.csv", matrix)

    write_manifest(
        Path(str(output_wav) + ".manifest.json"),
        command="convert",
        settings=settings,
        inputs={"checkpoint": str(checkpoint_path), "input": str(input_wav),
                "target_speaker": target_speaker},
        outputs={"wav": str(output_wav)},
    )
    return output_wav


def conversion_grid(bundle, dataset: vc_train.Dataset) -> dict[tuple[str, str], float]:
    """Mean centroid shift for every ordered (source, target) speaker pair."""
    by_speaker: dict[str, list[np.ndarray]] = {spk: [] for spk in dataset.speakers}
    for mel, speaker in dataset.items:
        by_speaker[speaker].append(np.asarray(mel, dtype=np.float64))
    shifts = {}
    for src in dataset.speakers:
        for tgt in dataset.speakers:
            if src == tgt:
                continue
            scores = []
            for mel in by_speaker[src]:
                converted = convert_features(bundle, mel, tgt)
                scores.append(analysis.spectral_centroid_shift(
                    mel, converted, by_speaker[tgt]))
            shifts[(src, tgt)] = float(np.mean(scores))
    return shifts


def cmd_eval(checkpoint_path, data_dir, report_path, config_path=None, overrides=None) -> Path:
    settings = resolve_settings(config_path, overrides)
    checkpoint = vc_train.load_checkpoint(checkpoint_path)
    stft_config, fb = _feature_front_end(settings)
    dataset = load_dataset(data_dir, fb, stft_config, settings["log_mel"])

    report = analysis.evaluate_model(checkpoint.bundle, dataset)
    report.centroid_shifts = conversion_grid(checkpoint.bundle, dataset)

    rows = [("reconstruction_l1", repr(report.reconstruction_l1))]
    for speaker in checkpoint.bundle.speakers:
        if speaker in report.reconstruction_l1_per_speaker:
            rows.append((f"reconstruction_l1[{speaker}]",
                         repr(report.reconstruction_l1_per_speaker[speaker])))
    rows.append(("code_classifier_error", repr(report.code_classifier_error)))
    rows.append(("mi_lower_bits", repr(report.mi_lower_bits)))
    rows.append(("mi_upper_bits", repr(report.mi_upper_bits)))
    rows.append(("mi_upper_is_conditional", "true" if report.mi_upper_is_conditional else "false"))
    for (src, tgt), shift in report.centroid_shifts.items():
        rows.append((f"centroid_shift[{src}->{tgt}]", repr(shift)))

    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(report_path,
                      "metric,value\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n")
    plotting.save_eval_figure(report, checkpoint.bundle.speakers,
                              report_path.with_suffix(".png"))

    write_manifest(
        Path(str(report_path) + ".manifest.json"),
        command="eval",
        settings=settings,
        inputs={"checkpoint": str(checkpoint_path), "data_dir": str(data_dir)},
        outputs={"report": str(report_path)},
    )
    return report_path


def cmd_bounds(n_classes, out_csv, grid_points=101, seed=0) -> Path:
    curve = analysis.bounds_curve(n_classes, grid_points)
    lines = ["p,lower_bits,upper_bits"]
    for p, lower, upper in curve.samples:
        upper_txt = "" if upper is None else repr(upper)
        lines.append(f"{p!r},{lower!r},{upper_txt}")
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_csv, "\n".join(lines) + "\n")
    plotting.save_bounds_figure(curve, out_csv.with_suffix(".png"))
    write_manifest(
        Path(str(out_csv) + ".manifest.json"),
        command="bounds",
        settings={"n_classes": n_classes, "grid_points": grid_points, "seed": seed},
        inputs={},
        outputs={"csv": str(out_csv)},
    )
    return out_csv


# ---------------------------------------------------------------------------
# argument parsing

def _add_settings_flags(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value settings file")
    parser.add_argument("--seed", type=int, default=None)


def _overrides_from_args(args, keys) -> dict:
    return {key: getattr(args, key, None) for key in keys}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcforge",
        description="Voice conversion with adversarially trained autoencoders.")
    parser.add_argument("--version", action="version", version=f"vcforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth-data", help="generate a synthetic WAV corpus")
    p_synth.add_argument("--out", type=Path, required=True, help="output directory")
    p_synth.add_argument("--f0", type=float, action="append", required=True,
                         help="fundamental in Hz; repeat per speaker")
    p_synth.add_argument("--utterances", type=int, default=10)
    p_synth.add_argument("--seconds", type=float, default=3.0)
    p_synth.add_argument("--harmonics", type=int, default=None,
                         help="harmonics per voice; default extends to the spectral cutoff")
    p_synth.add_argument("--decay", type=float, default=0.8)
    p_synth.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train a conversion model")
    p_train.add_argument("--data", type=Path, required=True, help="indexed WAV directory")
    p_train.add_argument("--out", type=Path, required=True, help="checkpoint path")
    _add_settings_flags(p_train)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p_train.add_argument("--lambda-adv", dest="lambda_adv", type=float, default=None)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)

    p_convert = sub.add_parser("convert", help="convert a WAV to a trained speaker's voice")
    p_convert.add_argument("--checkpoint", type=Path, required=True)
    p_convert.add_argument("--input", type=Path, required=True)
    p_convert.add_argument("--target", required=True, help="target speaker id")
    p_convert.add_argument("--out", type=Path, required=True)
    p_convert.add_argument("--dump-features", type=Path, default=None,
                           help="directory for mel tensor/CSV debug dumps")
    _add_settings_flags(p_convert)
    p_convert.add_argument("--iterations", dest="griffin_lim_iterations",
                           type=int, default=None)

    p_eval = sub.add_parser("eval", help="score a checkpoint on an indexed dataset")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--data", type=Path, required=True)
    p_eval.add_argument("--out", type=Path, required=True, help="report CSV path")
    _add_settings_flags(p_eval)

    p_bounds = sub.add_parser("bounds", help="emit the MI bound curves")
    p_bounds.add_argument("--n", type=int, required=True, help="number of classes")
    p_bounds.add_argument("--grid-points", type=int, default=101)
    p_bounds.add_argument("--out", type=Path, required=True, help="CSV path")
    p_bounds.add_argument("--seed", type=int, default=0)

    return parser


_TRAIN_OVERRIDE_KEYS = ("seed", "steps", "batch_size", "lambda_adv", "learning_rate")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth-data":
        specs = [SynthSpeakerSpec(fundamental_hz=f0, n_harmonics=args.harmonics,
                                  harmonic_decay=args.decay,
                                  utterance_seconds=args.seconds)
                 for f0 in args.f0]
        cmd_synth_dataset(specs, args.utterances, args.out, seed=args.seed)
    elif args.command == "train":
        cmd_train(args.data, args.out, config_path=args.config,
                  overrides=_overrides_from_args(args, _TRAIN_OVERRIDE_KEYS))
    elif args.command == "convert":
        cmd_convert(args.checkpoint, args.input, args.target, args.out,
                    config_path=args.config,
                    overrides=_overrides_from_args(args, ("seed", "griffin_lim_iterations")),
                    dump_features_dir=args.dump_features)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.data, args.out, config_path=args.config,
                 overrides=_overrides_from_args(args, ("seed",)))
    elif args.command == "bounds":
        cmd_bounds(args.n, args.out, grid_points=args.grid_points, seed=args.seed)
    return 0


_VALIDATION_ERRORS = (
    FileNotFoundError,
    ValueError,  # covers malformed WAVs, bad settings, speaker/shape errors
    KeyError,
    vc_train.CheckpointError,
)


def main(argv=None) -> int:
    try:
        return run(argv)
    except _VALIDATION_ERRORS as exc:
        print(f"vcforge: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"vcforge: i/o failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"vcforge: unexpected failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
