"""Acceptance suite: one test per criterion, each printing a PASS line.

The expensive criteria share one trained checkpoint through the session
fixture below; run with `pytest tests/test_acceptance.py -v -s` to watch
the per-criterion lines appear.
"""

import time

import numpy as np
import pytest

from vcforge import analysis, cli, dsp, model
from vcforge import autodiff as ad
from vcforge import train as vt
from vcforge.audio_io import AudioBuffer, load_wav

from helpers import gradcheck

TRAIN_STEPS = 10000
SOURCE_F0 = 120.0
TARGET_F0 = 240.0
UNSEEN_F0 = 180.0


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} — {detail}"
    print(line, flush=True)
    assert ok, line


# -----------------------------------------------------------------------------
# criterion 1: bound-curve reproduction


def test_criterion_1_bounds_curves(tmp_path):
    started = time.perf_counter()
    out_csv = tmp_path / "bounds.csv"
    cli.cmd_bounds(4, out_csv, grid_points=101)
    rows = {}
    for line in out_csv.read_text().splitlines()[1:]:
        p, lower, upper = line.split(",")
        rows[float(p)] = (float(lower), float(upper) if upper else None)
    elapsed = time.perf_counter() - started

    checks = [
        rows[0.0][0] == 2.0,
        rows[0.0][1] == 2.0,
        abs(rows[0.75][0]) <= 1e-12,
        abs(rows[0.75][1]) <= 1e-12,
        all(lower <= upper + 1e-12 for lower, upper in rows.values() if upper is not None),
        elapsed < 1.0,
    ]
    report(1, all(checks),
           f"f_l(0)={rows[0.0][0]}, f_u(0)={rows[0.0][1]}, "
           f"f_l(0.75)={rows[0.75][0]:.2e}, f_u(0.75)={rows[0.75][1]:.2e}, "
           f"lower<=upper on grid, runtime {elapsed:.2f}s")


# -----------------------------------------------------------------------------
# criterion 2: gradient integrity


def test_criterion_2_gradient_integrity():
    started = time.perf_counter()
    worst = 0.0

    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal((4, 3, 3)) * 0.6
        b = rng.standard_normal(4) * 0.2
        target = rng.standard_normal((4, 6)) + 2.5
        logits = rng.standard_normal(5)
        label = int(rng.integers(0, 5))

        worst = max(worst, gradcheck(
            lambda x, w, b: ad.tensor_sum(ad.conv1d(x, w, b)), [x, w, b]))
        worst = max(worst, gradcheck(
            lambda x: ad.tensor_sum(ad.relu(ad.instance_norm(x))), [x]))
        worst = max(worst, gradcheck(lambda p: ad.l1_loss(p, target),
                                     [rng.standard_normal((4, 6))]))
        worst = max(worst, gradcheck(lambda l: ad.cross_entropy(l, label), [logits]))

    # composed encoder -> decoder -> classifier stacks at fp64
    bundle = model.build_bundle(["p", "q"], seed=55)
    for p in bundle.all_parameters():
        p.data = p.data.astype(np.float64)
    for seed in range(10):
        rng = np.random.default_rng(2000 + seed)
        mel = rng.standard_normal((128, 3))
        target = rng.standard_normal((128, 3)) * 2.0

        def stack_loss(mel_tensor):
            code = model.encode(bundle, mel_tensor)
            recon = model.decode(bundle, "p", code)
            logits = model.classify(bundle, code)
            return ad.l1_loss(recon, target) + ad.cross_entropy(logits, 0)

        worst = max(worst, gradcheck(stack_loss, [mel]))
        for p in bundle.all_parameters():
            p.grad = None

    elapsed = time.perf_counter() - started
    report(2, worst <= 1e-4 and elapsed < 120.0,
           f"max relative error {worst:.2e} over 10 seeds, runtime {elapsed:.1f}s")


# -----------------------------------------------------------------------------
# criterion 3: DSP oracles


def test_criterion_3_dsp_oracles():
    started = time.perf_counter()
    config = dsp.StftConfig()

    # stft/istft round trip on random signals
    round_trip_err = 0.0
    for seed in range(3):
        samples = np.random.default_rng(seed).standard_normal(5 * 1024)
        rebuilt = dsp.istft(dsp.stft(AudioBuffer(samples, 16000), config))
        n = len(rebuilt.samples)
        interior = slice(1024, n - 1024)
        round_trip_err = max(round_trip_err,
                             float(np.abs(rebuilt.samples[interior]
                                          - samples[:n][interior]).max()))

    # Griffin-Lim monotone consistency on a random non-negative spec
    rng = np.random.default_rng(17)
    rand_spec = dsp.Spectrogram(rng.random((513, 24)), config)
    distances = []
    dsp.griffin_lim(rand_spec, iterations=60, rng_seed=3, distance_log=distances)
    monotone = bool(np.all(np.diff(distances) <= 1e-7))

    # self-consistent reconstruction of a 440 Hz sinusoid
    t = np.arange(16000) / 16000.0
    sine = AudioBuffer(np.sin(2 * np.pi * 440.0 * t), 16000)
    target = np.abs(dsp.stft(sine, config).bins)
    audio = dsp.griffin_lim(dsp.Spectrogram(target, config), iterations=60, rng_seed=0)
    rebuilt = np.abs(dsp.stft(audio, config).bins)
    convergence = float(np.linalg.norm(rebuilt - target) / np.linalg.norm(target))

    elapsed = time.perf_counter() - started
    ok = round_trip_err <= 1e-6 and monotone and convergence < 0.1 and elapsed < 60.0
    report(3, ok,
           f"round-trip {round_trip_err:.2e}, GL monotone={monotone}, "
           f"440 Hz convergence {convergence:.3f}, runtime {elapsed:.1f}s")


# -----------------------------------------------------------------------------
# criteria 4-6 share one trained checkpoint


@pytest.fixture(scope="session")
def desk_scale_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_scale")
    data_dir = root / "data"
    specs = [cli.SynthSpeakerSpec(SOURCE_F0), cli.SynthSpeakerSpec(TARGET_F0)]
    cli.cmd_synth_dataset(specs, 10, data_dir, seed=0)
    ckpt_path = root / "model.ckpt"
    started = time.perf_counter()
    cli.cmd_train(data_dir, ckpt_path, overrides={"steps": TRAIN_STEPS, "seed": 0})
    train_seconds = time.perf_counter() - started
    return {"root": root, "data": data_dir, "checkpoint": ckpt_path,
            "train_seconds": train_seconds}


def test_criterion_4_adversarial_desk_scale(desk_scale_run):
    ckpt = vt.load_checkpoint(desk_scale_run["checkpoint"])
    records = vt.read_train_log(
        desk_scale_run["checkpoint"].with_name("model_log.csv"))

    initial = float(np.mean([r.recon_loss for r in records[:10]]))
    final = float(np.mean([r.recon_loss for r in records[-100:]]))
    recon_ok = final < 0.10 * initial

    settings = cli.resolve_settings()
    stft_config, fb = cli._feature_front_end(settings)
    dataset = cli.load_dataset(desk_scale_run["data"], fb, stft_config)
    probe_acc, n_held = vt.probe_code_classifier(ckpt.bundle, dataset, seed=0)
    probe_ok = probe_acc <= 0.65

    p_e = 1.0 - probe_acc
    mi_lower = analysis.mi_lower_bound(p_e, len(ckpt.bundle.speakers))
    mi_ok = mi_lower <= 0.15

    runtime_ok = desk_scale_run["train_seconds"] < 1800.0
    report(4, recon_ok and probe_ok and mi_ok,
           f"recon {final:.4f} vs initial {initial:.4f} ({final/initial:.3f}x, need <0.10), "
           f"probe accuracy {probe_acc:.3f} over {n_held} held out (need <=0.65), "
           f"mi_lower {mi_lower:.3f} bits (need <=0.15), "
           f"train {desk_scale_run['train_seconds']/60:.1f} min "
           f"(target <30, met={runtime_ok})")


def _converted_shift(run, source_wav, target_speaker, out_name):
    settings = cli.resolve_settings()
    stft_config, fb = cli._feature_front_end(settings)
    out_wav = run["root"] / out_name
    cli.cmd_convert(run["checkpoint"], source_wav, target_speaker, out_wav,
                    overrides={"seed": 0})
    source_mel = cli.wav_to_features(source_wav, fb, stft_config)
    converted_mel = cli.wav_to_features(out_wav, fb, stft_config)
    refs = [cli.wav_to_features(p, fb, stft_config)
            for p in sorted(run["data"].glob(f"{target_speaker}_*.wav"))]
    shift = analysis.spectral_centroid_shift(source_mel, converted_mel, refs)
    raw_delta = (analysis.mel_band_centroid(converted_mel)
                 - analysis.mel_band_centroid(source_mel))
    return shift, raw_delta


def test_criterion_5_conversion_direction(desk_scale_run):
    started = time.perf_counter()
    low_wav = sorted(desk_scale_run["data"].glob("spk0_*.wav"))[0]
    high_wav = sorted(desk_scale_run["data"].glob("spk1_*.wav"))[0]

    up_shift, up_delta = _converted_shift(desk_scale_run, low_wav, "spk1", "up.wav")
    down_shift, down_delta = _converted_shift(desk_scale_run, high_wav, "spk0", "down.wav")
    elapsed = time.perf_counter() - started

    ok = up_shift > 0.5 and up_delta > 0.0 and down_delta < 0.0 and elapsed < 120.0
    report(5, ok,
           f"low->high shift {up_shift:.3f} (need >0.5, centroid delta {up_delta:+.1f}), "
           f"high->low centroid delta {down_delta:+.1f} (opposite direction, "
           f"normalized {down_shift:.3f}), runtime {elapsed:.1f}s")


def test_criterion_6_out_of_training_source(desk_scale_run):
    unseen_dir = desk_scale_run["root"] / "unseen"
    cli.cmd_synth_dataset(
        [cli.SynthSpeakerSpec(UNSEEN_F0), cli.SynthSpeakerSpec(UNSEEN_F0)],
        1, unseen_dir, seed=99, speaker_ids=["mx", "mx2"])
    unseen_wav = unseen_dir / "mx_000.wav"

    to_high, _ = _converted_shift(desk_scale_run, unseen_wav, "spk1", "mx_high.wav")
    to_low, _ = _converted_shift(desk_scale_run, unseen_wav, "spk0", "mx_low.wav")
    ok = to_high > 0.3 and to_low > 0.3
    report(6, ok,
           f"unseen 180 Hz source: shift toward spk1 {to_high:.3f}, "
           f"toward spk0 {to_low:.3f} (both need >0.3)")


# -----------------------------------------------------------------------------
# criterion 7: persistence and reproducibility


def test_criterion_7_persistence_and_reproducibility(desk_scale_run, tmp_path):
    # bitwise save/load round trip of the 10k-step checkpoint
    ckpt = vt.load_checkpoint(desk_scale_run["checkpoint"])
    resaved = tmp_path / "resaved.ckpt"
    vt.save_checkpoint(resaved, ckpt)
    round_trip_ok = resaved.read_bytes() == desk_scale_run["checkpoint"].read_bytes()

    # two complete pipeline runs with equal seeds, byte-identical outputs
    outs = []
    for tag in ("one", "two"):
        out_ckpt = tmp_path / f"{tag}.ckpt"
        cli.cmd_train(desk_scale_run["data"], out_ckpt,
                      overrides={"steps": 300, "seed": 123})
        outs.append((out_ckpt.read_bytes(),
                     out_ckpt.with_name(f"{tag}_log.csv").read_bytes()))
    rerun_ok = outs[0] == outs[1]

    report(7, round_trip_ok and rerun_ok,
           f"checkpoint round-trip bitwise={round_trip_ok}, "
           f"equal-seed reruns byte-identical={rerun_ok}")
