import csv
import wave

import numpy as np
import pytest

from dtdy import audio, cli
from dtdy.config import ConfigError, RunConfig, load_config, parse_config_text
from dtdy.explain import PHONEME_GROUPS, read_alignment
from dtdy.model import build_model, count_params
from dtdy.synth import MIN_F0_GAP, MIN_FORMANT_GAP, SynthSpec, Voice, make_voices, render_segment, synth_dataset
from dtdy.training import NumericError

from oracles import dft_power

TINY_SETS = ["width_mult=0.125", "stage_blocks=1,1,1,1", "emb_dim=16", "epochs=2", "n_speakers_per_batch=2",
             "segment_seconds=0.5", "n_speakers=4", "utterances_per_speaker=4", "utterance_seconds=1.5",
             "head_train=3", "head_test=1", "head_steps=50"]


def sets(*extra):
    out = []
    for kv in TINY_SETS + list(extra):
        out += ["--set", kv]
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


def test_two_by_three_counts(tmp_path):
    paths = synth_dataset(SynthSpec(n_speakers=2, utterances_per_speaker=3, utterance_seconds=3.0,
                                    test_utterances_per_speaker=1), seed=0, out_dir=tmp_path)
    assert len(list(tmp_path.glob("wav/*/*.wav"))) == 6
    assert len(audio.read_manifest(paths["manifest"])) == 6
    assert len(list(tmp_path.glob("align/*.csv"))) == 6
    with wave.open(str(next(tmp_path.glob("wav/*/*.wav"))), "rb") as wf:
        assert (wf.getframerate(), wf.getnchannels(), wf.getsampwidth()) == (16000, 1, 2)
        assert wf.getnframes() == 48000


def test_same_seed_is_byte_identical(tmp_path):
    spec = SynthSpec(n_speakers=2, utterances_per_speaker=2, utterance_seconds=1.0, test_utterances_per_speaker=1)
    synth_dataset(spec, seed=3, out_dir=tmp_path / "a")
    synth_dataset(spec, seed=3, out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    synth_dataset(spec, seed=4, out_dir=tmp_path / "c")
    assert (tmp_path / "a/wav/spk000/utt00.wav").read_bytes() != (tmp_path / "c/wav/spk000/utt00.wav").read_bytes()


def test_alignments_tile_each_utterance(tiny_corpus):
    for p in sorted((tiny_corpus / "align").glob("*.csv")):
        rows = read_alignment(p)
        assert rows[0].start_frame == 0
        assert all(a.end_frame == b.start_frame for a, b in zip(rows, rows[1:]))
        assert rows[-1].end_frame == 150
        assert all(r.group in PHONEME_GROUPS and r.end_frame > r.start_frame for r in rows)


def test_voices_are_separated():
    vs = make_voices(60, seed=1)
    for i, a in enumerate(vs):
        assert 80 <= a.f0 <= 300
        for b in vs[:i]:
            assert abs(a.f0 - b.f0) >= MIN_F0_GAP or any(
                abs(x - y) >= MIN_FORMANT_GAP for x, y in zip(a.formants, b.formants))


def _mel_log_spectrum(x):
    frames = audio.frame_signal(x)[4:16] * np.hamming(400)
    return np.log(np.mean([audio.mel_filterbank() @ dft_power(f, 512) for f in frames], axis=0))


def _has_peak_near(lm, hz):
    k = int(np.argmin(np.abs(audio.mel_centers() - hz)))
    return any(lm[j] >= lm[j - 1] and lm[j] >= lm[j + 1] for j in range(k - 1, k + 2))


def test_vowel_spectrum_peaks_at_formants():
    for v in make_voices(20, seed=0):
        lm = _mel_log_spectrum(render_segment("vowels", 3200, v, np.random.default_rng(0)))
        assert _has_peak_near(lm, v.formants[1]) and _has_peak_near(lm, v.formants[2])
        # the first formant is only resolved when harmonics are denser than the Mel bins there
        if v.f0 <= 140:
            assert _has_peak_near(lm, v.formants[0])


def test_low_voice_formants_resolved():
    v = Voice(100.0, (600.0, 1500.0, 2800.0), -1.1, 5000.0)
    lm = _mel_log_spectrum(render_segment("vowels", 3200, v, np.random.default_rng(2)))
    assert all(_has_peak_near(lm, f) for f in v.formants)


def test_unwritable_output_rejected(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        synth_dataset(SynthSpec(n_speakers=2, utterances_per_speaker=2, utterance_seconds=0.5,
                                test_utterances_per_speaker=1), seed=0, out_dir=tmp_path / "file" / "sub")


# ---------------------------------------------------------------------------
# config


def test_config_text_parsing():
    raw = parse_config_text("# comment\nseed = 4\n\nr = 1/16  # trailing\n")
    assert raw == {"seed": "4", "r": "1/16"}
    cfg = RunConfig().with_updates(raw)
    assert cfg.seed == 4 and cfg.r == 1 / 16


def test_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig().with_updates({"bogus": "1"})
    with pytest.raises(ConfigError):
        RunConfig().with_updates({"epochs": "many"})
    with pytest.raises(ConfigError):
        RunConfig().with_updates({"pooling": "MAX"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt", {})


def test_config_dump_round_trip(tmp_path):
    cfg = RunConfig().with_updates({"seed": "9", "r": "0.0625", "manifest": "x.csv"})
    (tmp_path / "c.txt").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.txt", {}) == cfg


# ---------------------------------------------------------------------------
# CLI


def run_cli(capsys, *argv):
    code = cli.run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors(capsys, tmp_path):
    code, _, err = run_cli(capsys, "params", "--nonsense", "--out", str(tmp_path))
    assert code == 2 and err.startswith("dtdy: error[usage]:")
    assert run_cli(capsys, "nope")[0] == 2
    assert run_cli(capsys, "params", "--set", "novalue", "--out", str(tmp_path))[0] == 2


def test_config_errors(capsys, tmp_path):
    code, _, err = run_cli(capsys, "params", "--set", "bogus=1", "--out", str(tmp_path))
    assert code == 3 and "bogus" in err
    code, _, err = run_cli(capsys, "train", "--out", str(tmp_path))
    assert code == 3 and "manifest" in err
    assert len(err.strip().splitlines()) == 1


def test_eval_empty_trials_names_file(capsys, tmp_path):
    (tmp_path / "empty_trials.txt").write_text("")
    code, _, err = run_cli(capsys, "eval", "--out", str(tmp_path / "o"), "--set",
                           f"trials={tmp_path / 'empty_trials.txt'}", "--set", "model=whatever.bin")
    assert code == 3
    assert "empty_trials.txt" in err


def test_io_error_for_missing_checkpoint(capsys, tiny_corpus, tmp_path):
    code, _, err = run_cli(capsys, "embed", "--out", str(tmp_path), "--set", f"manifest={tiny_corpus / 'manifest.csv'}",
                           "--set", f"model={tmp_path / 'missing.bin'}")
    assert code == 4 and err.startswith("dtdy: error[io]:")


def test_numeric_error_exit_code(capsys, tiny_corpus, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss at step 3")
    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run_cli(capsys, "train", "--out", str(tmp_path), "--set", f"manifest={tiny_corpus / 'train.csv'}")
    assert code == 5 and "step 3" in err


def test_params_command(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "params", "--out", str(tmp_path), "--set", "param_width=0.125",
                           "--set", "param_stage_blocks=1,1,1,1", "--set", "param_emb_dim=32")
    assert code == 0
    rows = dict(line.split(",") for line in out.strip().splitlines())
    assert list(rows) == ["vanilla_x0.12_tap", "tdy_x0.12_tap", "dtdy_x0.12_tap"]
    cfg = RunConfig()
    for kind in ("vanilla", "tdy", "dtdy"):
        mc = cfg.model_config(conv_kind=kind, width_mult=0.125, stage_blocks=(1, 1, 1, 1), emb_dim=32)
        assert int(rows[f"{kind}_x0.12_tap"]) == count_params(build_model(mc))
    assert int(rows["vanilla_x0.12_tap"]) < int(rows["dtdy_x0.12_tap"]) < int(rows["tdy_x0.12_tap"])
    assert (tmp_path / "params.csv").read_text().startswith("model,params\n")


def test_rerun_from_dumped_config_is_identical(capsys, tmp_path):
    run_cli(capsys, "params", "--out", str(tmp_path / "a"), "--seed", "5", "--set", "param_width=0.125",
            "--set", "param_stage_blocks=1,1,1,1")
    dumped = (tmp_path / "a" / "config.txt").read_text()
    run_cli(capsys, "params", "--config", str(tmp_path / "a" / "config.txt"))
    # the dump names its own output directory, so the re-run lands in the same place
    assert (tmp_path / "a" / "config.txt").read_text() == dumped


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> eval -> embed -> sam -> frames on a four-speaker corpus."""
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    codes = {"synth": cli.run(["synth", "--out", str(data), "--seed", "2"] + sets())}
    codes["train"] = cli.run(["train", "--out", str(run_dir), "--seed", "2", "--set", f"manifest={data / 'train.csv'}"]
                             + sets())
    model = f"model={run_dir / 'model.bin'}"
    codes["eval"] = cli.run(["eval", "--out", str(root / "eval"), "--set", model, "--set",
                             f"trials={data / 'trials.txt'}"] + sets())
    codes["embed"] = cli.run(["embed", "--out", str(root / "embed"), "--set", model, "--set",
                              f"manifest={data / 'manifest.csv'}"] + sets())
    codes["sam"] = cli.run(["sam", "--out", str(root / "sam"), "--set", model, "--set",
                            f"manifest={data / 'manifest.csv'}"] + sets())
    codes["frames"] = cli.run(["frames", "--out", str(root / "frames"), "--set", model, "--set",
                               f"manifest={data / 'manifest.csv'}", "--set", f"alignments={data / 'align'}"] + sets())
    return root, codes


def test_pipeline_exit_codes(pipeline):
    assert pipeline[1] == dict.fromkeys(["synth", "train", "eval", "embed", "sam", "frames"], 0)


def test_pipeline_artifacts(pipeline):
    root = pipeline[0]
    log = (root / "run" / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,epoch,lr,loss_ap,loss_sm,loss_total" and len(log) == 1 + 2 * 2
    with open(root / "embed" / "embeddings.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["speaker_id", "utterance_path", "e0"] and len(rows) == 17 and len(rows[1]) == 18
    sam = (root / "sam" / "sam.csv").read_text().splitlines()
    assert sam[0].startswith("# speaker=spk000 layer=stem F=64 T=")
    vals = np.array([[float(v) for v in ln.split(",")] for ln in sam[1:]])
    assert vals.shape[0] == 64 and vals.min() >= 0 and vals.max() <= 1
    assert (root / "frames" / "frames_same.csv").read_text().startswith("group,n_frames,mean,median,q25,q75\n")
    for d in ("data", "run", "eval", "embed", "sam", "frames"):
        assert (root / d / "config.txt").exists()


def test_frames_without_alignment_is_io_error(capsys, pipeline, tmp_path):
    root = pipeline[0]
    code, _, err = run_cli(capsys, "frames", "--out", str(tmp_path), "--set", f"model={root / 'run' / 'model.bin'}",
                           "--set", f"manifest={root / 'data' / 'manifest.csv'}", "--set", f"alignments={tmp_path}")
    assert code == 4 and "no alignment" in err
