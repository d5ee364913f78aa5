import pytest

from dtdy.audio import read_manifest
from dtdy.model import ModelConfig, build_model
from dtdy.synth import SynthSpec, synth_dataset
from dtdy.training import TrainConfig, train

TOY_MODEL = ModelConfig(stage_channels=(4, 4, 4, 4), stage_blocks=(1, 1, 1, 1), emb_dim=16)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four speakers, four 1.5 s utterances each (two held out)."""
    out = tmp_path_factory.mktemp("corpus")
    synth_dataset(SynthSpec(n_speakers=4, utterances_per_speaker=4, utterance_seconds=1.5,
                            test_utterances_per_speaker=2), seed=11, out_dir=out)
    return out


@pytest.fixture(scope="session")
def toy_model(tiny_corpus, tmp_path_factory):
    """A tiny DTDY network briefly trained on the tiny corpus."""
    cfg = TrainConfig(epochs=60, n_speakers_per_batch=4, seed=0, lr0=3e-3, lr_every=1000,
                      segment_seconds=1.0, keep_checkpoints=1)
    tr = train(build_model(TOY_MODEL, seed=0), read_manifest(tiny_corpus / "train.csv"), cfg,
               tmp_path_factory.mktemp("toy_run"))
    tr.model.eval()
    return tr.model


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

