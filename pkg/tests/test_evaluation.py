import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtdy.audio import Waveform
from dtdy.evaluation import (Trial, TrialListError, compute_eer, compute_min_dcf, evaluate, read_trials,
                             score_trial, segment_embeddings, similarity_grid, write_trials)

from oracles import eer_sweep, min_dcf_sweep


def random_scores(seed):
    rng = np.random.default_rng(seed)
    nt, nn = rng.integers(1, 60, size=2)
    t = rng.normal(1.0, 1.0, nt)
    n = rng.normal(0.0, 1.0, nn)
    if seed % 3 == 0:  # coarse grid to force ties
        t, n = np.round(t, 1), np.round(n, 1)
    return t.tolist(), n.tolist()


# ---------------------------------------------------------------------------
# EER


def test_eer_separable():
    assert compute_eer([0.9, 0.8, 0.7], [0.3, 0.2, 0.1])[0] == 0.0


def test_eer_identical_lists_is_half():
    s = [0.1, 0.4, 0.35, 0.8, 0.6]
    assert compute_eer(s, s)[0] == 0.5


def test_eer_interleaved_example():
    assert compute_eer([0.8, 0.2], [0.7, 0.1])[0] == 0.5


def test_eer_matches_sweep_oracle():
    for seed in range(100):
        t, n = random_scores(seed)
        assert compute_eer(t, n)[0] == eer_sweep(t, n), seed


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        compute_eer([], [0.1])
    with pytest.raises(ValueError):
        compute_min_dcf([0.1], [])


# ---------------------------------------------------------------------------
# minDCF


def test_min_dcf_separable_and_constant():
    assert compute_min_dcf([0.9, 0.8], [0.1, 0.2])[0] == 0.0
    assert compute_min_dcf([0.5] * 4, [0.5] * 7)[0] == 1.0


def test_min_dcf_matches_sweep_oracle():
    for seed in range(100):
        t, n = random_scores(seed)
        assert compute_min_dcf(t, n)[0] == min_dcf_sweep(t, n), seed


def test_min_dcf_threshold_attains_minimum():
    t, n = random_scores(7)
    val, thr = compute_min_dcf(t, n)
    pm = np.mean(np.array(t) < thr)
    pf = np.mean(np.array(n) >= thr)
    assert abs((0.05 * pm + 0.95 * pf) / 0.05 - val) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_min_dcf_never_exceeds_reject_all(t, n):
    assert 0.0 <= compute_min_dcf(t, n)[0] <= 1.0
    assert 0.0 <= compute_eer(t, n)[0] <= 1.0


# ---------------------------------------------------------------------------
# invariances


def test_metrics_invariant_to_increasing_transform():
    for seed in range(20):
        t, n = random_scores(seed)
        f = lambda v: np.exp(np.asarray(v) / 3.0) * 2.0
        assert compute_eer(f(t), f(n))[0] == compute_eer(t, n)[0]
        assert compute_min_dcf(f(t), f(n))[0] == compute_min_dcf(t, n)[0]


def test_swapped_lists_on_negated_scores():
    for seed in range(20):
        t, n = random_scores(seed)
        nt, nn = [-v for v in n], [-v for v in t]
        assert compute_eer(nt, nn)[0] == eer_sweep(nt, nn)
        if seed % 3:  # no ties: the negated problem is the same problem
            assert abs(compute_eer(nt, nn)[0] - compute_eer(t, n)[0]) < 1e-12


# ---------------------------------------------------------------------------
# scoring protocol


def test_score_grid_is_ten_by_ten(toy_model):
    w = Waveform(np.random.default_rng(0).standard_normal(48000) * 0.1)
    e = segment_embeddings(toy_model, w)
    assert e.shape == (10, toy_model.cfg.emb_dim)
    assert similarity_grid(e, e).shape == (10, 10)


def test_score_is_mean_of_100_cosines(toy_model):
    rng = np.random.default_rng(1)
    a = Waveform(rng.standard_normal(80000) * 0.1)
    b = Waveform(rng.standard_normal(40000) * 0.1)
    ea, eb = segment_embeddings(toy_model, a), segment_embeddings(toy_model, b)
    cos = [float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v))) for u in ea for v in eb]
    assert len(cos) == 100
    s = score_trial(toy_model, a, b)
    assert abs(s - sum(cos) / 100) < 1e-12
    assert -1.0 <= s <= 1.0


@pytest.mark.parametrize("n", [48000, 64000])
def test_same_utterance_scores_one(toy_model, n):
    w = Waveform(np.random.default_rng(n).standard_normal(n) * 0.1)
    assert abs(score_trial(toy_model, w, w) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# trial lists and end-to-end evaluation


def test_trial_round_trip_and_errors(tmp_path):
    rows = [Trial(1, "a.wav", "b.wav"), Trial(0, "a.wav", "c.wav")]
    write_trials(tmp_path / "t.txt", rows)
    assert read_trials(tmp_path / "t.txt") == rows
    (tmp_path / "empty.txt").write_text("\n")
    with pytest.raises(TrialListError, match="empty.txt"):
        read_trials(tmp_path / "empty.txt")
    (tmp_path / "bad.txt").write_text("2 a b\n")
    with pytest.raises(TrialListError, match="bad.txt:1"):
        read_trials(tmp_path / "bad.txt")


def _self_vs_other_trials(corpus):
    trials = read_trials(corpus / "trials.txt")
    paths = sorted({t.path_a for t in trials} | {t.path_b for t in trials})
    same = [Trial(1, p, p) for p in paths]
    other = [t for t in trials if t.label == 0]
    return same + other


def test_evaluate_self_trials_beat_chance(toy_model, tiny_corpus, tmp_path):
    trials = _self_vs_other_trials(tiny_corpus)
    rep = evaluate(toy_model, trials, tiny_corpus, tmp_path)
    assert rep.eer < 0.5
    assert rep.n_target + rep.n_nontarget == len(trials)
    assert rep.n_target == sum(t.label for t in trials)
    lines = (tmp_path / "scores.csv").read_text().splitlines()
    assert lines[0] == "label,path_a,path_b,score"
    assert len(lines) == len(trials) + 1
    assert all(len(ln.rsplit(",", 1)[1].split(".")[1]) == 9 for ln in lines[1:])


def test_evaluate_is_deterministic(toy_model, tiny_corpus, tmp_path):
    trials = read_trials(tiny_corpus / "trials.txt")
    evaluate(toy_model, trials, tiny_corpus, tmp_path / "a")
    evaluate(toy_model, trials, tiny_corpus, tmp_path / "b")
    for name in ("scores.csv", "det.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_names_unreadable_row(toy_model, tiny_corpus):
    trials = read_trials(tiny_corpus / "trials.txt")[:2] + [Trial(0, "missing.wav", "nope.wav")]
    with pytest.raises(FileNotFoundError, match="trial row 3"):
        evaluate(toy_model, trials, tiny_corpus)


def test_evaluate_needs_both_labels(toy_model, tiny_corpus):
    trials = [t for t in read_trials(tiny_corpus / "trials.txt") if t.label == 1]
    with pytest.raises(TrialListError):
        evaluate(toy_model, trials, tiny_corpus)
