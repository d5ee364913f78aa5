"""Trial scoring and verification metrics (EER, normalised minDCF)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dtdy.audio import Waveform, featurize, read_wav, sample_eval_segments
from dtdy.model import SpeakerNet, forward_embedding


class TrialListError(ValueError):
    pass


@dataclass
class Trial:
    label: int
    path_a: str
    path_b: str


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    n_target: int
    n_nontarget: int
    target_scores: list[float] = field(default_factory=list, repr=False)
    nontarget_scores: list[float] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("target_scores")
        d.pop("nontarget_scores")
        return d


# ---------------------------------------------------------------------------
# metrics


def _check(target, nontarget) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(target, dtype=np.float64).ravel()
    n = np.asarray(nontarget, dtype=np.float64).ravel()
    if t.size == 0 or n.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    return t, n


def error_rates(target, nontarget, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """(FRR, FAR) at each threshold: targets below it, nontargets at or above it."""
    t, n = np.sort(np.asarray(target, float)), np.sort(np.asarray(nontarget, float))
    th = np.asarray(thresholds, float)
    frr = np.searchsorted(t, th, side="left") / t.size
    far = (n.size - np.searchsorted(n, th, side="left")) / n.size
    return frr, far


def compute_eer(target_scores, nontarget_scores) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Both error curves are evaluated at every distinct score; the EER is
    read off where they cross, linearly interpolating between the two
    bracketing thresholds.
    """
    t, n = _check(target_scores, nontarget_scores)
    th = np.unique(np.concatenate([t, n]))
    frr, far = error_rates(t, n, th)
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0 or i == 0:
        return float(frr[i]), float(th[i])
    alpha = d[i - 1] / (d[i - 1] - d[i])
    eer = frr[i - 1] + alpha * (frr[i] - frr[i - 1])
    thr = th[i - 1] + alpha * (th[i] - th[i - 1])
    return float(eer), float(thr)


def compute_min_dcf(target_scores, nontarget_scores, p_target: float = 0.05,
                    c_miss: float = 1.0, c_fa: float = 1.0) -> tuple[float, float]:
    """Minimum normalised detection cost and the threshold attaining it."""
    t, n = _check(target_scores, nontarget_scores)
    u = np.unique(np.concatenate([t, n]))
    th = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    p_miss, p_fa = error_rates(t, n, th)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    cost = (c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa) / norm
    i = int(np.argmin(cost))
    return float(cost[i]), float(th[i])


def det_points(target_scores, nontarget_scores) -> list[tuple[float, float, float]]:
    t, n = _check(target_scores, nontarget_scores)
    th = np.unique(np.concatenate([t, n]))
    frr, far = error_rates(t, n, th)
    return list(zip(th.tolist(), frr.tolist(), far.tolist()))


# ---------------------------------------------------------------------------
# scoring


def segment_embeddings(model: SpeakerNet, w: Waveform) -> np.ndarray:
    """Embeddings of the ten evaluation segments of one utterance, (10, D)."""
    feats = np.stack([featurize(s) for s in sample_eval_segments(w)])
    return forward_embedding(model, feats)


def similarity_grid(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """Cosine similarity of every segment of a against every segment of b."""
    a = emb_a / np.linalg.norm(emb_a, axis=1, keepdims=True)
    b = emb_b / np.linalg.norm(emb_b, axis=1, keepdims=True)
    return a @ b.T


def score_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    return float(similarity_grid(emb_a, emb_b).mean())


def score_trial(model: SpeakerNet, utt_a: Waveform, utt_b: Waveform) -> float:
    """Mean of the 10 x 10 segment cosine similarities."""
    return score_embeddings(segment_embeddings(model, utt_a), segment_embeddings(model, utt_b))


def read_trials(path) -> list[Trial]:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise TrialListError(f"{path}:{lineno}: expected 'label path_a path_b'")
            rows.append(Trial(int(parts[0]), parts[1], parts[2]))
    if not rows:
        raise TrialListError(f"{path}: trial list is empty")
    return rows


def write_trials(path, trials: list[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.path_a} {t.path_b}\n")


def evaluate(model: SpeakerNet, trials: list[Trial], base_dir=".", out_dir=None) -> EvalReport:
    """Score every trial, compute EER and minDCF, optionally write score files.

    Segment embeddings are cached per path (scoring is deterministic).
    """
    base = Path(base_dir)
    cache: dict[str, np.ndarray] = {}

    def emb(p: str, row: int) -> np.ndarray:
        if p not in cache:
            try:
                w = read_wav(base / p)
            except (OSError, ValueError) as e:
                raise FileNotFoundError(f"trial row {row}: cannot read {p}: {e}") from e
            cache[p] = segment_embeddings(model, w)
        return cache[p]

    scores = [score_embeddings(emb(t.path_a, i), emb(t.path_b, i)) for i, t in enumerate(trials, 1)]
    tgt = [s for s, t in zip(scores, trials) if t.label == 1]
    non = [s for s, t in zip(scores, trials) if t.label == 0]
    if not tgt or not non:
        raise TrialListError("trial list needs both target and nontarget rows")
    eer, eer_th = compute_eer(tgt, non)
    dcf, dcf_th = compute_min_dcf(tgt, non)
    report = EvalReport(eer, eer_th, dcf, dcf_th, len(tgt), len(non), tgt, non)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scores.csv", "w", encoding="utf-8") as fh:
            fh.write("label,path_a,path_b,score\n")
            for s, t in zip(scores, trials):
                fh.write(f"{t.label},{t.path_a},{t.path_b},{s:.9f}\n")
        with open(out / "det.csv", "w", encoding="utf-8") as fh:
            fh.write("threshold,p_miss,p_fa\n")
            for th, pm, pf in det_points(tgt, non):
                fh.write(f"{th:.9f},{pm:.9f},{pf:.9f}\n")
        (out / "report.json").write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return report
