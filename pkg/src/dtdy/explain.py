"""Speaker activation maps (Grad-CAM at the first layer) and frame-level analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dtdy import tensor as T
from dtdy.audio import Utterance, featurize, read_wav
from dtdy.model import SpeakerClassifier, SpeakerNet, attach_classifier, forward_embedding, forward_frame_embeddings
from dtdy.training import OptimState, adam_step, group_by_speaker, softmax_loss
from dtdy.tensor import Tape, Tensor

PHONEME_GROUPS = ("vowels", "semivowels", "nasals", "fricatives", "stops")


@dataclass
class SpeakerActivationMap:
    values: np.ndarray
    target_speaker: str
    source_layer: str


@dataclass
class AlignmentRow:
    start_frame: int
    end_frame: int
    phoneme: str
    group: str


# ---------------------------------------------------------------------------
# Grad-CAM


def sam_weights(clf: SpeakerClassifier, x: np.ndarray, speaker: int, source_layer: str = "stem",
                logit_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Activation ``A`` (C, F', T') at the tap and its gradient d y_s / d A."""
    if not 0 <= speaker < clf.n_speakers:
        raise ValueError(f"speaker index {speaker} out of range [0, {clf.n_speakers})")
    clf.eval()
    net = clf.backbone
    with Tape() as tape:
        a = net.stem_forward(x)
        if source_layer == "stem":
            tap = a
            feat = net.trunk(a)
        else:
            taps: dict[str, Tensor] = {}
            feat = net.trunk(a, taps)
            if source_layer not in taps:
                raise ValueError(f"unknown source layer {source_layer!r}; choose stem or one of {list(taps)}")
            tap = taps[source_layer]
        logits = clf.head(net.pool_embed(feat))
        y = T.mul(T.index(logits, (0, speaker)), logit_scale)
    T.backward(tape, y)
    return tap.data[0], tap.grad[0]


def grad_cam(act: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """relu(sum_c mean(grad_c) * act_c), scaled to [0, 1] by its maximum."""
    alpha = grad.mean(axis=(1, 2))
    m = np.maximum(np.tensordot(alpha, act, axes=(0, 0)), 0.0)
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def _to_input_grid(m: np.ndarray, F: int, Tn: int) -> np.ndarray:
    if m.shape == (F, Tn):
        return m
    rf, rt = -(-F // m.shape[0]), -(-Tn // m.shape[1])
    return np.repeat(np.repeat(m, rf, axis=0), rt, axis=1)[:F, :Tn]


def compute_sam(clf: SpeakerClassifier, x: np.ndarray, speaker: int, source_layer: str = "stem",
                speaker_name: str | None = None, logit_scale: float = 1.0) -> SpeakerActivationMap:
    """Speaker activation map for one F x T log-Mel input."""
    x = np.asarray(x, dtype=np.float64)
    act, grad = sam_weights(clf, x, speaker, source_layer, logit_scale)
    m = _to_input_grid(grad_cam(act, grad), *x.shape)
    return SpeakerActivationMap(m, speaker_name if speaker_name is not None else str(speaker), source_layer)


def write_sam(path, sam: SpeakerActivationMap) -> None:
    F, Tn = sam.values.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# speaker={sam.target_speaker} layer={sam.source_layer} F={F} T={Tn}\n")
        for row in sam.values:
            fh.write(",".join(f"{v:.9f}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# classifier head


class InsufficientUtterancesError(ValueError):
    pass


def split_utterances(rows: Sequence[Utterance], n_train: int = 8, n_test: int = 2, seed: int = 0):
    """Per speaker, a seeded shuffle of its utterances split n_train / n_test."""
    groups = group_by_speaker(rows)
    short = [s for s, u in groups.items() if len(u) < n_train + n_test]
    if short:
        raise InsufficientUtterancesError(
            f"speakers with fewer than {n_train + n_test} utterances: {', '.join(short)}"
        )
    train, test = [], []
    for i, (spk, utts) in enumerate(groups.items()):
        order = np.random.default_rng([seed, 3, i]).permutation(len(utts))
        train += [utts[j] for j in order[:n_train]]
        test += [utts[j] for j in order[n_train:n_train + n_test]]
    return train, test


def utterance_embeddings(model: SpeakerNet, rows: Sequence[Utterance]) -> np.ndarray:
    return np.concatenate([forward_embedding(model, featurize(read_wav(u.path))[None]) for u in rows])


def train_classifier_head(model: SpeakerNet, rows: Sequence[Utterance], n_train: int = 8, n_test: int = 2,
                          seed: int = 0, steps: int = 300, lr: float = 1e-2):
    """Fit a linear speaker head on frozen embeddings; returns (classifier, accuracy, speakers)."""
    train, test = split_utterances(rows, n_train, n_test, seed)
    speakers = sorted({u.speaker for u in rows})
    label = {s: i for i, s in enumerate(speakers)}
    clf = attach_classifier(model, len(speakers), freeze_backbone=True, seed=seed)
    x_tr = Tensor(utterance_embeddings(model, train))
    y_tr = np.array([label[u.speaker] for u in train])
    params = clf.trainable_parameters()
    state = OptimState.for_params(params, weight_decay=0.0)
    for _ in range(steps):
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = softmax_loss(x_tr, y_tr, clf.head.weight, clf.head.bias)
        T.backward(tape, loss)
        adam_step(params, [p.grad for p in params], state, lr)
    x_te = utterance_embeddings(model, test)
    pred = np.argmax(T.affine(x_te, clf.head.weight, clf.head.bias).data, axis=1)
    acc = float(np.mean(pred == np.array([label[u.speaker] for u in test])))
    return clf, acc, speakers


# ---------------------------------------------------------------------------
# frame-level similarity


def reference_from_embeddings(embs: np.ndarray, exclude: int) -> np.ndarray:
    """Mean of all utterance embeddings except row ``exclude``."""
    embs = np.asarray(embs, dtype=np.float64)
    if embs.shape[0] < 2:
        raise ValueError("need at least two utterances to form a reference embedding")
    keep = np.delete(np.arange(embs.shape[0]), exclude)
    return embs[keep].mean(axis=0)


def utterance_reference_embedding(model: SpeakerNet, speaker_feats: Sequence[np.ndarray], exclude: int) -> np.ndarray:
    """Reference embedding of a speaker from every utterance but ``exclude``."""
    if len(speaker_feats) < 2:
        raise ValueError("need at least two utterances to form a reference embedding")
    embs = np.concatenate([forward_embedding(model, f[None]) for f in speaker_feats])
    return reference_from_embeddings(embs, exclude)


def read_alignment(path) -> list[AlignmentRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [AlignmentRow(int(r["start_frame"]), int(r["end_frame"]), r["phoneme"], r["group"])
                for r in csv.DictReader(fh)]


def write_alignment(path, rows: Sequence[AlignmentRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("start_frame,end_frame,phoneme,group\n")
        for r in rows:
            fh.write(f"{r.start_frame},{r.end_frame},{r.phoneme},{r.group}\n")


def frame_center(model_frame: int, stride: int = 8) -> int:
    return model_frame * stride + (stride - 1) // 2


def input_to_model_frame(input_frame: int, stride: int = 8) -> int:
    return input_frame // stride


def frame_groups(alignment: Sequence[AlignmentRow], n_model_frames: int, stride: int = 8) -> list[str]:
    """Group of the alignment interval containing each model frame's center."""
    out = []
    for j in range(n_model_frames):
        c = frame_center(j, stride)
        g = "other"
        for r in alignment:
            if r.start_frame <= c < r.end_frame:
                g = r.group if r.group in PHONEME_GROUPS else "other"
                break
        out.append(g)
    return out


def _cos(frames: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return frames @ ref / (np.linalg.norm(frames, axis=1) * np.linalg.norm(ref))


@dataclass
class FrameAnalysis:
    same: dict[str, list[float]]
    cross: dict[str, list[float]]


def frame_similarity_analysis(model: SpeakerNet, rows: Sequence[Utterance],
                              alignments: dict[str, Sequence[AlignmentRow]], stride: int | None = None) -> FrameAnalysis:
    """Cosine similarity of frame embeddings to same- and other-speaker references.

    ``alignments`` maps ``str(utterance.path)`` to its phoneme intervals.
    The "cross" reference for a speaker is the all-utterance mean of the next
    speaker in sorted order.
    """
    stride = stride or model.time_stride
    groups = group_by_speaker(rows)
    speakers = list(groups)
    feats = {s: [featurize(read_wav(u.path)) for u in sorted(us, key=lambda u: str(u.path))] for s, us in groups.items()}
    utts = {s: sorted(us, key=lambda u: str(u.path)) for s, us in groups.items()}
    embs = {s: np.concatenate([forward_embedding(model, f[None]) for f in fs]) for s, fs in feats.items()}
    same = {g: [] for g in PHONEME_GROUPS + ("other",)}
    cross = {g: [] for g in PHONEME_GROUPS + ("other",)}
    for si, s in enumerate(speakers):
        other = embs[speakers[(si + 1) % len(speakers)]].mean(axis=0) if len(speakers) > 1 else None
        for i, (u, f) in enumerate(zip(utts[s], feats[s])):
            ref = reference_from_embeddings(embs[s], i)
            fr = forward_frame_embeddings(model, f)
            labels = frame_groups(alignments.get(str(u.path), []), fr.shape[0], stride)
            cs = _cos(fr, ref)
            cx = _cos(fr, other) if other is not None else None
            for j, g in enumerate(labels):
                same[g].append(float(cs[j]))
                if cx is not None:
                    cross[g].append(float(cx[j]))
    return FrameAnalysis(same, cross)


def summarize(scores: dict[str, list[float]]) -> list[tuple]:
    rows = []
    for g in PHONEME_GROUPS:
        v = np.asarray(scores.get(g, []))
        if v.size:
            q25, med, q75 = np.percentile(v, [25, 50, 75])
            rows.append((g, v.size, float(v.mean()), float(med), float(q25), float(q75)))
        else:
            rows.append((g, 0, float("nan"), float("nan"), float("nan"), float("nan")))
    return rows


def write_summary(path, scores: dict[str, list[float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("group,n_frames,mean,median,q25,q75\n")
        for g, n, mean, med, q25, q75 in summarize(scores):
            fh.write(f"{g},{n},{mean:.9f},{med:.9f},{q25:.9f},{q75:.9f}\n")
