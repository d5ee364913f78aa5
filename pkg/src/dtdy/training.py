"""Losses, optimiser, learning-rate schedule, batch plan and training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from dtdy import tensor as T
from dtdy.audio import Utterance, Waveform, featurize, read_wav, sample_train_segment
from dtdy.checkpoint import load_model, save_model
from dtdy.model import SpeakerNet
from dtdy.nn import Linear
from dtdy.tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def angular_prototypical_loss(emb: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Angular prototypical loss over an (N, 2, D) batch.

    Row ``i`` of the (N, N) logit matrix compares query ``emb[i, 0]`` with
    every prototype ``emb[j, 1]``: ``w * cos + b``; the target is ``j = i``.
    """
    emb = T.as_tensor(emb)
    if emb.ndim != 3 or emb.shape[1] != 2:
        raise ValueError(f"expected (N, 2, D) embeddings, got {emb.shape}")
    n = emb.shape[0]
    if n < 2:
        raise ValueError("angular prototypical loss needs at least 2 speakers")
    if np.any(np.linalg.norm(emb.data, axis=2) == 0):
        raise ValueError("zero-norm embedding in angular prototypical loss")
    q = T.index(emb, (slice(None), 0))
    p = T.index(emb, (slice(None), 1))
    qn = T.div(q, T.l2_norm(q, axis=1, keepdims=True))
    pn = T.div(p, T.l2_norm(p, axis=1, keepdims=True))
    cos = T.matmul(qn, T.transpose(pn, (1, 0)))
    logits = T.add(T.mul(cos, T.clamp_min(w, 1e-6)), b)
    return T.cross_entropy(logits, np.arange(n))


def softmax_loss(emb: Tensor, labels, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-entropy of a linear speaker classifier on the embeddings."""
    return T.cross_entropy(T.affine(emb, weight, bias), labels)


def combined_loss(ap: Tensor, sm: Tensor) -> Tensor:
    return T.add(ap, sm)


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(epoch: int, lr0: float = 1e-3, decay: float = 0.75, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** (epoch // every)


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float) -> None:
    """Adam with bias correction; weight decay is added to the gradient (L2)."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimiser state lengths differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# batches


@dataclass
class BatchPlan:
    n_speakers_per_batch: int = 16
    utterances_per_speaker: int = 2

    @property
    def batch_size(self) -> int:
        return self.n_speakers_per_batch * self.utterances_per_speaker


def group_by_speaker(rows: Sequence[Utterance]) -> dict[str, list[Utterance]]:
    groups: dict[str, list[Utterance]] = {}
    for r in rows:
        groups.setdefault(r.speaker, []).append(r)
    return dict(sorted(groups.items()))


def make_batches(rows: Sequence[Utterance], plan: BatchPlan, rng: np.random.Generator) -> Iterator[list[Utterance]]:
    """One epoch of batches: N shuffled speakers x 2 distinct utterances each.

    Rows come out speaker-major: ``[s0 u_a, s0 u_b, s1 u_a, ...]``. A trailing
    group of at least two speakers forms a smaller final batch.
    """
    groups = group_by_speaker(rows)
    eligible = []
    for spk, utts in groups.items():
        if len(utts) < 2:
            log.warning("speaker %s has %d utterance(s); skipped", spk, len(utts))
        else:
            eligible.append(spk)
    n = plan.n_speakers_per_batch
    if len(eligible) < n:
        raise ValueError(f"only {len(eligible)} speakers with >= 2 utterances, batch needs {n}")
    order = [eligible[i] for i in rng.permutation(len(eligible))]
    for start in range(0, len(order), n):
        chunk = order[start:start + n]
        if len(chunk) < 2:
            break
        batch = []
        for spk in chunk:
            utts = groups[spk]
            pick = rng.choice(len(utts), size=2, replace=False)
            batch.extend(utts[i] for i in pick)
        yield batch


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 30
    n_speakers_per_batch: int = 16
    seed: int = 0
    lr0: float = 1e-3
    lr_decay: float = 0.75
    lr_every: int = 10
    weight_decay: float = 5e-5
    segment_seconds: float = 2.0
    ap_init_w: float = 10.0
    ap_init_b: float = -5.0
    threads: int = 1
    keep_checkpoints: int = 2


LOG_HEADER = "step,epoch,lr,loss_ap,loss_sm,loss_total"


class WavCache:
    def __init__(self):
        self._cache: dict[Path, Waveform] = {}

    def __call__(self, path) -> Waveform:
        path = Path(path)
        w = self._cache.get(path)
        if w is None:
            w = self._cache[path] = read_wav(path)
        return w


@dataclass
class Trainer:
    model: SpeakerNet
    rows: list[Utterance]
    cfg: TrainConfig
    speakers: list[str] = field(init=False)

    def __post_init__(self):
        self.speakers = sorted({r.speaker for r in self.rows})
        self.label = {s: i for i, s in enumerate(self.speakers)}
        rng = np.random.default_rng([self.cfg.seed, 1])
        self.head = Linear(self.model.cfg.emb_dim, len(self.speakers), rng=rng)
        self.ap_w = Tensor(np.array(self.cfg.ap_init_w), requires_grad=True)
        self.ap_b = Tensor(np.array(self.cfg.ap_init_b), requires_grad=True)
        self.params = self.model.parameters() + self.head.parameters() + [self.ap_w, self.ap_b]
        self.opt = OptimState.for_params(self.params, weight_decay=self.cfg.weight_decay)
        self.epoch = 0
        self.step = 0
        self.wavs = WavCache()
        self._pool = ThreadPoolExecutor(self.cfg.threads) if self.cfg.threads > 1 else None

    # state ---------------------------------------------------------------
    def save(self, path) -> None:
        extra = {
            "train/head.weight": self.head.weight.data,
            "train/head.bias": self.head.bias.data,
            "train/ap_w": self.ap_w.data,
            "train/ap_b": self.ap_b.data,
        }
        for i, (m, v) in enumerate(zip(self.opt.m, self.opt.v)):
            extra[f"optim/m/{i:04d}"] = m
            extra[f"optim/v/{i:04d}"] = v
        meta = {"epoch": str(self.epoch), "step": str(self.step), "optim_step": str(self.opt.step),
                "speakers": "|".join(self.speakers)}
        save_model(path, self.model, extra, meta)

    @classmethod
    def resume(cls, path, rows: list[Utterance], cfg: TrainConfig) -> "Trainer":
        model, extras, meta = load_model(path)
        tr = cls(model, rows, cfg)
        if meta.get("speakers") != "|".join(tr.speakers):
            raise ValueError("checkpoint was trained on a different speaker set")
        tr.head.weight.data[...] = extras["train/head.weight"]
        tr.head.bias.data[...] = extras["train/head.bias"]
        tr.ap_w.data[...] = extras["train/ap_w"]
        tr.ap_b.data[...] = extras["train/ap_b"]
        for i in range(len(tr.params)):
            tr.opt.m[i][...] = extras[f"optim/m/{i:04d}"]
            tr.opt.v[i][...] = extras[f"optim/v/{i:04d}"]
        tr.opt.step = int(meta["optim_step"])
        tr.epoch = int(meta["epoch"])
        tr.step = int(meta["step"])
        return tr

    # steps ---------------------------------------------------------------
    def features(self, batch: list[Utterance], rng: np.random.Generator) -> np.ndarray:
        segs = [sample_train_segment(self.wavs(u.path), rng, self.cfg.segment_seconds) for u in batch]
        if self._pool is not None:
            feats = list(self._pool.map(featurize, segs))
        else:
            feats = [featurize(s) for s in segs]
        return np.stack(feats)

    def train_step(self, x: np.ndarray, labels: np.ndarray, lr: float) -> tuple[float, float, float]:
        self.model.train()
        for p in self.params:
            p.zero_grad()
        with Tape() as tape:
            emb = self.model(x)
            n = x.shape[0] // 2
            ap = angular_prototypical_loss(T.reshape(emb, (n, 2, emb.shape[1])), self.ap_w, self.ap_b)
            sm = softmax_loss(emb, labels, self.head.weight, self.head.bias)
            total = combined_loss(ap, sm)
        vals = (ap.item(), sm.item(), total.item())
        if not all(math.isfinite(v) for v in vals):
            raise NumericError(f"non-finite loss at step {self.step + 1} (epoch {self.epoch})")
        T.backward(tape, total)
        adam_step(self.params, [p.grad for p in self.params], self.opt, lr)
        self.step += 1
        return vals

    def run_epoch(self, log_fh=None) -> list[tuple]:
        rng = np.random.default_rng([self.cfg.seed, 2, self.epoch])
        lr = lr_schedule(self.epoch, self.cfg.lr0, self.cfg.lr_decay, self.cfg.lr_every)
        plan = BatchPlan(self.cfg.n_speakers_per_batch)
        rows = []
        for batch in make_batches(self.rows, plan, rng):
            x = self.features(batch, rng)
            labels = np.array([self.label[u.speaker] for u in batch])
            ap, sm, tot = self.train_step(x, labels, lr)
            row = (self.step, self.epoch, lr, ap, sm, tot)
            rows.append(row)
            if log_fh is not None:
                log_fh.write(format_log_row(row) + "\n")
                log_fh.flush()
        self.epoch += 1
        return rows

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def format_log_row(row) -> str:
    step, epoch, lr, ap, sm, tot = row
    return f"{step},{epoch},{lr:.9g},{ap:.12g},{sm:.12g},{tot:.12g}"


def train(model: SpeakerNet, rows: list[Utterance], cfg: TrainConfig, out_dir, resume_from=None) -> Trainer:
    """Run the configured number of epochs, writing ``train_log.csv`` and checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = Trainer.resume(resume_from, rows, cfg) if resume_from else Trainer(model, rows, cfg)
    log_path = out_dir / "train_log.csv"
    mode = "a" if resume_from and log_path.exists() else "w"
    written: list[Path] = []
    try:
        with open(log_path, mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write(LOG_HEADER + "\n")
            while tr.epoch < cfg.epochs:
                rows_ = tr.run_epoch(fh)
                last = rows_[-1] if rows_ else None
                if last:
                    log.info("epoch %d done, loss %.4f", tr.epoch, last[-1])
                ckpt = out_dir / f"checkpoint_epoch{tr.epoch:03d}.bin"
                tr.save(ckpt)
                written.append(ckpt)
                while cfg.keep_checkpoints > 0 and len(written) > cfg.keep_checkpoints:
                    written.pop(0).unlink(missing_ok=True)
        tr.save(out_dir / "model.bin")
    finally:
        tr.close()
    return tr
