"""Command-line front end: ``dtdy <command> [--config FILE] [--set key=value ...]``.

Every command writes its effective configuration to ``<out>/config.txt``.
Failures print one line ``dtdy: error[<kind>]: <message>`` to stderr and exit
with 2 (usage), 3 (config), 4 (io) or 5 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dtdy.audio import WavError, featurize, read_manifest, read_wav
from dtdy.checkpoint import CheckpointError, load_model
from dtdy.config import ConfigError, RunConfig, load_config
from dtdy.evaluation import TrialListError, evaluate, read_trials
from dtdy.explain import (InsufficientUtterancesError, compute_sam, frame_similarity_analysis, read_alignment,
                          split_utterances, train_classifier_head, write_sam, write_summary)
from dtdy.model import build_model, count_params, forward_embedding
from dtdy.synth import synth_dataset
from dtdy.training import NumericError, train

log = logging.getLogger("dtdy")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require(cfg: RunConfig, key: str) -> str:
    v = getattr(cfg, key)
    if not v:
        raise ConfigError(f"missing config key {key!r}")
    return v


def _load(cfg: RunConfig):
    model, _, _ = load_model(_require(cfg, "model"))
    return model


def alignment_file(align_dir, utterance_path) -> Path:
    p = Path(utterance_path)
    return Path(align_dir) / f"{p.parent.name}_{p.stem}.csv"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    paths = synth_dataset(cfg.synth_spec(), cfg.seed, out)
    print(f"manifest,{paths['manifest']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    rows = read_manifest(_require(cfg, "manifest"))
    model = build_model(cfg.model_config(), cfg.seed)
    tr = train(model, rows, cfg.train_config(), out, resume_from=args.resume)
    print(f"model,{out / 'model.bin'}")
    print(f"steps,{tr.step}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    trials_path = Path(_require(cfg, "trials"))
    try:
        trials = read_trials(trials_path)
    except TrialListError as e:
        raise ConfigError(str(e)) from e
    model = _load(cfg)
    base = cfg.trials_base or trials_path.parent
    rep = evaluate(model, trials, base, out)
    print(f"eer,{rep.eer:.9f}")
    print(f"min_dcf,{rep.min_dcf:.9f}")
    return EXIT_OK


def cmd_embed(cfg: RunConfig, out: Path, args) -> int:
    rows = read_manifest(_require(cfg, "manifest"))
    model = _load(cfg)
    with open(out / "embeddings.csv", "w", encoding="utf-8") as fh:
        fh.write("speaker_id,utterance_path," + ",".join(f"e{i}" for i in range(model.cfg.emb_dim)) + "\n")
        for u in rows:
            e = forward_embedding(model, featurize(read_wav(u.path))[None])[0]
            fh.write(f"{u.speaker},{u.path}," + ",".join(f"{v:.9f}" for v in e) + "\n")
    print(f"embeddings,{len(rows)}")
    return EXIT_OK


def cmd_sam(cfg: RunConfig, out: Path, args) -> int:
    rows = read_manifest(_require(cfg, "manifest"))
    model = _load(cfg)
    clf, acc, speakers = train_classifier_head(model, rows, cfg.head_train, cfg.head_test, cfg.seed,
                                               cfg.head_steps, cfg.head_lr)
    speaker = cfg.sam_speaker or speakers[0]
    if speaker not in speakers:
        raise ConfigError(f"sam_speaker {speaker!r} not in manifest")
    if cfg.sam_utterance:
        utt_path = Path(cfg.sam_utterance)
    else:
        _, test = split_utterances(rows, cfg.head_train, cfg.head_test, cfg.seed)
        utt_path = next(u.path for u in test if u.speaker == speaker)
    x = featurize(read_wav(utt_path))
    sam = compute_sam(clf, x, speakers.index(speaker), cfg.source_layer, speaker_name=speaker)
    write_sam(out / "sam.csv", sam)
    (out / "head.json").write_text(json.dumps({"accuracy": acc, "speakers": speakers,
                                               "utterance": str(utt_path)}, indent=2) + "\n", encoding="utf-8")
    print(f"head_accuracy,{acc:.6f}")
    return EXIT_OK


def cmd_params(cfg: RunConfig, out: Path, args) -> int:
    lines = []
    for kind in [v.strip() for v in cfg.param_variants.split(",") if v.strip()]:
        mc = cfg.model_config(conv_kind=kind, width_mult=cfg.param_width, emb_dim=cfg.param_emb_dim,
                              stage_blocks=tuple(int(b) for b in cfg.param_stage_blocks.split(",")))
        name = f"{kind}_x{cfg.param_width:.2f}_{mc.pooling.lower()}"
        lines.append(f"{name},{count_params(build_model(mc, cfg.seed))}")
    (out / "params.csv").write_text("model,params\n" + "\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def cmd_frames(cfg: RunConfig, out: Path, args) -> int:
    rows = read_manifest(_require(cfg, "manifest"))
    align_dir = Path(_require(cfg, "alignments"))
    model = _load(cfg)
    alignments = {}
    for u in rows:
        p = alignment_file(align_dir, u.path)
        if not p.exists():
            raise FileNotFoundError(f"no alignment for {u.path} (expected {p})")
        alignments[str(u.path)] = read_alignment(p)
    res = frame_similarity_analysis(model, rows, alignments)
    write_summary(out / "frames_same.csv", res.same)
    write_summary(out / "frames_cross.csv", res.cross)
    same = np.mean([v for g, vs in res.same.items() if g != "other" for v in vs])
    cross = np.mean([v for g, vs in res.cross.items() if g != "other" for v in vs])
    print(f"mean_same,{same:.6f}")
    print(f"mean_cross,{cross:.6f}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic speaker corpus"),
    "train": (cmd_train, "train a speaker embedding model"),
    "eval": (cmd_eval, "score a trial list, report EER and minDCF"),
    "embed": (cmd_embed, "write utterance embeddings for a manifest"),
    "sam": (cmd_sam, "fit a speaker head and write a speaker activation map"),
    "params": (cmd_params, "print parameter counts of model variants"),
    "frames": (cmd_frames, "frame-level similarity by phoneme group"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtdy", description="Decomposed temporal dynamic convolution for speaker verification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
    return p


def _overrides(args) -> dict[str, str]:
    raw = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        raw[k.strip()] = v.strip()
    for k in ("seed", "threads", "out"):
        if getattr(args, k) is not None:
            raw[k] = str(getattr(args, k))
    return raw


def _fail(kind: str, code: int, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"dtdy: error[{kind}]: {text}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, _overrides(args))
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command][0](cfg, out, args)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, e)
    except (ConfigError, TrialListError, InsufficientUtterancesError, KeyError) as e:
        return _fail("config", EXIT_CONFIG, e.args[0] if e.args else e)
    except (OSError, WavError, CheckpointError) as e:
        return _fail("io", EXIT_IO, e)
    except (NumericError, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except ValueError as e:
        return _fail("config", EXIT_CONFIG, e)


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="# %(asctime)s %(name)s %(message)s", stream=sys.stderr)
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
