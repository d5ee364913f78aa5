"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from dtdy.model import ModelConfig, _parse_float
from dtdy.synth import SynthSpec
from dtdy.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob a command can read, with its default.

    Model, training and synthesis keys map one-to-one onto
    :class:`ModelConfig`, :class:`TrainConfig` and :class:`SynthSpec`.
    Relative paths resolve against the working directory.
    """

    # general
    seed: int = 0
    threads: int = 1
    out: str = "out"
    # model
    conv_kind: str = "dtdy"
    width_mult: float = 0.25
    stage_blocks: str = "2,2,2,2"
    r: float = 1 / 8
    K: int = 6
    r_a: float = 1 / 8
    pooling: str = "TAP"
    emb_dim: int = 128
    # training
    epochs: int = 30
    n_speakers_per_batch: int = 10
    segment_seconds: float = 2.0
    lr0: float = 1e-3
    lr_decay: float = 0.75
    lr_every: int = 10
    weight_decay: float = 5e-5
    keep_checkpoints: int = 2
    # data
    manifest: str = ""
    trials: str = ""
    trials_base: str = ""  # directory trial paths are relative to; empty -> the trial file's folder
    alignments: str = ""  # directory of <speaker>_<utterance>.csv files
    model: str = ""  # checkpoint for eval / embed / sam / frames
    # synthesis
    n_speakers: int = 20
    utterances_per_speaker: int = 10
    utterance_seconds: float = 3.0
    test_utterances_per_speaker: int = 2
    # explainability
    sam_utterance: str = ""  # empty -> first held-out utterance of sam_speaker
    sam_speaker: str = ""  # empty -> first speaker
    source_layer: str = "stem"
    head_train: int = 8
    head_test: int = 2
    head_steps: int = 300
    head_lr: float = 1e-2
    # params command
    param_variants: str = "vanilla,tdy,dtdy"
    param_width: float = 0.5
    param_stage_blocks: str = "3,4,6,3"
    param_emb_dim: int = 512

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def with_updates(self, raw: dict[str, str]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        kwargs = {}
        for k, v in raw.items():
            if k not in fields:
                raise ConfigError(f"unknown config key {k!r}")
            kwargs[k] = _coerce(k, fields[k].type, v)
        cfg = dataclasses.replace(self, **kwargs)
        cfg.model_config()  # validate
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    # views ------------------------------------------------------------
    def model_config(self, **over) -> ModelConfig:
        kw = dict(width_mult=self.width_mult, conv_kind=self.conv_kind, r=self.r, K=self.K, r_a=self.r_a,
                  pooling=self.pooling, emb_dim=self.emb_dim, stage_blocks=_int_tuple(self.stage_blocks))
        kw.update(over)
        try:
            return ModelConfig(**kw)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, n_speakers_per_batch=self.n_speakers_per_batch, seed=self.seed,
            lr0=self.lr0, lr_decay=self.lr_decay, lr_every=self.lr_every, weight_decay=self.weight_decay,
            segment_seconds=self.segment_seconds, threads=self.threads, keep_checkpoints=self.keep_checkpoints,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.n_speakers, self.utterances_per_speaker, self.utterance_seconds,
                         self.test_utterances_per_speaker)


def _int_tuple(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(i) for i in v.split(","))
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {v!r}") from e


def _coerce(key: str, typ, v: str):
    v = v.strip()
    try:
        if typ in (int, "int"):
            return int(v)
        if typ in (float, "float"):
            return _parse_float(v)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {v!r}") from e
    return v


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, _, v = line.partition("=")
        raw[k.strip()] = v.strip()
    return raw


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        raw.update(parse_config_text(text, str(path)))
    raw.update(overrides or {})
    return RunConfig().with_updates(raw)
