"""Width-scaled ResNet backbones with pluggable convolution kind."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from dtdy import tensor as T
from dtdy.dynconv import DtdyConv2d, TdyConv2d
from dtdy.nn import BatchNorm2d, Conv2d, Linear, Module
from dtdy.tensor import Tensor

CONV_KINDS = ("vanilla", "tdy", "dtdy")
POOLINGS = ("TAP", "ASP")
BASE_CHANNELS = (64, 128, 256, 512)


@dataclass
class ModelConfig:
    width_mult: float = 0.5
    conv_kind: str = "dtdy"
    r: float = 1 / 8
    K: int = 6
    r_a: float = 1 / 8
    pooling: str = "TAP"
    emb_dim: int = 512
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: tuple[int, ...] | None = None
    n_mels: int = 64
    asp_hidden: int = 0  # 0 -> D // 8

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        if self.stage_channels is not None:
            self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.emb_dim < 8:
            raise ValueError("emb_dim must be >= 8")
        if any(c < 1 for c in self.channels()):
            raise ValueError(f"non-positive channel count in {self.channels()}")
        if len(self.channels()) != len(self.stage_blocks):
            raise ValueError("stage_channels and stage_blocks lengths differ")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError("every stage needs at least one block")

    def channels(self) -> tuple[int, ...]:
        if self.stage_channels is not None:
            return self.stage_channels
        return tuple(int(round(self.width_mult * c)) for c in BASE_CHANNELS)

    # key = value text, used inside checkpoints
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            raw[k.strip()] = v.strip()
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in raw.items():
            if k not in types:
                raise KeyError(f"unknown model config key {k!r}")
            kwargs[k] = _parse_field(k, v)
        return cls(**kwargs)


def _parse_field(name: str, v: str):
    if name in ("stage_blocks", "stage_channels"):
        if v == "":
            return None
        return tuple(int(i) for i in v.split(","))
    if name in ("conv_kind",):
        return v.lower()
    if name in ("pooling",):
        return v.upper()
    if name in ("K", "emb_dim", "n_mels", "asp_hidden"):
        return int(v)
    return _parse_float(v)


def _parse_float(v: str) -> float:
    if "/" in v:
        num, den = v.split("/")
        return float(num) / float(den)
    return float(v)


def make_conv(kind: str, c_in: int, c_out: int, f_in: int, stride: int, cfg: ModelConfig, rng) -> Module:
    if kind == "vanilla":
        return Conv2d(c_in, c_out, 3, stride, 1, rng=rng)
    if kind == "dtdy":
        return DtdyConv2d(c_in, c_out, f_in, 3, stride, 1, r=cfg.r, rng=rng)
    return TdyConv2d(c_in, c_out, f_in, 3, stride, 1, K=cfg.K, r_a=cfg.r_a, rng=rng)


class BasicBlock(Module):
    """Two 3x3 convolutions with a residual connection (post-activation)."""

    def __init__(self, c_in, c_out, stride, f_in, cfg: ModelConfig, rng):
        super().__init__()
        f_mid = T.conv_output_size(f_in, 3, stride, 1)
        self.conv1 = self.add_child("conv1", make_conv(cfg.conv_kind, c_in, c_out, f_in, stride, cfg, rng))
        self.bn1 = self.add_child("bn1", BatchNorm2d(c_out))
        self.conv2 = self.add_child("conv2", make_conv(cfg.conv_kind, c_out, c_out, f_mid, 1, cfg, rng))
        self.bn2 = self.add_child("bn2", BatchNorm2d(c_out))
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = self.add_child("shortcut", Conv2d(c_in, c_out, 1, stride, 0, rng=rng))
            self.bn_sc = self.add_child("bn_sc", BatchNorm2d(c_out))
        self.f_out = f_mid

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        sc = x if self.shortcut is None else self.bn_sc(self.shortcut(x))
        return T.relu(T.add(h, sc))


def tap_pool(frames: Tensor) -> Tensor:
    """Temporal average pooling: (B, C, F', T') -> (B, C*F')."""
    B, C, F, _ = frames.shape
    return T.reshape(T.reduce_mean(frames, axes=(3,)), (B, C * F))


class AttentiveStatsPool(Module):
    """Attention-weighted mean and standard deviation over time."""

    def __init__(self, dim: int, hidden: int, rng):
        super().__init__()
        self.proj = self.add_child("proj", Linear(dim, hidden, rng=rng))
        self.v = self.add_param("v", np.asarray(rng.uniform(-1, 1, size=(1, hidden)) / np.sqrt(hidden)))

    def forward(self, h: Tensor) -> Tensor:
        return asp_pool(h, self.proj.weight, self.proj.bias, self.v)


def asp_pool(h: Tensor, W: Tensor, b: Tensor, v: Tensor, floor: float = 1e-9) -> Tensor:
    """(B, T', D) -> (B, 2D): concat(mean, std) under softmax attention over time."""
    e = T.affine(T.tanh(T.affine(h, W, b)), v)  # B, T', 1
    alpha = T.softmax(e, axis=1)
    mu = T.sum_(T.mul(alpha, h), axes=(1,))
    second = T.sum_(T.mul(alpha, T.square(h)), axes=(1,))
    sigma = T.sqrt(T.clamp_min(T.sub(second, T.square(mu)), floor))
    return T.concat([mu, sigma], axis=1)


def _frames_by_time(feat: Tensor) -> Tensor:
    B, C, F, Tn = feat.shape
    return T.reshape(T.transpose(feat, (0, 3, 1, 2)), (B, Tn, C * F))


class SpeakerNet(Module):
    """Stem, residual stages, temporal pooling and the embedding layer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels()
        self.stem = self.add_child("stem", Conv2d(1, ch[0], 3, 1, 1, rng=rng))
        self.stem_bn = self.add_child("stem_bn", BatchNorm2d(ch[0]))
        self.blocks: list[BasicBlock] = []
        self.freq_sizes = [cfg.n_mels]
        f, c_prev = cfg.n_mels, ch[0]
        for s, (n_blocks, c) in enumerate(zip(cfg.stage_blocks, ch)):
            for j in range(n_blocks):
                stride = 2 if (s > 0 and j == 0) else 1
                blk = BasicBlock(c_prev, c, stride, f, cfg, rng)
                self.add_child(f"layer{s + 1}.{j}", blk)
                self.blocks.append(blk)
                f, c_prev = blk.f_out, c
            self.freq_sizes.append(f)
        self.feat_dim = c_prev * f
        self.time_stride = 2 ** (len(cfg.stage_blocks) - 1)
        if cfg.pooling == "ASP":
            hidden = cfg.asp_hidden or max(1, self.feat_dim // 8)
            self.pool = self.add_child("pool", AttentiveStatsPool(self.feat_dim, hidden, rng))
            pooled = 2 * self.feat_dim
        else:
            self.pool = None
            pooled = self.feat_dim
        self.embed = self.add_child("embed", Linear(pooled, cfg.emb_dim, rng=rng))

    # stages --------------------------------------------------------------
    def _as_input(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected log-Mel input (B, F, T), got {x.shape}")
        if x.shape[2] != self.cfg.n_mels:
            raise ValueError(f"model expects F={self.cfg.n_mels} Mel bins, got F={x.shape[2]}")
        return x

    def stem_forward(self, x) -> Tensor:
        """First-layer activation map, (B, C0, F, T)."""
        return T.relu(self.stem_bn(self.stem(self._as_input(x))))

    def trunk(self, a: Tensor, taps: dict | None = None) -> Tensor:
        for name, blk in zip(self._block_names(), self.blocks):
            a = blk(a)
            if taps is not None:
                taps[name] = a
        return a

    def _block_names(self):
        return [n for n in self.children if n.startswith("layer")]

    def pool_embed(self, feat: Tensor) -> Tensor:
        if self.pool is None:
            pooled = tap_pool(feat)
        else:
            pooled = self.pool(_frames_by_time(feat))
        return self.embed(pooled)

    # public --------------------------------------------------------------
    def forward(self, x, taps: dict | None = None) -> Tensor:
        a = self.stem_forward(x)
        if taps is not None:
            taps["stem"] = a
        return self.pool_embed(self.trunk(a, taps))

    def frame_embeddings(self, x) -> Tensor:
        """Per-time-bin embeddings with temporal pooling removed: (B, T', emb_dim)."""
        feat = self.trunk(self.stem_forward(x))
        h = _frames_by_time(feat)
        if self.pool is not None:
            h = T.concat([h, Tensor(np.zeros(h.shape))], axis=2)
        return self.embed(h)


Model = SpeakerNet


def build_model(cfg: ModelConfig, seed: int = 0) -> SpeakerNet:
    return SpeakerNet(cfg, seed)


def forward_embedding(model: SpeakerNet, x) -> np.ndarray:
    """Eval-mode embeddings for a batch of log-Mel inputs, (B, emb_dim)."""
    model.eval()
    with T.no_grad():
        return model(x).data


def forward_frame_embeddings(model: SpeakerNet, x) -> np.ndarray:
    """Eval-mode frame embeddings; a single (F, T) input gives (T', emb_dim)."""
    model.eval()
    single = np.ndim(T.as_tensor(x).data) == 2
    with T.no_grad():
        out = model.frame_embeddings(x).data
    return out[0] if single else out


def count_params(model: Module) -> int:
    return model.count_params()


class SpeakerClassifier(Module):
    """Backbone followed by a linear speaker-logit head."""

    def __init__(self, backbone: SpeakerNet, n_speakers: int, freeze_backbone: bool = True, rng=None, zero_head: bool = False):
        super().__init__()
        if n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")
        self.backbone = self.add_child("backbone", backbone)
        self.head = self.add_child(
            "head", Linear(backbone.cfg.emb_dim, n_speakers, rng=rng or np.random.default_rng(0), zero=zero_head)
        )
        self.n_speakers = n_speakers
        self.freeze_backbone = freeze_backbone

    def trainable_parameters(self) -> list[Tensor]:
        if self.freeze_backbone:
            return self.head.parameters()
        return self.parameters()

    def forward(self, x, taps: dict | None = None) -> Tensor:
        return self.head(self.backbone(x, taps))

    def logits_from_stem(self, a: Tensor) -> Tensor:
        return self.head(self.backbone.pool_embed(self.backbone.trunk(a)))


def attach_classifier(model: SpeakerNet, n_speakers: int, freeze_backbone: bool = True, seed: int = 0, zero_head: bool = False) -> SpeakerClassifier:
    return SpeakerClassifier(model, n_speakers, freeze_backbone, np.random.default_rng(seed), zero_head)
