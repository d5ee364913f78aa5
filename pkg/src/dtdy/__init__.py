"""Decomposed temporal dynamic convolution (DTDY) for speaker verification.

A small float64 reverse-mode autodiff core drives ResNet speaker-embedding
networks whose convolutions can be static, temporal dynamic (TDY, K basis
kernels mixed per time bin) or decomposed temporal dynamic (DTDY, a static
kernel plus a low-rank per-time-bin residual).
"""

from dtdy.dynconv import DtdyConv2d, TdyConv2d
from dtdy.evaluation import compute_eer, compute_min_dcf, evaluate, score_trial
from dtdy.explain import compute_sam, frame_similarity_analysis
from dtdy.model import ModelConfig, SpeakerNet, build_model, count_params, forward_embedding
from dtdy.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DtdyConv2d",
    "ModelConfig",
    "SpeakerNet",
    "TdyConv2d",
    "TrainConfig",
    "build_model",
    "compute_eer",
    "compute_min_dcf",
    "compute_sam",
    "count_params",
    "evaluate",
    "forward_embedding",
    "frame_similarity_analysis",
    "score_trial",
    "train",
]
