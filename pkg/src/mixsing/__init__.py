"""Parallel all-MLP singing-voice acoustic model, trained and analysed with numpy."""

from .model import ModelConfig, ModelParams, forward, init_params, param_count
from .score import Score, align_to_frames, decompose_hangul, parse_score_json, parse_smf

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Score",
    "align_to_frames",
    "decompose_hangul",
    "forward",
    "init_params",
    "param_count",
    "parse_score_json",
    "parse_smf",
]

__version__ = "0.1.0"
