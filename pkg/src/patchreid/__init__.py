"""Occlusion-robust person re-identification at desk scale.

A numpy-backed library implementing the full pipeline: a small ViT-style
encoder with tape-based reverse-mode differentiation, dynamic patch-token
selection, cross-attention feature blending, realistic occlusion
augmentation, memory-bank contrastive training, and CMC/mAP retrieval
evaluation on a synthetic identity benchmark.
"""

from .tensor import Tensor, Tape, NonFiniteError
from .config import RunConfig, toy_config, paper_scale_run_config, load_config

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "RunConfig",
    "toy_config",
    "paper_scale_run_config",
    "load_config",
]

__version__ = "0.1.0"
