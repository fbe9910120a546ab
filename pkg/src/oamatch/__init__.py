"""Overlap-aware detector-free feature matching on a numpy autodiff core."""

from .config import PipelineConfig, load_config
from .pipeline import MatchResult, forward, init_weights, load_matcher_weights, train_toy

__all__ = ["PipelineConfig", "MatchResult", "forward", "init_weights", "load_config", "load_matcher_weights", "train_toy"]
__version__ = "0.1.0"
