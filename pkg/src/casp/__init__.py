"""Cascaded semi-dense feature matching with correspondence priors.

Top-k correspondence priors at 1/16 scale restrict 1/8-scale attention and
matching to small candidate regions; matches are refined to sub-pixel
accuracy with per-patch homographies.
"""

from .cascade import MatchSet, cascade_match, match_one_to_one, partial_softmax, select_priors
from .config import ConfigError, PipelineConfig, load_config
from .pipeline import Matcher, MatchResult
from .weights import WeightFileError, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "MatchSet", "cascade_match", "match_one_to_one", "partial_softmax", "select_priors",
    "ConfigError", "PipelineConfig", "load_config", "Matcher", "MatchResult",
    "WeightFileError", "init_weights", "load_weights", "save_weights",
]
