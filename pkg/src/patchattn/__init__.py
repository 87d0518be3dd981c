"""Patch-based stochastic attention built on PatchMatch nearest-neighbour fields."""
from .annfield import ANNField, SearchParams, exact_nn, run
from .attention import (AttentionConfig, Mode, aggregation_attention, attend, full_attention,
                        hard_attention, soft_knn_attention)
from .core import PatchView, load_image, save_image
from .estimator import PatchAttention, PatchMatchNeighbors
from .similarity import Metric

__all__ = [
    "ANNField", "AttentionConfig", "Metric", "Mode", "PatchAttention", "PatchMatchNeighbors",
    "PatchView", "SearchParams", "aggregation_attention", "attend", "exact_nn", "full_attention",
    "hard_attention", "load_image", "run", "save_image", "soft_knn_attention",
]
__version__ = "0.1.0"
