"""Foresight pruning with NTK spectrum-aware saliency, at desk scale."""

from .nn import Architecture, MaskedNetwork, build, forward_masked, reinitialize
from .prune import PruneConfig, PruneResult, prune
from .train import TrainConfig, sgd_train

__all__ = [
    "Architecture", "MaskedNetwork", "build", "forward_masked", "reinitialize",
    "PruneConfig", "PruneResult", "prune", "TrainConfig", "sgd_train",
]
__version__ = "0.1.0"
