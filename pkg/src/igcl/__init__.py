"""Contrastive learning with information graphs for multi-sensor classification."""

__version__ = "0.1.0"

from .estimators import CrossEntropyClassifier, InfoGraphClassifier
from .features import SpectrogramFeaturizer

__all__ = ["CrossEntropyClassifier", "InfoGraphClassifier", "SpectrogramFeaturizer", "__version__"]
