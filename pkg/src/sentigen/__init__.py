"""Unified generative sentiment analysis at desk scale.

One encoder-decoder model reads a unified prompt (task/dataset/speaker tokens,
an admissible-answer span, text plus optional acoustic/visual frames) and
generates label words for aspect, dialogue, conversation-emotion and scalar
sentiment tasks. Everything - autodiff, the transformer, four pre-training
objectives, fine-tuning, metrics and the cross-dataset bias analysis - runs on
numpy alone.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataError, DecodeError, MetricError,
                     NumericError, SentigenError, ShapeError, VocabularyError)

__all__ = [
    "__version__",
    "SentigenError", "ShapeError", "ContractError", "NumericError", "DataError",
    "ConfigError", "VocabularyError", "DecodeError", "MetricError",
]
