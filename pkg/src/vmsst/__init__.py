"""Desk-scale lab for variational multilingual source-separation sentence
embeddings: a small autodiff tensor core, a latent-variable transformer
encoder-decoder, four training objectives, a synthetic parallel corpus, and
an exact-kNN evaluation suite."""

__version__ = "0.1.0"

from .model import GaussianPosterior, Model, ModelConfig, PairBatch  # noqa: F401
from .objectives import OBJECTIVES, LossBreakdown  # noqa: F401
