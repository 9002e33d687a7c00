"""Early-exit multimodal embedding engine.

Offline: a pre-exit predictor reads superficial hidden states, items are
batched by predicted exit and embedded with layerwise streaming. Online:
speculative multi-granularity retrieval resumes candidates from an INT4
activation cache to full depth before the final ranking.
"""
from .encoder import EncoderConfig, EncoderStack, init_encoder
from .retrieval import query, recall_at
from .store import EmbeddingRecord, EmbeddingStore

__all__ = [
    "EncoderConfig",
    "EncoderStack",
    "EmbeddingRecord",
    "EmbeddingStore",
    "init_encoder",
    "query",
    "recall_at",
]
__version__ = "0.1.0"
