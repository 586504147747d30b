"""Compressed-context document QA at desk scale.

A small numpy decoder compresses document chunks into summary rows, per-group
LoRA adaptors are finetuned on those rows, and a retrieval-backed server
answers questions in five context modes.
"""

from .encoder import CompressionConfig, compress_document, compression_ratio, effective_window
from .errors import LlocoError
from .kernels import backend
from .lora import AdaptorRegistry, LoraAdaptor, init_adaptor, merge, unmerge
from .model import Decoder, EmbeddingSequence, ModelConfig, detokenize, tokenize
from .store import VectorStore
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AdaptorRegistry", "CompressionConfig", "Decoder", "EmbeddingSequence", "LlocoError", "LoraAdaptor",
    "ModelConfig", "TrainConfig", "VectorStore", "backend", "compress_document", "compression_ratio",
    "detokenize", "effective_window", "init_adaptor", "merge", "tokenize", "unmerge",
]
