"""Recursive summary-token compression of documents."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFileError, LengthOverflowError
from .fileformat import read_packed, write_packed
from .model import Decoder, EmbeddingSequence, hidden_at


@dataclass(frozen=True)
class CompressionConfig:
    chunk_length: int = 1536
    summary_count: int = 50
    max_summary_rows: int | None = None  # None -> floor(W / 2) of the model in use

    def __post_init__(self):
        if self.chunk_length <= 0 or self.summary_count <= 0:
            raise ValueError("chunk_length and summary_count must be positive")
        if self.summary_count >= self.chunk_length:
            raise ValueError("summary_count must be smaller than chunk_length")

    @classmethod
    def toy(cls, max_summary_rows: int | None = None) -> "CompressionConfig":
        # keeps the 1536:50 ≈ 30:1 ratio at desk scale
        return cls(chunk_length=120, summary_count=4, max_summary_rows=max_summary_rows)

    def summary_cap(self, window: int) -> int:
        return self.max_summary_rows if self.max_summary_rows is not None else window // 2

    @property
    def ratio(self) -> Fraction:
        return compression_ratio(self.chunk_length, self.summary_count)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionConfig":
        return cls(**d)


@dataclass
class SummaryEmbeddings:
    chunk_index: int
    rows: np.ndarray
    source_doc: str
    source_token_range: tuple[int, int]

    def __len__(self) -> int:
        return len(self.rows)


def chunk_document(tokens: Sequence[int], L: int) -> list[list[int]]:
    if L <= 0:
        raise ValueError("chunk length must be positive")
    tokens = list(tokens)
    return [tokens[i : i + L] for i in range(0, len(tokens), L)]


def chunk_spans(n: int, L: int) -> list[tuple[int, int]]:
    if L <= 0:
        raise ValueError("chunk length must be positive")
    return [(s, min(s + L, n)) for s in range(0, n, L)]


def compression_ratio(L: int, k: int) -> Fraction:
    """Original tokens per context row, as an exact rational."""
    if k <= 0:
        raise ValueError("k must be positive")
    return Fraction(L, k)


def format_ratio(r) -> str:
    """Table-style label: whole multiples above 20x ("30x"), one decimal below ("1.6x")."""
    r = float(r)
    if r >= 20:
        return f"{math.floor(r)}x"
    return f"{round(r, 1):g}x"


def effective_window(W: int, L: int, k: int) -> int:
    """Largest original-token span whose summaries fit in a window of ``W`` rows."""
    if not 0 < k <= W:
        raise ValueError("need 0 < k <= W")
    return (W // k) * L


def summary_rows_for(n_tokens: int, cfg: CompressionConfig) -> int:
    return math.ceil(n_tokens / cfg.chunk_length) * cfg.summary_count


def _prior_rows(prior, d_model: int, dtype) -> np.ndarray:
    if prior is None:
        return np.zeros((0, d_model), dtype=dtype)
    if isinstance(prior, EmbeddingSequence):
        return prior.rows
    if isinstance(prior, (list, tuple)):
        rows = [p.rows if hasattr(p, "rows") else p for p in prior]
        return np.concatenate(rows) if rows else np.zeros((0, d_model), dtype=dtype)
    return np.asarray(prior)


def prior_budget(cfg: CompressionConfig, window: int, chunk_len: int) -> int:
    return max(0, min(cfg.summary_cap(window), window - chunk_len - cfg.summary_count))


def compress_chunk(model: Decoder, chunk: Sequence[int], prior, cfg: CompressionConfig,
                   chunk_index: int = 0, doc_id: str = "", token_range: tuple[int, int] | None = None
                   ) -> SummaryEmbeddings:
    """Compress one chunk, conditioned on (the most recent part of) ``prior`` summary rows."""
    W = model.config.window
    k = cfg.summary_count
    if k > model.config.n_slots:
        raise ValueError(f"model has {model.config.n_slots} summary slots, config asks for {k}")
    if len(chunk) + k > W:
        raise LengthOverflowError(f"chunk of {len(chunk)} tokens + {k} slots exceeds window {W}")
    rows = _prior_rows(prior, model.config.d_model, model.dtype)
    keep = prior_budget(cfg, W, len(chunk))
    rows = rows[len(rows) - keep :] if keep else rows[:0]
    x = np.concatenate([rows.astype(model.dtype, copy=False), model.embed(chunk).rows, model.params["slot_emb"][:k]])
    out = model.forward_embeddings(x)
    n = len(x)
    summ = hidden_at(range(n - k, n), out)
    return SummaryEmbeddings(chunk_index, summ.rows, doc_id, token_range or (0, len(chunk)))


def compress_document(model: Decoder, tokens: Sequence[int], cfg: CompressionConfig,
                      doc_id: str = "") -> list[SummaryEmbeddings]:
    tokens = list(tokens)
    out: list[SummaryEmbeddings] = []
    acc: list[np.ndarray] = []
    cap = cfg.summary_cap(model.config.window)
    for i, (s, e) in enumerate(chunk_spans(len(tokens), cfg.chunk_length)):
        prior = np.concatenate(acc[-(cap // cfg.summary_count + 1):]) if acc else None
        se = compress_chunk(model, tokens[s:e], prior, cfg, chunk_index=i, doc_id=doc_id, token_range=(s, e))
        out.append(se)
        acc.append(se.rows)
    return out


def stack_rows(summaries: Sequence[SummaryEmbeddings], d_model: int | None = None) -> EmbeddingSequence:
    if not summaries:
        if d_model is None:
            raise ValueError("d_model needed for an empty summary list")
        return EmbeddingSequence.empty(d_model)
    return EmbeddingSequence(np.concatenate([s.rows for s in summaries]))


# ---------------------------------------------------------------------------
# archive files
# ---------------------------------------------------------------------------


def save_summaries(path, doc_id: str, cfg: CompressionConfig, summaries: Sequence[SummaryEmbeddings]) -> Path:
    meta = {
        "doc_id": doc_id,
        "compression": cfg.to_dict(),
        "chunk_count": len(summaries),
        "token_ranges": [list(s.source_token_range) for s in summaries],
    }
    write_packed(path, "summaries", meta, [(f"chunk{s.chunk_index}", s.rows) for s in summaries])
    return Path(path)


def load_summaries(path) -> tuple[str, CompressionConfig, list[SummaryEmbeddings]]:
    header, arrays = read_packed(path, "summaries")
    try:
        doc_id = header["doc_id"]
        cfg = CompressionConfig.from_dict(header["compression"])
        n = int(header["chunk_count"])
        ranges = header["token_ranges"]
        out = [SummaryEmbeddings(i, arrays[f"chunk{i}"], doc_id, tuple(ranges[i])) for i in range(n)]
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: summary header inconsistent with payload") from exc
    if len(arrays) != n:
        raise CorruptFileError(f"{path}: {len(arrays)} tensors for {n} chunks")
    return doc_id, cfg, out
