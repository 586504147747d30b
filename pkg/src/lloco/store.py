"""Passage index with exact cosine search and links to compressed chunks."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .encoder import CompressionConfig, SummaryEmbeddings, chunk_spans, load_summaries, save_summaries
from .errors import CorruptFileError, EmptyStoreError, MissingArchiveError, VersionMismatchError
from .fileformat import atomic_write
from .model import Decoder, EmbeddingSequence, tokenize

STORE_VERSION = 1
PASSAGE_LENGTH = 512


@dataclass
class PassageRecord:
    passage_id: int
    doc_id: str
    group_id: str
    span: tuple[int, int]
    text: str
    sentence_embedding: np.ndarray
    covering_chunk_indices: list[int] = field(default_factory=list)
    adaptor_id: str | None = None

    def meta(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "doc_id": self.doc_id,
            "group_id": self.group_id,
            "span": list(self.span),
            "text": self.text,
            "covering_chunk_indices": list(self.covering_chunk_indices),
            "adaptor_id": self.adaptor_id,
        }


def chunk_passages(n_tokens: int, passage_length: int = PASSAGE_LENGTH) -> list[tuple[int, int]]:
    return chunk_spans(n_tokens, passage_length)


def covering_chunks(span: tuple[int, int], chunk_length: int) -> list[int]:
    s, e = span
    if e <= s:
        return []
    return list(range(s // chunk_length, (e - 1) // chunk_length + 1))


def embed_passage(model: Decoder, text: str) -> np.ndarray:
    """Mean of the model's byte embeddings, L2-normalised (a stand-in sentence embedder)."""
    d = model.config.d_model
    ids = tokenize(text)
    if ids:
        v = model.params["tok_emb"][np.asarray(ids)].astype(np.float64).mean(axis=0)
        n = np.linalg.norm(v)
        if n > 0:
            return (v / n).astype(np.float32)
    v = np.zeros(d, dtype=np.float32)
    v[0] = 1.0
    return v


def embedder_digest(model: Decoder) -> str:
    return hashlib.sha256(np.ascontiguousarray(model.params["tok_emb"], dtype="<f4").tobytes()).hexdigest()[:16]


class VectorStore:
    """Exhaustive cosine index over passages plus the per-document summary archives."""

    def __init__(self, d_model: int, compression: CompressionConfig | None = None, embedder_id: str = "",
                 embed_fn: Callable[[str], np.ndarray] | None = None):
        self.d_model = d_model
        self.compression = compression or CompressionConfig.toy()
        self.embedder_id = embedder_id
        self.embed_fn = embed_fn
        self.records: list[PassageRecord] = []
        self._matrix: np.ndarray | None = None
        self.summaries: dict[str, list[SummaryEmbeddings]] = {}
        self.doc_chunk_cfg: dict[str, dict] = {}
        self.root: Path | None = None

    @classmethod
    def for_model(cls, model: Decoder, compression: CompressionConfig | None = None) -> "VectorStore":
        return cls(model.config.d_model, compression, embedder_digest(model), lambda t: embed_passage(model, t))

    def __len__(self) -> int:
        return len(self.records)

    # -- building -----------------------------------------------------------
    def add(self, record: PassageRecord) -> PassageRecord:
        v = np.asarray(record.sentence_embedding, dtype=np.float32)
        if v.shape != (self.d_model,):
            raise ValueError(f"embedding shape {v.shape} != ({self.d_model},)")
        if abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) > 1e-5:
            raise ValueError("sentence embedding must be unit-norm")
        record.sentence_embedding = v
        self.records.append(record)
        self._matrix = None
        return record

    def add_document(self, doc_id: str, group_id: str, text: str, summaries: list[SummaryEmbeddings] | None = None,
                     passage_length: int = PASSAGE_LENGTH, adaptor_id: str | None = None) -> list[PassageRecord]:
        if self.embed_fn is None:
            raise ValueError("store has no embedder")
        raw = tokenize(text)
        out = []
        for s, e in chunk_passages(len(raw), passage_length):
            ptext = bytes(raw[s:e]).decode("utf-8", "surrogateescape")
            rec = PassageRecord(len(self.records), doc_id, group_id, (s, e), ptext, self.embed_fn(ptext),
                                covering_chunks((s, e), self.compression.chunk_length),
                                adaptor_id if adaptor_id is not None else group_id)
            out.append(self.add(rec))
        if summaries is not None:
            self.summaries[doc_id] = summaries
        self.doc_chunk_cfg[doc_id] = {"n_tokens": len(raw), **self.compression.to_dict()}
        return out

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self.records:
                self._matrix = np.stack([r.sentence_embedding for r in self.records]).astype(np.float32)
            else:
                self._matrix = np.zeros((0, self.d_model), dtype=np.float32)
        return self._matrix

    # -- search -------------------------------------------------------------
    def _query_vec(self, query) -> np.ndarray:
        if isinstance(query, str):
            if self.embed_fn is None:
                raise ValueError("text queries need a store embedder")
            return self.embed_fn(query)
        return np.asarray(query, dtype=np.float32)

    def scores(self, query) -> np.ndarray:
        return kernels.cosine_scores(self.matrix, self._query_vec(query))

    def top_k(self, query, k: int = 5, doc_id: str | None = None, group_id: str | None = None) -> list[PassageRecord]:
        """Exact ranking: descending cosine, ties to the lower passage id.

        ``doc_id`` / ``group_id`` restrict the candidates before ranking.
        """
        if not self.records:
            raise EmptyStoreError("top_k on an empty store")
        scores = self.scores(query)
        if doc_id is not None or group_id is not None:
            allowed = np.array([(doc_id is None or r.doc_id == doc_id) and (group_id is None or r.group_id == group_id)
                                for r in self.records])
            if not allowed.any():
                raise EmptyStoreError(f"no passages for document {doc_id!r} / group {group_id!r}")
            scores = np.where(allowed, scores, -np.inf)
            k = min(k, int(allowed.sum()))
        ids = kernels.top_k(scores, min(k, len(self.records)))
        return [self.records[int(i)] for i in ids]

    # -- summaries ----------------------------------------------------------
    def doc_summaries(self, doc_id: str) -> list[SummaryEmbeddings]:
        got = self.summaries.get(doc_id)
        if got is None and self.root is not None:
            path = self.root / "summaries" / f"{_safe(doc_id)}.sum"
            if path.exists():
                _, _, got = load_summaries(path)
                self.summaries[doc_id] = got
        if got is None:
            raise MissingArchiveError(f"no summary archive for document {doc_id!r}")
        return got

    def gather_summaries(self, records: Sequence[PassageRecord]) -> EmbeddingSequence:
        """Rows of the chunks covering ``records``: deduplicated, ordered by (doc, chunk)."""
        keys = sorted({(r.doc_id, c) for r in records for c in r.covering_chunk_indices})
        rows = []
        for doc_id, c in keys:
            summ = self.doc_summaries(doc_id)
            if c >= len(summ):
                raise MissingArchiveError(f"archive for {doc_id!r} has no chunk {c}")
            rows.append(summ[c].rows)
        if not rows:
            return EmbeddingSequence.empty(self.d_model)
        return EmbeddingSequence(np.concatenate(rows))

    def doc_ids(self) -> list[str]:
        return sorted({r.doc_id for r in self.records} | set(self.summaries))

    def groups(self) -> list[str]:
        return sorted({r.group_id for r in self.records})

    def doc_text(self, doc_id: str) -> str:
        parts = sorted((r.span[0], r.text) for r in self.records if r.doc_id == doc_id)
        if not parts:
            raise MissingArchiveError(f"unknown document {doc_id!r}")
        return "".join(t for _, t in parts)

    # -- persistence --------------------------------------------------------
    def persist(self, path) -> Path:
        root = Path(path)
        (root / "summaries").mkdir(parents=True, exist_ok=True)
        emb = np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()
        lines = "".join(json.dumps(r.meta(), sort_keys=True) + "\n" for r in self.records)
        for doc_id, summ in self.summaries.items():
            save_summaries(root / "summaries" / f"{_safe(doc_id)}.sum", doc_id, self.compression, summ)
        manifest = {
            "format_version": STORE_VERSION,
            "passage_count": len(self.records),
            "d_model": self.d_model,
            "compression": self.compression.to_dict(),
            "doc_chunk_config": self.doc_chunk_cfg,
            "embedder_digest": self.embedder_id,
            "embeddings_crc32": zlib.crc32(emb),
            "records_crc32": zlib.crc32(lines.encode()),
            "summary_docs": sorted(self.summaries),
        }
        atomic_write(root / "embeddings.bin", emb)
        atomic_write(root / "records.jsonl", lines.encode())
        atomic_write(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        self.root = root
        return root

    @classmethod
    def load(cls, path, embed_fn: Callable[[str], np.ndarray] | None = None, eager: bool = False) -> "VectorStore":
        root = Path(path)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise CorruptFileError(f"{root}: no manifest.json") from exc
        except json.JSONDecodeError as exc:
            raise CorruptFileError(f"{root}: unreadable manifest") from exc
        if manifest.get("format_version") != STORE_VERSION:
            raise VersionMismatchError(f"store format {manifest.get('format_version')!r}, expected {STORE_VERSION}")
        try:
            lines_raw = (root / "records.jsonl").read_bytes()
            emb = (root / "embeddings.bin").read_bytes()
        except FileNotFoundError as exc:
            raise CorruptFileError(f"{root}: missing store file") from exc
        n = manifest["passage_count"]
        d = manifest["d_model"]
        if zlib.crc32(lines_raw) != manifest.get("records_crc32") or zlib.crc32(emb) != manifest.get("embeddings_crc32"):
            raise CorruptFileError(f"{root}: checksum mismatch")
        metas = [json.loads(l) for l in lines_raw.decode().splitlines() if l.strip()]
        if len(metas) != n:
            raise CorruptFileError(f"{root}: manifest says {n} passages, records.jsonl has {len(metas)}")
        if len(emb) != n * d * 4:
            raise CorruptFileError(f"{root}: embeddings.bin is {len(emb)} bytes, expected {n * d * 4}")
        mat = np.frombuffer(emb, dtype="<f4").reshape(n, d).astype(np.float32)
        store = cls(d, CompressionConfig.from_dict(manifest["compression"]), manifest.get("embedder_digest", ""),
                    embed_fn)
        for i, m in enumerate(metas):
            store.records.append(PassageRecord(m["passage_id"], m["doc_id"], m["group_id"], tuple(m["span"]),
                                               m["text"], mat[i].copy(), list(m["covering_chunk_indices"]),
                                               m.get("adaptor_id")))
        store.doc_chunk_cfg = manifest.get("doc_chunk_config", {})
        store.root = root
        if eager:
            for doc_id in manifest.get("summary_docs", []):
                store.doc_summaries(doc_id)
        return store


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
