"""Offline preprocessing and the query-time flow: retrieve, compose the prompt, pick an adaptor, decode.

Artifact directory layout::

    base.json / base.bin      frozen decoder checkpoint (also the compressor)
    store/                    vector store with per-document summary archives
    adaptors/                 adaptor registry
    preprocess.json           report of the last preprocess run
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CompressionConfig, compress_document, summary_rows_for
from .errors import (EmptyStoreError, LengthOverflowError, LlocoError, MissingArchiveError, MixedGroupError,
                     NotFoundError)
from .fileformat import atomic_write
from .lora import AdaptorRegistry, LoraAdaptor
from .model import Decoder, EmbeddingSequence, detokenize, load_checkpoint, save_checkpoint, tokenize
from .store import PASSAGE_LENGTH, PassageRecord, VectorStore
from .train import END_TOKEN, prompt_tokens

log = logging.getLogger(__name__)

MODES = ("no_context", "full_context", "retrieval", "compressed_unfinetuned", "lloco")
POLICIES = ("strict", "majority")


@dataclass
class ServeRequest:
    question: str
    group_id: str | None = None
    mode: str = "lloco"
    max_new_tokens: int = 16
    top_k: int = 5
    doc_id: str | None = None  # ground-truth document, when the caller knows it

    def __post_init__(self):
        if not isinstance(self.question, str):
            raise ValueError("question must be a string")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.max_new_tokens, bool) or not isinstance(self.max_new_tokens, int) or self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be a non-negative integer")
        if isinstance(self.top_k, bool) or not isinstance(self.top_k, int) or self.top_k < 1:
            raise ValueError("top_k must be a positive integer")
        for name in ("group_id", "doc_id"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, str):
                raise ValueError(f"{name} must be a string or null")

    @classmethod
    def from_dict(cls, d: dict) -> "ServeRequest":
        if not isinstance(d, dict):
            raise ValueError("request body must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown request fields: {sorted(extra)}")
        if "question" not in d:
            raise ValueError("question is required")
        return cls(**d)


@dataclass
class ServeResponse:
    answer: str
    retrieved_passage_ids: list[int]
    adaptor_id: str | None
    summary_rows: int
    context_tokens: int
    question_tokens: int
    latency_ms: float
    group_id: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ServeResponse":
        return cls(**d)


@dataclass
class Artifacts:
    model: Decoder
    store: VectorStore
    registry: AdaptorRegistry | None = None
    adaptors: dict[str, LoraAdaptor] = field(default_factory=dict)  # in-memory, takes precedence
    root: Path | None = None

    @property
    def compression(self) -> CompressionConfig:
        return self.store.compression

    @classmethod
    def load(cls, root) -> "Artifacts":
        root = Path(root)
        model = load_checkpoint(root / "base")
        store = VectorStore.load(root / "store", embed_fn=_embedder(model))
        registry = AdaptorRegistry(root / "adaptors") if (root / "adaptors").exists() else None
        return cls(model, store, registry, root=root)

    def adaptor_for(self, group_id: str) -> LoraAdaptor:
        if group_id in self.adaptors:
            return self.adaptors[group_id]
        if self.registry is None:
            raise NotFoundError(f"no adaptor registered for group {group_id!r}")
        return self.registry.load(group_id)

    def known_groups(self) -> list[str]:
        reg = set(self.registry.groups()) if self.registry is not None else set()
        return sorted(set(self.store.groups()) | reg | set(self.adaptors))


def _embedder(model: Decoder):
    from .store import embed_passage

    return lambda text: embed_passage(model, text)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass
class PreprocessReport:
    indexed: list[str] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)  # doc -> reason
    flagged: dict[str, str] = field(default_factory=dict)  # indexed but will be truncated at serve time
    passages: int = 0
    summary_rows: int = 0
    tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def read_group_map(path) -> dict[str, str]:
    """Group file: a JSON object {doc_id: group_id}, or lines of ``doc_id<TAB>group_id``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line in text.splitlines():
            if line.strip():
                doc, grp = line.split("\t") if "\t" in line else line.split(None, 1)
                data[doc.strip()] = grp.strip()
    if not isinstance(data, dict):
        raise ValueError("group file must map doc ids to group ids")
    return {str(k): str(v) for k, v in data.items()}


def preprocess(corpus_dir, group_map: dict[str, str], out, model: Decoder,
               compression: CompressionConfig | None = None, passage_length: int = PASSAGE_LENGTH,
               default_group: str | None = None) -> PreprocessReport:
    """Index and compress every ``*.txt`` document under ``corpus_dir``; doc id = file stem.

    Re-running with the same inputs rewrites byte-identical artifacts.
    """
    comp = compression or CompressionConfig.toy()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = PreprocessReport()
    store = VectorStore.for_model(model, comp)
    cap = comp.summary_cap(model.config.window)
    for path in sorted(Path(corpus_dir).glob("*.txt")):
        doc_id = path.stem
        group = group_map.get(doc_id, default_group)
        if group is None:
            report.skipped[doc_id] = "no group assigned"
            continue
        try:
            text = path.read_bytes().decode("utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            report.skipped[doc_id] = f"unreadable: {exc.__class__.__name__}"
            continue
        tokens = tokenize(text)
        summaries = compress_document(model, tokens, comp, doc_id=doc_id)
        store.add_document(doc_id, group, text, summaries, passage_length=passage_length)
        n_rows = summary_rows_for(len(tokens), comp)
        if n_rows > cap:
            report.flagged[doc_id] = f"{n_rows} summary rows exceed the serving cap of {cap}"
        report.indexed.append(doc_id)
        report.summary_rows += n_rows
        report.tokens += len(tokens)
    report.passages = len(store)
    save_checkpoint(model, out / "base")
    store.persist(out / "store")
    (out / "adaptors").mkdir(exist_ok=True)
    atomic_write(out / "preprocess.json", json.dumps(report.to_dict(), indent=1, sort_keys=True).encode())
    for doc, why in report.skipped.items():
        log.warning("skipped %s: %s", doc, why)
    for doc, why in report.flagged.items():
        log.warning("flagged %s: %s", doc, why)
    return report


# ---------------------------------------------------------------------------
# query flow
# ---------------------------------------------------------------------------


def choose_group(records: Sequence[PassageRecord], policy: str = "strict") -> str:
    """Group shared by the retrieved passages. Majority ties go to the best-ranked passage's group."""
    if policy not in POLICIES:
        raise ValueError(f"group policy must be one of {POLICIES}")
    if not records:
        raise NotFoundError("no passages retrieved; cannot pick a group")
    groups = [r.group_id for r in records]
    if len(set(groups)) == 1:
        return groups[0]
    if policy == "strict":
        raise MixedGroupError(f"retrieved passages span groups {sorted(set(groups))}")
    counts = Counter(groups)
    top = max(counts.values())
    return next(g for g in groups if counts[g] == top)


def _whole_chunks(rows: EmbeddingSequence, budget: int, k: int) -> EmbeddingSequence:
    keep = min(len(rows), (max(budget, 0) // k) * k)
    return EmbeddingSequence(rows.rows[:keep], rows.origin[:keep])


def serve_query(req: ServeRequest, art: Artifacts, group_policy: str = "strict") -> ServeResponse:
    t0 = time.perf_counter()
    model, store = art.model, art.store
    W = model.config.window
    q_tokens = prompt_tokens(req.question)
    budget = W - len(q_tokens) - req.max_new_tokens
    if budget < 0:
        raise LengthOverflowError(
            f"question ({len(q_tokens)} tokens) + {req.max_new_tokens} new tokens exceed window {W}")
    if req.group_id is not None and req.group_id not in art.known_groups():
        raise NotFoundError(f"unknown group {req.group_id!r}")
    if req.doc_id is not None and req.doc_id not in store.doc_ids():
        raise NotFoundError(f"unknown document {req.doc_id!r}")

    prefix: EmbeddingSequence | None = None
    context: list[int] = []
    retrieved: list[PassageRecord] = []
    adaptor = None
    group = req.group_id

    if req.mode in ("retrieval", "compressed_unfinetuned", "lloco"):
        try:
            retrieved = store.top_k(req.question, req.top_k, doc_id=req.doc_id, group_id=req.group_id)
        except EmptyStoreError:
            if req.doc_id is not None or req.mode == "retrieval":
                raise NotFoundError("no passages available for this request") from None
        if group is None and retrieved:
            group = choose_group(retrieved, group_policy)

    if req.mode == "full_context":
        doc = req.doc_id
        if doc is None:
            doc = store.top_k(req.question, 1, group_id=req.group_id)[0].doc_id
        context = tokenize(store.doc_text(doc))[:budget]  # keep the head
    elif req.mode == "retrieval":
        for r in retrieved:
            context += tokenize(r.text)
        context = context[:budget]
    elif req.mode in ("compressed_unfinetuned", "lloco"):
        k = art.compression.summary_count
        if req.doc_id is not None:
            rows = EmbeddingSequence(np.concatenate([s.rows for s in store.doc_summaries(req.doc_id)]))
        elif retrieved:
            rows = store.gather_summaries(retrieved)
        else:
            rows = EmbeddingSequence.empty(model.config.d_model)
        prefix = _whole_chunks(rows, budget, k)
        if req.mode == "lloco":
            if group is None:
                raise NotFoundError("lloco mode needs a group: none given and nothing retrieved")
            adaptor = art.adaptor_for(group)

    tokens = context + q_tokens
    n_rows = 0 if prefix is None else len(prefix)
    assert n_rows + len(tokens) + req.max_new_tokens <= W
    out = model.generate(prefix, tokens, req.max_new_tokens, adaptor=adaptor, stop_token=END_TOKEN)
    if out and out[-1] == END_TOKEN:
        out = out[:-1]
    return ServeResponse(
        answer=detokenize(out).strip(),
        retrieved_passage_ids=[r.passage_id for r in retrieved],
        adaptor_id=adaptor.adaptor_id if adaptor is not None else None,
        summary_rows=n_rows,
        context_tokens=len(context),
        question_tokens=len(q_tokens),
        latency_ms=(time.perf_counter() - t0) * 1000.0,
        group_id=group if req.mode == "lloco" else None,
    )


# ---------------------------------------------------------------------------
# HTTP
# ---------------------------------------------------------------------------


def status_for(exc: BaseException) -> int:
    if isinstance(exc, NotFoundError):
        return HTTPStatus.NOT_FOUND
    if isinstance(exc, MixedGroupError):
        return HTTPStatus.CONFLICT
    if isinstance(exc, LengthOverflowError):
        return HTTPStatus.REQUEST_ENTITY_TOO_LARGE
    if isinstance(exc, (ValueError, TypeError)):
        return HTTPStatus.BAD_REQUEST
    if isinstance(exc, MissingArchiveError):
        return HTTPStatus.INTERNAL_SERVER_ERROR
    return HTTPStatus.INTERNAL_SERVER_ERROR


def make_handler(art: Artifacts, group_policy: str = "strict"):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, code: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/v1/health":
                self._send(200, {"status": "ok", "groups": len(art.known_groups()), "passages": len(art.store)})
            elif self.path == "/v1/groups":
                recs = {r.group_id: r.to_dict() for r in art.registry.records()} if art.registry else {}
                for g, ad in art.adaptors.items():
                    recs[g] = {"adaptor_id": ad.adaptor_id, "group_id": g, "in_memory": True}
                self._send(200, {"groups": [recs.get(g, {"group_id": g, "adaptor_id": None})
                                            for g in art.known_groups()]})
            else:
                self._send(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            if self.path != "/v1/query":
                self._send(404, {"error": f"no route {self.path}"})
                return
            try:
                n = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(n)
                try:
                    body = json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ValueError(f"malformed JSON: {exc}") from None
                req = ServeRequest.from_dict(body)
                resp = serve_query(req, art, group_policy)
            except (LlocoError, ValueError, TypeError) as exc:
                self._send(status_for(exc), {"error": str(exc), "type": exc.__class__.__name__})
                return
            self._send(200, resp.to_dict())

    return Handler


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def make_server(addr: str, art: Artifacts, group_policy: str = "strict") -> ThreadingHTTPServer:
    if group_policy not in POLICIES:
        raise ValueError(f"group policy must be one of {POLICIES}")
    srv = ThreadingHTTPServer(parse_addr(addr), make_handler(art, group_policy))
    srv.daemon_threads = True
    return srv


def http_serve(addr: str, art: Artifacts, group_policy: str = "strict", ready: threading.Event | None = None) -> None:
    srv = make_server(addr, art, group_policy)
    log.info("serving on %s:%d", *srv.server_address[:2])
    if ready is not None:
        ready.set()
    try:
        srv.serve_forever()
    finally:
        srv.server_close()


def artifacts_dir(cli_value: str | None) -> str:
    """LLOCO_ARTIFACTS, when set, overrides the command-line directory."""
    env = os.environ.get("LLOCO_ARTIFACTS")
    if env:
        return env
    if cli_value is None:
        raise ValueError("no artifacts directory: pass --artifacts or set LLOCO_ARTIFACTS")
    return cli_value
