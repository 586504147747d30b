"""Evaluation harness: QA scoring across serving modes, needle grids, latency and
finetuning-throughput benchmarks, and CSV/JSON reporting."""

from __future__ import annotations

import csv
import io
import json
import math
import random
import re
import string
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CompressionConfig, compress_document, effective_window, summary_rows_for
from .errors import LengthOverflowError, MissingArchiveError, NotFoundError
from .fileformat import atomic_write
from .lora import digest, init_adaptor
from .model import Decoder, EmbeddingSequence, tokenize
from .serving import Artifacts, ServeRequest, serve_query
from .store import VectorStore
from .synthetic import (EVAL_CITIES, FIXED_ANSWER, FIXED_NEEDLE, FIXED_QUESTION, WORDS, city_needle, city_question,
                        insert_at_depth, story_text)
from .train import TrainConfig, TrainingExample, fit_adaptor, lloco_sequences, prompt_tokens, text_context_sequences

VARIANTS = ("fixed", "random_city")

# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    """A table of rows (dicts sharing ``columns``) plus run metadata."""

    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchResult":
        return cls(d["name"], list(d["columns"]), [dict(r) for r in d["rows"]], dict(d["metadata"]))

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]


def report(result: BenchResult, out_dir) -> tuple[Path, Path]:
    """Write results.csv and results.json under ``out_dir``; the JSON round-trips exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# {result.name} config_digest={result.metadata.get('config_digest', '')}\n")
    w = csv.DictWriter(buf, fieldnames=result.columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in result.rows:
        w.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in result.columns})
    csv_path, json_path = out / "results.csv", out / "results.json"
    atomic_write(csv_path, buf.getvalue().encode())
    atomic_write(json_path, json.dumps(result.to_dict(), indent=1, sort_keys=True).encode())
    return csv_path, json_path


def load_result(path) -> BenchResult:
    return BenchResult.from_dict(json.loads(Path(path).read_text()))


def _meta(config: dict, seed: int | None, t0: float) -> dict:
    return {"config": config, "config_digest": digest(config), "seed": seed,
            "wall_clock_s": round(time.perf_counter() - t0, 3)}


# ---------------------------------------------------------------------------
# QA scoring
# ---------------------------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", s.lower()).split())


def exact_match(pred: str, gold: str) -> float:
    return float(normalize_answer(pred) == normalize_answer(gold))


def f1_score(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    prec, rec = common / len(p), common / len(g)
    return 2 * prec * rec / (prec + rec)


def qa_eval(examples: Sequence[TrainingExample], mode: str, art: Artifacts, group_policy: str = "strict",
            max_new_tokens: int = 16, top_k: int = 5) -> BenchResult:
    """Score every example through ``serve_query``; EM and F1 reported in points (0-100).

    Examples whose artifacts are missing are marked failed and left out of the means.
    """
    t0 = time.perf_counter()
    rows = []
    for i, ex in enumerate(examples):
        req = ServeRequest(ex.question, mode=mode, max_new_tokens=max_new_tokens, top_k=top_k, doc_id=ex.doc_id)
        try:
            pred = serve_query(req, art, group_policy).answer
        except (MissingArchiveError, NotFoundError, LengthOverflowError) as exc:
            rows.append({"index": i, "doc_id": ex.doc_id, "question": ex.question, "gold": ex.answer,
                         "prediction": None, "em": None, "f1": None, "status": f"failed: {exc.__class__.__name__}"})
            continue
        rows.append({"index": i, "doc_id": ex.doc_id, "question": ex.question, "gold": ex.answer,
                     "prediction": pred, "em": 100.0 * exact_match(pred, ex.answer),
                     "f1": 100.0 * f1_score(pred, ex.answer), "status": "ok"})
    ok = [r for r in rows if r["status"] == "ok"]
    agg = {"em": float(np.mean([r["em"] for r in ok])) if ok else float("nan"),
           "f1": float(np.mean([r["f1"] for r in ok])) if ok else float("nan"),
           "n": len(ok), "failed": len(rows) - len(ok)}
    meta = _meta({"mode": mode, "group_policy": group_policy, "max_new_tokens": max_new_tokens, "top_k": top_k},
                 None, t0)
    meta["aggregate"] = agg
    return BenchResult(f"qa_eval[{mode}]", ["index", "doc_id", "question", "gold", "prediction", "em", "f1",
                                            "status"], rows, meta)


# ---------------------------------------------------------------------------
# needle in a haystack
# ---------------------------------------------------------------------------


@dataclass
class NeedleSpec:
    haystack_doc_id: str
    needle: str
    depth: float
    length: int
    variant: str = "fixed"
    question: str = FIXED_QUESTION
    answer: str = FIXED_ANSWER

    def __post_init__(self):
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError("depth must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def build(self) -> tuple[str, int]:
        """Haystack of ``length`` tokens total, needle at the boundary nearest depth * haystack length."""
        base = story_text(max(0, self.length - len(tokenize(self.needle))))
        return insert_at_depth(base, self.needle, self.depth)


def needle_specs(lengths: Sequence[int], depths: Sequence[float], variant: str = "fixed", seed: int = 0,
                 cities: Sequence[str] = EVAL_CITIES) -> list[NeedleSpec]:
    """Row-major grid (length outer, depth inner). random_city draws a distinct
    (city, word) pair per cell from ``cities`` x WORDS."""
    rng = random.Random(seed)
    pairs = [(c, w) for c in cities for w in WORDS]
    n = len(lengths) * len(depths)
    if variant == "random_city" and n > len(pairs):
        raise ValueError("grid larger than the pool of city/word pairs")
    chosen = rng.sample(pairs, n) if variant == "random_city" else []
    specs = []
    for i, L in enumerate(lengths):
        for j, d in enumerate(depths):
            cell = i * len(depths) + j
            doc = f"haystack-{L}-{j}"
            if variant == "fixed":
                specs.append(NeedleSpec(doc, FIXED_NEEDLE + " ", d, L, "fixed"))
            else:
                c, w = chosen[cell]
                specs.append(NeedleSpec(doc, city_needle(c, w), d, L, "random_city", city_question(c), w))
    return specs


def needle_grid(art: Artifacts, lengths: Sequence[int], depths: Sequence[float], modes: Sequence[str] = ("lloco",),
                variant: str = "fixed", seed: int = 0, group_id: str | None = None, max_new_tokens: int = 16,
                cities: Sequence[str] = EVAL_CITIES) -> BenchResult:
    """One row per (length, depth, mode). Each haystack is compressed once into a
    private one-document store; success = gold answer contained in the lowercased output."""
    t0 = time.perf_counter()
    comp = art.compression
    limit = effective_window(art.model.config.window, comp.chunk_length, comp.summary_count)
    rows = []
    for spec in needle_specs(lengths, depths, variant, seed, cities):
        text, pos = spec.build()
        base = {"length": spec.length, "depth": spec.depth, "needle_pos": pos, "answer": spec.answer}
        if spec.length > limit:
            rows += [{**base, "mode": m, "prediction": None, "success": None, "status": "failed: overflow"}
                     for m in modes]
            continue
        store = VectorStore(art.store.d_model, comp, art.store.embedder_id, art.store.embed_fn)
        gid = group_id or "needle"
        store.add_document(spec.haystack_doc_id, gid, text,
                           compress_document(art.model, tokenize(text), comp, spec.haystack_doc_id))
        cell_art = Artifacts(art.model, store, art.registry, art.adaptors)
        for m in modes:
            req = ServeRequest(spec.question, group_id=group_id if m == "lloco" else None, mode=m,
                               max_new_tokens=max_new_tokens, doc_id=spec.haystack_doc_id)
            try:
                pred = serve_query(req, cell_art).answer
            except LengthOverflowError:
                rows.append({**base, "mode": m, "prediction": None, "success": None, "status": "failed: overflow"})
                continue
            rows.append({**base, "mode": m, "prediction": pred,
                         "success": float(spec.answer.lower() in pred.lower()), "status": "ok"})
    meta = _meta({"lengths": list(lengths), "depths": list(depths), "modes": list(modes), "variant": variant,
                  "group_id": group_id, "max_new_tokens": max_new_tokens}, seed, t0)
    meta["success_rate"] = {m: grid_rate(rows, m) for m in modes}
    return BenchResult(f"needle[{variant}]", ["length", "depth", "mode", "needle_pos", "answer", "prediction",
                                              "success", "status"], rows, meta)


def grid_rate(rows: Sequence[dict], mode: str) -> float:
    """Mean success in points over the cells of ``mode``; failed cells count as misses."""
    cells = [r for r in rows if r["mode"] == mode]
    if not cells:
        return float("nan")
    return 100.0 * sum(r["success"] or 0.0 for r in cells) / len(cells)


def success_matrix(result: BenchResult, mode: str) -> np.ndarray:
    lengths = result.metadata["config"]["lengths"]
    depths = result.metadata["config"]["depths"]
    m = np.full((len(lengths), len(depths)), np.nan)
    for r in result.rows:
        if r["mode"] == mode and r["success"] is not None:
            m[lengths.index(r["length"]), depths.index(r["depth"])] = r["success"]
    return m


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

LATENCY_QUESTION = "What is the magic word?"


def prompt_rows(n: int, mode: str, comp: CompressionConfig) -> int:
    """Positions fed before the question: n tokens (full) or ceil(n/L)*k summary rows (compressed)."""
    return n if mode == "full" else summary_rows_for(n, comp)


def latency_bench(model: Decoder, sizes: Sequence[int], comp: CompressionConfig | None = None,
                  modes: Sequence[str] = ("full", "compressed"), max_new: int = 16, runs: int = 5, warmup: int = 2,
                  seed: int = 0) -> BenchResult:
    """Per-token decode latency (prefill + ``max_new`` greedy steps, divided by ``max_new``).

    A size is refused when its prompt plus the question and generated tokens exceeds the window.
    Contexts are random rows/tokens: timing does not depend on content.
    """
    t0 = time.perf_counter()
    comp = comp or CompressionConfig.toy()
    W, d = model.config.window, model.config.d_model
    q = prompt_tokens(LATENCY_QUESTION)
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        per_mode = {}
        for m in modes:
            if m not in ("full", "compressed"):
                raise ValueError(f"latency mode must be full or compressed, got {m!r}")
            p = prompt_rows(n, m, comp)
            row = {"size": n, "mode": m, "prompt_rows": p, "per_token_ms": None, "speedup": None}
            if p + len(q) + max_new > W:
                rows.append({**row, "status": "refused"})
                continue
            if m == "full":
                prefix, tokens = None, list(rng.integers(32, 127, size=n)) + q
            else:
                prefix = EmbeddingSequence(rng.standard_normal((p, d)).astype(model.dtype))
                tokens = q
            for _ in range(warmup):
                model.generate(prefix, tokens, max_new)
            times = []
            for _ in range(runs):
                ts = time.perf_counter()
                model.generate(prefix, tokens, max_new)  # no stop token: always max_new steps
                times.append(time.perf_counter() - ts)
            row["per_token_ms"] = 1000.0 * float(np.median(times)) / max(max_new, 1)
            per_mode[m] = row["per_token_ms"]
            rows.append({**row, "status": "ok"})
        if "full" in per_mode and "compressed" in per_mode:
            for r in rows[-len(modes):]:
                r["speedup"] = per_mode["full"] / per_mode["compressed"]
    cfg = {"sizes": list(sizes), "modes": list(modes), "max_new": max_new, "runs": runs, "warmup": warmup,
           "window": W, "compression": comp.to_dict(), "model": model.config.to_dict()}
    return BenchResult("latency", ["size", "mode", "prompt_rows", "per_token_ms", "speedup", "status"], rows,
                       _meta(cfg, seed, t0))


# ---------------------------------------------------------------------------
# finetuning throughput
# ---------------------------------------------------------------------------


def throughput_bench(model: Decoder, docs: dict[str, str], examples: Sequence[TrainingExample],
                     cfg: TrainConfig | None = None, comp: CompressionConfig | None = None, steps: int = 4,
                     modes: Sequence[str] = ("full_context_ft", "lloco_ft")) -> BenchResult:
    """Samples/sec of adaptor training on raw-text vs compressed contexts, same step count.

    Compression of the documents is offline preprocessing and is not timed.
    """
    t0 = time.perf_counter()
    comp = comp or CompressionConfig.toy()
    cfg = cfg or TrainConfig(lr=1e-3, batch_size=2, grad_accum=1, epochs=1)
    cfg = TrainConfig(**{**cfg.to_dict(), "max_steps": steps})
    rows = []
    for m in modes:
        if m == "full_context_ft":
            seqs = text_context_sequences(examples, {k: tokenize(v) for k, v in docs.items()}, model)
        elif m == "lloco_ft":
            summ = {k: compress_document(model, tokenize(v), comp, k) for k, v in docs.items()}
            seqs = lloco_sequences(examples, summ, model)
        else:
            raise ValueError(f"unknown throughput mode {m!r}")
        adaptor = init_adaptor("throughput", r=cfg.rank, alpha=cfg.alpha, seed=cfg.seed, config=model.config,
                               dtype=model.dtype)
        ts = time.perf_counter()
        fit_adaptor(model, seqs, cfg, adaptor)
        dt = time.perf_counter() - ts
        samples = steps * min(cfg.batch_size, len(seqs))
        rows.append({"mode": m, "samples": samples, "seconds": dt, "samples_per_sec": samples / dt,
                     "mean_seq_len": float(np.mean([len(s) for s in seqs]))})
    by = {r["mode"]: r["samples_per_sec"] for r in rows}
    cfg_d = {"train": cfg.to_dict(), "steps": steps, "modes": list(modes), "compression": comp.to_dict(),
             "model": model.config.to_dict(), "n_docs": len(docs)}
    meta = _meta(cfg_d, cfg.seed, t0)
    if "full_context_ft" in by and "lloco_ft" in by:
        meta["ratio"] = by["lloco_ft"] / by["full_context_ft"]
    return BenchResult("throughput", ["mode", "samples", "seconds", "samples_per_sec", "mean_seq_len"], rows, meta)
