"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as the tests run and again in the terminal summary.
Criteria 7 and 8 train on a pretrained toy base. It is cached under
``.lloco_cache/`` (override with LLOCO_CACHE) and its pretraining time is
charged to criterion 7's runtime budget.
"""

import json
import math
import os
import random
import threading
import time
import urllib.error
import urllib.request
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from lloco.bench import latency_bench, needle_grid, qa_eval, throughput_bench
from lloco.encoder import (CompressionConfig, chunk_document, compress_document, compression_ratio, effective_window,
                           format_ratio, load_summaries, save_summaries, summary_rows_for)
from lloco.errors import CorruptFileError, VersionMismatchError
from lloco.lora import AdaptorRegistry, init_adaptor, load_adaptor, merge, save_adaptor, unmerge
from lloco.model import Decoder, ModelConfig, load_checkpoint, save_checkpoint, tokenize
from lloco.serving import MODES, Artifacts, make_server, preprocess
from lloco.store import PassageRecord, VectorStore
from lloco.synthetic import EVAL_CITIES, kv_group, needle_group
from lloco.train import (TrainConfig, TrainingExample, adaptor_grad_check, lloco_sequences, pretrain_toy_base,
                         recipe_digest, toy_pretrain_recipe, train_group)

pytestmark = pytest.mark.acceptance


def _examples(qa):
    return [TrainingExample(q.group_id, q.doc_id, q.question, q.answer) for q in qa]


# -- 1-3: compression arithmetic ------------------------------------------------


def test_c01_ratio_column(acceptance):
    t = time.perf_counter()
    got = [compression_ratio(1536, 50), compression_ratio(4096, 2560), compression_ratio(32768, 2560)]
    ok = (got == [Fraction(3072, 100), Fraction(8, 5), Fraction(64, 5)]
          and [format_ratio(r) for r in got] == ["30x", "1.6x", "12.8x"])
    dt = time.perf_counter() - t
    ok = ok and dt < 1
    assert acceptance(1, ok, f"ratios {[str(r) for r in got]} -> {[format_ratio(r) for r in got]} ({dt:.3f}s)")


def test_c02_effective_window(acceptance):
    t = time.perf_counter()
    w = effective_window(4096, 1536, 50)
    dt = time.perf_counter() - t
    ok = 120_000 <= w <= 128_000 and w == 124_416 and dt < 1
    assert acceptance(2, ok, f"effective_window(4096,1536,50) = {w} ({dt:.3f}s)")


def test_c03_row_count_law(acceptance):
    t = time.perf_counter()
    rng = random.Random(2024)
    bad = 0
    for _ in range(1000):
        L = rng.randint(2, 3000)
        k = rng.randint(1, L - 1)
        n = rng.randint(0, 50_000)
        # brute force: walk the tokens, closing a chunk every L
        chunks, fill = 0, 0
        for _ in range(n):
            if fill == 0:
                chunks += 1
            fill = (fill + 1) % L
        law = summary_rows_for(n, CompressionConfig(L, k))
        bad += law != chunks * k or len(chunk_document(range(n), L)) != chunks
    dt = time.perf_counter() - t
    ok = bad == 0 and dt < 10
    assert acceptance(3, ok, f"{bad} mismatches on 1000 random (n, L, k) triples ({dt:.2f}s)")


# -- 4: LoRA no-op and merge ----------------------------------------------------


def test_c04_lora_noop_and_merge(acceptance):
    t = time.perf_counter()
    model = Decoder(ModelConfig(seed=4))
    toks = tokenize("What does ana have?\nA:")
    base = model.forward(None, toks).logits
    rng = np.random.default_rng(4)
    changed, worst_merge, worst_trip = 0, 0.0, 0.0
    for i in range(100):
        fresh = init_adaptor("g", config=model.config, seed=i)
        changed += model.forward(None, toks, fresh).logits.tobytes() != base.tobytes()
        ad = init_adaptor("g", config=model.config, seed=1000 + i)
        for _, b in ad.pairs.values():
            b[...] = rng.standard_normal(b.shape) * 0.05
        merged = merge(ad, model)
        worst_merge = max(worst_merge, float(np.abs(merged.forward(None, toks).logits
                                                    - model.forward(None, toks, ad).logits).max()))
        back = unmerge(merged, ad)
        worst_trip = max(worst_trip, max(float(np.abs(back.params[k] - model.params[k]).max()) for k in model.params))
    dt = time.perf_counter() - t
    ok = changed == 0 and worst_merge < 1e-5 and worst_trip < 1e-6 and dt < 60
    assert acceptance(4, ok, f"fresh adaptors changing logits: {changed}/100; merged vs dynamic max |d| "
                             f"{worst_merge:.2e}; round trip {worst_trip:.2e} ({dt:.1f}s)")


# -- 5: gradient fidelity ---------------------------------------------------------


def test_c05_gradient_fidelity(acceptance):
    t = time.perf_counter()
    model = Decoder(ModelConfig(d_model=16, n_layers=2, n_heads=2, window=256, seed=5))
    docs, qa = kv_group("g", 3, 5, n_pairs=2)
    comp = CompressionConfig.toy()
    summ = {d.doc_id: compress_document(model, tokenize(d.text), comp, d.doc_id) for d in docs}
    seqs = lloco_sequences(_examples(qa)[:4], summ, model)
    ad = init_adaptor("g", config=model.config, seed=6)
    rng = np.random.default_rng(6)
    for _, b in ad.pairs.values():
        b[...] = rng.standard_normal(b.shape) * 0.1
    err = adaptor_grad_check(model, ad, seqs, n_samples=64)
    dt = time.perf_counter() - t
    ok = err < 1e-4 and dt < 120
    assert acceptance(5, ok, f"max relative error {err:.2e} over 64 adaptor parameters ({dt:.1f}s)")


# -- 6: retrieval exactness ---------------------------------------------------------


def test_c06_retrieval_exactness(acceptance):
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    d = 64
    vecs = rng.standard_normal((500, d))
    vecs[250:300] = vecs[200:250]  # duplicated passages force exact ties
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    store = VectorStore(d)
    for i, v in enumerate(vecs.astype(np.float32)):
        store.add(PassageRecord(i, f"d{i}", "g", (0, 1), "", v))
    mat = store.matrix.astype(np.float64)
    wrong = 0
    for qi in range(1000):
        q = mat[200 + qi % 50] if qi % 4 == 0 else rng.standard_normal(d)
        q = (q / np.linalg.norm(q)).astype(np.float32)
        k = int(rng.integers(1, 20))
        s = mat @ q.astype(np.float64) / (np.linalg.norm(mat, axis=1) * np.linalg.norm(q.astype(np.float64)))
        brute = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
        wrong += [r.passage_id for r in store.top_k(q, k)] != brute
    dt = time.perf_counter() - t
    ok = wrong == 0 and dt < 60
    assert acceptance(6, ok, f"{wrong}/1000 queries disagree with the brute-force scan (500 passages) ({dt:.1f}s)")


# -- 9: latency structure -------------------------------------------------------------


def test_c09_latency_structure(acceptance):
    t = time.perf_counter()
    model = Decoder(ModelConfig(window=2048, seed=9))
    comp = CompressionConfig.toy()
    W, eff = model.config.window, effective_window(2048, comp.chunk_length, comp.summary_count)
    sizes = [480, 960, 1440, 1920, 2400, 7680, 30_000, 60_000, eff, eff + 1]
    res = latency_bench(model, sizes, comp, runs=5, warmup=2)
    by = {(r["size"], r["mode"]): r for r in res.rows}
    both = [n for n in sizes if by[(n, "full")]["status"] == "ok"]
    faster = all(by[(n, "compressed")]["per_token_ms"] < by[(n, "full")]["per_token_ms"] for n in both)
    full_refuses = all(by[(n, "full")]["status"] == "refused" for n in sizes if n > W)
    served = [n for n in sizes if by[(n, "compressed")]["status"] == "ok"]
    # the question and the 16 generated tokens occupy 42 positions beside the summary rows
    overhead = W - max(by[(n, "compressed")]["prompt_rows"] for n in served)
    comp_serves = all(by[(n, "compressed")]["status"] == "ok" for n in sizes if n <= 60_000)
    comp_refuses = by[(eff + 1, "compressed")]["status"] == "refused"
    dt = time.perf_counter() - t
    ok = (len(both) >= 4 and all(n >= 4 * comp.chunk_length for n in both) and faster and full_refuses
          and comp_serves and comp_refuses and dt < 600)
    speed = ", ".join(f"{n}: {by[(n, 'full')]['speedup']:.2f}x" for n in both)
    assert acceptance(9, ok, f"compressed faster at every size with both modes ({speed}); full refuses all "
                             f"sizes > W={W}: {full_refuses}; compressed serves up to {max(served)} of effective "
                             f"window {eff} (prompt overhead {overhead} positions) ({dt:.1f}s)")


# -- 10: finetuning throughput ----------------------------------------------------------


def test_c10_finetune_throughput(acceptance):
    t = time.perf_counter()
    model = Decoder(ModelConfig(window=2048, seed=10))
    comp = CompressionConfig.toy()
    docs, qa = needle_group("tp", 6, 10, [8 * comp.chunk_length, 10 * comp.chunk_length])
    res = throughput_bench(model, {d.doc_id: d.text for d in docs}, _examples(qa),
                           TrainConfig(lr=1e-3, batch_size=4, grad_accum=1, epochs=1), comp, steps=4)
    by = {r["mode"]: r for r in res.rows}
    ratio = res.metadata["ratio"]
    dt = time.perf_counter() - t
    ok = ratio > 1 and dt < 600
    assert acceptance(10, ok, f"lloco_ft {by['lloco_ft']['samples_per_sec']:.1f} samples/s vs full_context_ft "
                              f"{by['full_context_ft']['samples_per_sec']:.1f} samples/s, ratio {ratio:.2f} "
                              f"(docs of 8-10 chunks) ({dt:.1f}s)")


# -- 11: persistence ------------------------------------------------------------------


def _flip(path: Path, offset: int = -5) -> None:
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0xFF
    path.write_bytes(bytes(raw))


def _rejects(fn, *errors) -> bool:
    try:
        fn()
    except errors:
        return True
    except Exception:
        return False
    return False


def test_c11_persistence(acceptance, tmp_path):
    t = time.perf_counter()
    model = Decoder(ModelConfig(seed=11))
    comp = CompressionConfig.toy()
    checks = {}

    save_checkpoint(model, tmp_path / "base")
    back = load_checkpoint(tmp_path / "base")
    checks["checkpoint round trip"] = all(back.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
    _flip(tmp_path / "base.bin")
    checks["checkpoint bit flip"] = _rejects(lambda: load_checkpoint(tmp_path / "base"), CorruptFileError)

    ad = init_adaptor("g", config=model.config, seed=3)
    for _, b in ad.pairs.values():
        b[...] = np.random.default_rng(3).standard_normal(b.shape)
    p = save_adaptor(ad, tmp_path / "g.lora")
    got = load_adaptor(p)
    checks["adaptor round trip"] = all(got.pairs[k][0].tobytes() == ad.pairs[k][0].tobytes()
                                       and got.pairs[k][1].tobytes() == ad.pairs[k][1].tobytes() for k in ad.pairs)
    raw = p.read_bytes()
    p.write_bytes(raw[:-9])
    checks["adaptor truncation"] = _rejects(lambda: load_adaptor(p), CorruptFileError)

    store = VectorStore.for_model(model)
    texts = ["ana has red. bo has tea. " * 8, "Mary walked to the river. " * 30, "The magic word for oslo is zebra. "]
    for i, text in enumerate(texts):
        store.add_document(f"d{i}", "g", text, compress_document(model, tokenize(text), comp, f"d{i}"))
    root = store.persist(tmp_path / "store")
    loaded = VectorStore.load(root, embed_fn=store.embed_fn, eager=True)
    checks["store round trip"] = (loaded.matrix.tobytes() == store.matrix.tobytes()
                                  and [r.meta() for r in loaded.records] == [r.meta() for r in store.records]
                                  and all(a.rows.tobytes() == b.rows.tobytes() for d in store.summaries
                                          for a, b in zip(store.doc_summaries(d), loaded.doc_summaries(d))))
    archive = root / "summaries" / "d1.sum"
    doc, cfg, summ = load_summaries(archive)
    checks["archive round trip"] = doc == "d1" and cfg == comp and len(summ) == math.ceil(len(texts[1]) / 120)
    _flip(archive)
    checks["archive bit flip"] = _rejects(lambda: load_summaries(archive), CorruptFileError)
    _flip(root / "embeddings.bin", 0)
    checks["store bit flip"] = _rejects(lambda: VectorStore.load(root), CorruptFileError)
    _flip(root / "embeddings.bin", 0)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["format_version"] = 99
    (root / "manifest.json").write_text(json.dumps(manifest))
    checks["store version"] = _rejects(lambda: VectorStore.load(root), VersionMismatchError)
    dt = time.perf_counter() - t
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and dt < 60
    assert acceptance(11, ok, f"{len(checks) - len(failed)}/{len(checks)} persistence checks hold"
                              + (f", failing: {failed}" if failed else "") + f" ({dt:.1f}s)")


# -- 12: serving contract ----------------------------------------------------------------


SERVE_DOCS = {
    "a1": ("A", "ana has red. bo has tea. cy has owl. " * 3),
    "a2": ("A", "Mary walked to the market in the morning. " * 6),
    "b1": ("B", "The magic word for paris is apple. " * 4),
}


def _post(url, body):
    req = urllib.request.Request(url, data=json.dumps(body).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def _serve(art, policy):
    srv = make_server("127.0.0.1:0", art, policy)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv, f"http://127.0.0.1:{srv.server_address[1]}/v1/query"


def test_c12_serving_contract(acceptance, tmp_path):
    t = time.perf_counter()
    model = Decoder(ModelConfig(seed=12))
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for d, (_, text) in SERVE_DOCS.items():
        (corpus / f"{d}.txt").write_text(text)
    preprocess(corpus, {d: g for d, (g, _) in SERVE_DOCS.items()}, tmp_path / "art", model)
    reg = AdaptorRegistry(tmp_path / "art" / "adaptors")
    for g in ("A", "B"):
        reg.register(init_adaptor(g, config=model.config, seed=1))
    art = Artifacts.load(tmp_path / "art")
    W = model.config.window
    problems = []
    strict, url = _serve(art, "strict")
    majority, murl = _serve(art, "majority")
    try:
        for mode in MODES:
            code, r = _post(url, {"question": "What does ana have?", "mode": mode, "doc_id": "a1"})
            if code != 200:
                problems.append(f"{mode}: HTTP {code}")
                continue
            used = r["summary_rows"] + r["context_tokens"] + r["question_tokens"] + 16
            expect = {
                "no_context": r["summary_rows"] == 0 and r["context_tokens"] == 0,
                "full_context": r["summary_rows"] == 0 and r["context_tokens"] > 0,
                "retrieval": r["summary_rows"] == 0 and r["context_tokens"] > 0 and r["retrieved_passage_ids"],
                "compressed_unfinetuned": r["summary_rows"] == 4 and r["context_tokens"] == 0
                and r["adaptor_id"] is None,
                "lloco": r["summary_rows"] == 4 and r["context_tokens"] == 0 and r["adaptor_id"] is not None,
            }[mode]
            if used > W or not expect:
                problems.append(f"{mode}: composition {r['summary_rows']}+{r['context_tokens']}+"
                                f"{r['question_tokens']}+16 vs W={W}")
        mixed = {"question": "has the magic word", "mode": "lloco", "top_k": 10}
        code_strict, _ = _post(url, mixed)
        code_major, body = _post(murl, mixed)
    finally:
        for srv in (strict, majority):
            srv.shutdown()
            srv.server_close()
    if code_strict != 409:
        problems.append(f"strict mixed-group request gave HTTP {code_strict}")
    if code_major != 200 or body.get("group_id") != "A":
        problems.append(f"majority mixed-group request gave HTTP {code_major} group {body.get('group_id')}")
    dt = time.perf_counter() - t
    ok = not problems and dt < 60
    assert acceptance(12, ok, f"5 modes over HTTP within the composition bound; strict mixed -> {code_strict}, "
                              f"majority -> {code_major} group {body.get('group_id')}"
                              + (f"; problems: {problems}" if problems else "") + f" ({dt:.1f}s)")


# -- 7-8: directional replication on the pretrained toy base ---------------------------


CACHE = Path(os.environ.get("LLOCO_CACHE", Path(__file__).resolve().parent.parent / ".lloco_cache"))
FT = dict(lr=1e-2, batch_size=8, grad_accum=1)


@pytest.fixture(scope="session")
def pretrained():
    """(base model, seconds its pretraining took). Cached by recipe digest."""
    recipe = toy_pretrain_recipe()
    stem = CACHE / f"base-{recipe_digest(recipe)}"
    meta = CACHE / f"base-{recipe_digest(recipe)}.meta.json"
    if meta.exists() and stem.with_suffix(".bin").exists():
        return load_checkpoint(stem), json.loads(meta.read_text())["seconds"]
    t = time.perf_counter()
    model = pretrain_toy_base(recipe)
    seconds = time.perf_counter() - t
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, stem)
    meta.write_text(json.dumps({"seconds": seconds, "recipe": recipe}, indent=1))
    return model, seconds


def _kv_artifacts(model, root, n_train=300, n_test=40):
    docs, qa = kv_group("kv", n_train + n_test, 7, n_pairs=2)
    corpus = root / "corpus"
    corpus.mkdir(parents=True)
    for d in docs:
        (corpus / f"{d.doc_id}.txt").write_text(d.text)
    preprocess(corpus, {d.doc_id: d.group_id for d in docs}, root / "art", model)
    art = Artifacts.load(root / "art")
    train_ids = {d.doc_id for d in docs[:n_train]}
    ex = _examples(qa)
    return art, [e for e in ex if e.doc_id in train_ids], [e for e in ex if e.doc_id not in train_ids]


def test_c07_kv_qa_direction(acceptance, pretrained, tmp_path):
    model, pretrain_s = pretrained
    t = time.perf_counter()
    art, train, test = _kv_artifacts(model, tmp_path)
    summ = {d: art.store.doc_summaries(d) for d in sorted({e.doc_id for e in train})}
    held_in = train[::5]
    before = qa_eval(held_in, "compressed_unfinetuned", art).metadata["aggregate"]["em"]
    adaptor = train_group(model, train, summ, TrainConfig(epochs=20, **FT), group_id="kv")
    AdaptorRegistry(tmp_path / "art" / "adaptors").register(adaptor, TrainConfig(epochs=20, **FT).to_dict())
    art = Artifacts.load(tmp_path / "art")
    em = {m: qa_eval(test, m, art).metadata["aggregate"]["em"] for m in ("lloco", "compressed_unfinetuned",
                                                                         "no_context")}
    after = qa_eval(held_in, "lloco", art).metadata["aggregate"]["em"]
    dt = time.perf_counter() - t + pretrain_s
    ok = (em["lloco"] - em["compressed_unfinetuned"] >= 30 and em["lloco"] - em["no_context"] >= 40
          and dt < 1800)
    assert acceptance(7, ok, f"held-out kv EM: lloco {em['lloco']:.1f}, compressed_unfinetuned "
                             f"{em['compressed_unfinetuned']:.1f}, no_context {em['no_context']:.1f} "
                             f"({len(test)} questions); held-in EM {before:.1f} -> {after:.1f} "
                             f"({dt:.0f}s incl. {pretrain_s:.0f}s pretraining)")


def test_c08_needle_direction(acceptance, pretrained):
    model, _ = pretrained
    t = time.perf_counter()
    comp = CompressionConfig.toy()
    lengths = [i * comp.chunk_length for i in range(1, 9)]
    depths = [round(i / 9, 4) for i in range(10)]
    docs, qa = needle_group("needle", 300, 8, lengths)  # training cities only
    summ = {d.doc_id: compress_document(model, tokenize(d.text), comp, d.doc_id) for d in docs}
    adaptor = train_group(model, _examples(qa), summ, TrainConfig(epochs=10, **FT), group_id="needle")
    art = Artifacts(model, VectorStore.for_model(model, comp), None, {"needle": adaptor})
    res = needle_grid(art, lengths, depths, ("compressed_unfinetuned", "lloco"), "random_city", seed=8,
                      group_id="needle", cities=EVAL_CITIES)
    rate = res.metadata["success_rate"]
    gap = rate["lloco"] - rate["compressed_unfinetuned"]
    dt = time.perf_counter() - t
    ok = gap > 20 and dt < 1200
    assert acceptance(8, ok, f"random-city needle grid 8x10 (lengths {lengths[0]}-{lengths[-1]}, held-out cities): "
                             f"finetuned {rate['lloco']:.1f}% vs unfinetuned {rate['compressed_unfinetuned']:.1f}%, "
                             f"gap {gap:.1f} points ({dt:.0f}s)")
