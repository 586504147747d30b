"""Command-line entry point: ``lloco <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bench, kernels
from .encoder import CompressionConfig
from .lora import AdaptorRegistry
from .model import Decoder, ModelConfig, load_checkpoint, save_checkpoint
from .serving import (MODES, POLICIES, Artifacts, ServeRequest, artifacts_dir, http_serve, preprocess,
                      read_group_map, serve_query)
from .synthetic import kv_group, needle_group, pretrain_corpus
from .train import (PretrainConfig, TrainConfig, TrainingExample, pretrain_base, read_examples, train_combined,
                    train_group, write_examples)

log = logging.getLogger("lloco")


def _sizes(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        mult = 1000 if part.endswith("k") else 1
        out.append(int(float(part.rstrip("k")) * mult))
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(a) -> int:
    cfg = ModelConfig(d_model=a.d_model, n_layers=a.n_layers, n_heads=a.n_heads, window=a.window, seed=a.seed)
    corpus = pretrain_corpus(a.docs, seed=a.seed + 1)
    model = pretrain_base(Decoder(cfg), corpus, a.steps, PretrainConfig(lr=a.lr, seed=a.seed),
                          log_path=Path(a.out).with_suffix(".csv") if a.log else None)
    save_checkpoint(model, a.out)
    print(f"wrote {a.out}.json / {a.out}.bin")
    return 0


def cmd_synth(a) -> int:
    out = Path(a.out)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    if a.task == "kv":
        docs, qa = kv_group(a.group, a.docs, a.seed)
    else:
        docs, qa = needle_group(a.group, a.docs, a.seed, _sizes(a.lengths))
    for d in docs:
        (out / "corpus" / f"{d.doc_id}.txt").write_text(d.text)
    groups_path = out / "groups.json"
    groups = json.loads(groups_path.read_text()) if groups_path.exists() else {}
    groups.update({d.doc_id: d.group_id for d in docs})
    groups_path.write_text(json.dumps(groups, indent=1, sort_keys=True))
    write_examples(out / f"{a.group}.jsonl", [TrainingExample(q.group_id, q.doc_id, q.question, q.answer) for q in qa])
    print(f"{len(docs)} docs, {len(qa)} QA pairs under {out}")
    return 0


def cmd_preprocess(a) -> int:
    model = load_checkpoint(a.base)
    rep = preprocess(a.corpus, read_group_map(a.groups), a.out, model, CompressionConfig.toy())
    print(json.dumps({"indexed": len(rep.indexed), "skipped": rep.skipped, "flagged": rep.flagged,
                      "passages": rep.passages, "summary_rows": rep.summary_rows, "tokens": rep.tokens}, indent=1))
    return 0


def cmd_finetune(a) -> int:
    art = Artifacts.load(a.out)
    examples = read_examples(a.train)
    docs = {ex.doc_id for ex in examples}
    summaries = {d: art.store.doc_summaries(d) for d in sorted(docs)}
    cfg = TrainConfig(lr=a.lr, epochs=a.epochs, batch_size=a.batch_size, grad_accum=a.grad_accum, rank=a.rank,
                      alpha=a.alpha, seed=a.seed, max_steps=a.max_steps)
    log_path = Path(a.out) / "adaptors" / f"{a.group or 'combined'}.train.csv"
    if a.combined:
        adaptor = train_combined(art.model, examples, summaries, cfg, log_path=log_path)
    else:
        examples = [ex for ex in examples if ex.group_id == a.group]
        if not examples:
            print(f"no training examples for group {a.group!r}", file=sys.stderr)
            return 2
        adaptor = train_group(art.model, examples, summaries, cfg, group_id=a.group, log_path=log_path)
    rec = AdaptorRegistry(Path(a.out) / "adaptors").register(adaptor, cfg.to_dict())
    print(f"registered {rec.adaptor_id} for group {rec.group_id} (v{rec.version})")
    return 0


def cmd_serve(a) -> int:
    art = Artifacts.load(artifacts_dir(a.artifacts))
    http_serve(a.addr, art, a.group_policy)
    return 0


def cmd_query(a) -> int:
    art = Artifacts.load(artifacts_dir(a.artifacts))
    req = ServeRequest(a.question, group_id=a.group, mode=a.mode, max_new_tokens=a.max_new_tokens, top_k=a.top_k,
                       doc_id=a.doc)
    print(json.dumps(serve_query(req, art, a.group_policy).to_dict(), indent=1))
    return 0


def cmd_eval(a) -> int:
    art = Artifacts.load(artifacts_dir(a.artifacts))
    res = bench.qa_eval(read_examples(a.dataset), a.mode, art, a.group_policy)
    bench.report(res, a.out)
    print(json.dumps(res.metadata["aggregate"]))
    return 0


def cmd_bench(a) -> int:
    if a.kind == "latency":
        if a.artifacts or os.environ.get("LLOCO_ARTIFACTS"):
            model = Artifacts.load(artifacts_dir(a.artifacts)).model
        else:
            model = Decoder(ModelConfig(window=a.window, seed=a.seed))
        res = bench.latency_bench(model, _sizes(a.sizes), CompressionConfig.toy(), runs=a.runs, seed=a.seed)
    elif a.kind == "needle":
        art = Artifacts.load(artifacts_dir(a.artifacts))
        variant = "random_city" if a.variant in ("city", "random_city") else "fixed"
        res = bench.needle_grid(art, _sizes(a.lengths), _floats(a.depths), a.modes.split(","), variant, a.seed,
                                group_id=a.group)
    else:
        model = Decoder(ModelConfig(window=a.window, seed=a.seed))
        docs, qa = needle_group("throughput", a.docs, a.seed, [a.doc_chunks * CompressionConfig.toy().chunk_length])
        texts = {d.doc_id: d.text for d in docs}
        ex = [TrainingExample(q.group_id, q.doc_id, q.question, q.answer) for q in qa]
        res = bench.throughput_bench(model, texts, ex, steps=a.steps)
    bench.report(res, a.out)
    print(f"wrote {a.out}/results.csv and results.json")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lloco", description="Compressed-context QA with per-group LoRA adaptors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pretrain the toy base model and summary slots")
    s.add_argument("--out", required=True, help="checkpoint path stem")
    s.add_argument("--steps", type=int, default=10_000)
    s.add_argument("--docs", type=int, default=4000)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--n-layers", type=int, default=2)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--window", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", action="store_true", help="write a loss CSV beside the checkpoint")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("synth", help="write a synthetic corpus, group map and QA file")
    s.add_argument("--task", choices=["kv", "needle"], default="kv")
    s.add_argument("--group", required=True)
    s.add_argument("--docs", type=int, default=100)
    s.add_argument("--lengths", default="240,480", help="needle haystack lengths")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("preprocess", help="index and compress a corpus into an artifact directory")
    s.add_argument("--corpus", required=True)
    s.add_argument("--groups", required=True, help="JSON {doc_id: group_id}")
    s.add_argument("--base", required=True, help="base checkpoint stem")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("finetune", help="train and register an adaptor")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--group")
    g.add_argument("--combined", action="store_true")
    s.add_argument("--train", required=True, help="QA jsonl")
    s.add_argument("--out", required=True, help="artifact directory")
    s.add_argument("--lr", type=float, default=2e-5)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--grad-accum", type=int, default=4)
    s.add_argument("--rank", type=int, default=8)
    s.add_argument("--alpha", type=float, default=16)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_finetune)

    def serving_args(s):
        s.add_argument("--artifacts", help="artifact directory (LLOCO_ARTIFACTS overrides)")
        s.add_argument("--group-policy", choices=POLICIES, default="strict")

    s = sub.add_parser("serve", help="HTTP service")
    serving_args(s)
    s.add_argument("--addr", default="127.0.0.1:8080")
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("query", help="answer one question")
    serving_args(s)
    s.add_argument("question")
    s.add_argument("--mode", choices=MODES, default="lloco")
    s.add_argument("--group")
    s.add_argument("--doc")
    s.add_argument("--max-new-tokens", type=int, default=16)
    s.add_argument("--top-k", type=int, default=5)
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("eval", help="QA evaluation in one mode")
    serving_args(s)
    s.add_argument("--dataset", required=True)
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--out", default="eval_out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="latency, needle or throughput benchmarks")
    s.add_argument("kind", choices=["latency", "needle", "throughput"])
    serving_args(s)
    s.add_argument("--out", default="bench_out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--window", type=int, default=2048, help="window of the random model (latency/throughput)")
    s.add_argument("--sizes", default="480,960,1440,1920,3840")
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--variant", default="fixed", choices=["fixed", "city", "random_city"])
    s.add_argument("--lengths", default="120,240,360,480,600,720,840,960")
    s.add_argument("--depths", default="0,0.11,0.22,0.33,0.44,0.56,0.67,0.78,0.89,1")
    s.add_argument("--modes", default="compressed_unfinetuned,lloco")
    s.add_argument("--group")
    s.add_argument("--docs", type=int, default=8)
    s.add_argument("--doc-chunks", type=int, default=8)
    s.add_argument("--steps", type=int, default=4)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.debug("kernel backend: %s", kernels.backend())
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
