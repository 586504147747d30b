"""Adaptor finetuning on compressed contexts, and toy base-model pretraining."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import CompressionConfig, SummaryEmbeddings, chunk_spans, prior_budget, stack_rows
from .errors import DivergenceError, LengthOverflowError
from .lora import LoraAdaptor, init_adaptor
from .model import (Decoder, EmbeddingSequence, ModelConfig, backward, embed_grad_into, forward_train,
                    masked_xent, tokenize)

log = logging.getLogger(__name__)

ANSWER_DELIM = "\nA:"
END = "\n"
END_TOKEN = ord(END)
RECALL_TOKEN = 1  # marks a reconstruction request during pretraining
CORPUS_VERSION = 3  # bump when the pretraining mix changes


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.0
    warmup_ratio: float = 0.04
    batch_size: int = 8
    grad_accum: int = 4
    epochs: int = 3
    rank: int = 8
    alpha: float = 16.0
    seed: int = 0
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def warmup_steps(self, total_steps: int) -> int:
        return math.ceil(self.warmup_ratio * total_steps)

    def total_steps(self, n_examples: int) -> int:
        steps = self.epochs * math.ceil(n_examples / self.batch_size) if n_examples else 0
        return steps if self.max_steps is None else min(steps, self.max_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainingExample:
    group_id: str
    doc_id: str
    question: str
    answer: str


def read_examples(path) -> list[TrainingExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(TrainingExample(d["group_id"], d["doc_id"], d["question"], d["answer"]))
    return out


def write_examples(path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(asdict(ex)) + "\n")


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


def prompt_tokens(question: str) -> list[int]:
    return tokenize(question + ANSWER_DELIM)


def build_training_sequence(summaries: Sequence[SummaryEmbeddings], question: str, answer: str,
                            window: int | None = None, d_model: int | None = None
                            ) -> tuple[EmbeddingSequence, list[int], np.ndarray]:
    """Prefix = summary rows in chunk order; tokens = question, delimiter, answer;
    the mask flags exactly the answer tokens."""
    ordered = sorted(summaries, key=lambda s: s.chunk_index)
    if not ordered and d_model is None:
        d_model = 1
    prefix = stack_rows(ordered, d_model)
    q = prompt_tokens(question)
    a = tokenize(answer)
    tokens = q + a
    mask = np.zeros(len(tokens), dtype=bool)
    mask[len(q) :] = True
    if window is not None and len(prefix) + len(tokens) > window:
        raise LengthOverflowError(f"{len(prefix)} summary rows + {len(tokens)} tokens exceeds window {window}")
    return prefix, tokens, mask


@dataclass
class TrainSequence:
    prefix: np.ndarray  # (P, d) rows fed before the tokens
    tokens: list[int]
    mask: np.ndarray  # per token: contributes to the loss

    def __len__(self) -> int:
        return len(self.prefix) + len(self.tokens)


def _targets(seq: TrainSequence) -> tuple[np.ndarray, np.ndarray]:
    P = len(seq.prefix)
    T = len(seq)
    targets = np.zeros(T, dtype=np.int64)
    use = np.zeros(T, dtype=bool)
    for j, t in enumerate(seq.tokens):
        row = P + j - 1
        if seq.mask[j] and row >= 0:
            targets[row] = t
            use[row] = True
    return targets, use


def sequence_loss(model: Decoder, seq: TrainSequence, lora: LoraAdaptor | None = None,
                  lora_grads: dict | None = None, param_grads: dict | None = None) -> float:
    """Masked next-token loss of one sequence; accumulates gradients when dicts are given."""
    params, cfg = model.params, model.config
    tok = params["tok_emb"][np.asarray(seq.tokens, dtype=np.int64)]
    x = np.concatenate([seq.prefix.astype(tok.dtype, copy=False), tok]) if len(seq.prefix) else tok
    logits, _, cache = forward_train(params, cfg, x, lora)
    targets, use = _targets(seq)
    loss, dl = masked_xent(logits, targets, use)
    if lora_grads is not None or param_grads is not None:
        dx = backward(params, cfg, cache, dl, None, lora, param_grads, lora_grads)
        if param_grads is not None:
            embed_grad_into(param_grads, params["tok_emb"].shape, seq.tokens, dx[len(seq.prefix) :])
    return loss


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warm = cfg.warmup_steps(total_steps)
    if step < warm:
        return cfg.lr * step / warm
    if total_steps == warm:
        return cfg.lr
    frac = (step - warm) / (total_steps - warm)
    return max(0.0, cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac)))


class AdamW:
    """Decoupled-weight-decay Adam with 64-bit moment estimates; updates arrays in place."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g.astype(np.float64)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * p
            p -= (lr * upd).astype(p.dtype)


def _lora_param_view(adaptor: LoraAdaptor) -> dict:
    view = {}
    for key, (a, b) in adaptor.pairs.items():
        view[key + ("A",)] = a
        view[key + ("B",)] = b
    return view


class CSVLog:
    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        self.t0 = time.perf_counter()

    def add(self, step: int, loss: float, lr: float) -> None:
        self.rows.append({"step": step, "loss": loss, "lr": lr, "wall_clock": time.perf_counter() - self.t0})

    def flush(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "wall_clock"])
            w.writeheader()
            w.writerows(self.rows)


def fit_adaptor(model: Decoder, seqs: Sequence[TrainSequence], cfg: TrainConfig, adaptor: LoraAdaptor,
                log_path=None, logger: CSVLog | None = None) -> LoraAdaptor:
    """Train ``adaptor`` in place on ``seqs`` with the base weights frozen."""
    total = cfg.total_steps(len(seqs))
    view = _lora_param_view(adaptor)
    opt = AdamW(view, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    logger = logger or CSVLog(log_path)
    micro = max(1, math.ceil(cfg.batch_size / max(1, cfg.grad_accum)))
    step = 0
    while step < total:
        order = rng.permutation(len(seqs))
        for b0 in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = order[b0 : b0 + cfg.batch_size]
            grads: dict = {}
            loss = 0.0
            for m0 in range(0, len(batch), micro):
                for i in batch[m0 : m0 + micro]:
                    loss += sequence_loss(model, seqs[i], adaptor, lora_grads=grads)
            loss /= len(batch)
            for g in grads.values():
                g /= len(batch)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(f"non-finite loss at step {step}")
            lr = lr_at(step, cfg, total)
            opt.step(grads, lr)
            logger.add(step, loss, lr)
            step += 1
    logger.flush()
    adaptor.meta.setdefault("train", {})
    adaptor.meta["train"] = {"steps": total, "examples": len(seqs), "config": cfg.to_dict()}
    return adaptor


def lloco_sequences(examples: Sequence[TrainingExample], summaries: dict[str, list[SummaryEmbeddings]],
                    model: Decoder) -> list[TrainSequence]:
    out = []
    for ex in examples:
        prefix, tokens, mask = build_training_sequence(summaries[ex.doc_id], ex.question, ex.answer + END,
                                                       window=model.config.window, d_model=model.config.d_model)
        out.append(TrainSequence(prefix.rows, tokens, mask))
    return out


def text_context_sequences(examples: Sequence[TrainingExample], doc_tokens: dict[str, list[int]],
                           model: Decoder) -> list[TrainSequence]:
    """Full-context finetuning sequences: raw document tokens precede the question."""
    out = []
    d = model.config.d_model
    for ex in examples:
        q = prompt_tokens(ex.question)
        a = tokenize(ex.answer + END)
        ctx = list(doc_tokens[ex.doc_id])
        tokens = ctx + q + a
        if len(tokens) > model.config.window:
            raise LengthOverflowError(f"{len(tokens)} tokens exceeds window {model.config.window}")
        mask = np.zeros(len(tokens), dtype=bool)
        mask[len(ctx) + len(q) :] = True
        out.append(TrainSequence(np.zeros((0, d), dtype=model.dtype), tokens, mask))
    return out


def train_group(model: Decoder, examples: Sequence[TrainingExample], summaries: dict[str, list[SummaryEmbeddings]],
                cfg: TrainConfig, group_id: str | None = None, log_path=None,
                adaptor: LoraAdaptor | None = None) -> LoraAdaptor:
    """One adaptor for one document group, trained on (compressed context, question, answer)."""
    groups = {ex.group_id for ex in examples}
    if group_id is None:
        if len(groups) != 1:
            raise ValueError(f"examples span groups {sorted(groups)}; pass group_id or use train_combined")
        group_id = next(iter(groups))
    if adaptor is None:
        adaptor = init_adaptor(group_id, r=cfg.rank, alpha=cfg.alpha, seed=cfg.seed, config=model.config,
                               dtype=model.dtype)
    seqs = lloco_sequences(examples, summaries, model)
    return fit_adaptor(model, seqs, cfg, adaptor, log_path=log_path)


def sample_capped(examples: Sequence[TrainingExample], caps: dict[str, int | None], seed: int) -> list[TrainingExample]:
    """Per-group subsample without replacement (cap None or missing = keep all), original order kept."""
    by_group: dict[str, list[int]] = {}
    for i, ex in enumerate(examples):
        by_group.setdefault(ex.group_id, []).append(i)
    rng = random.Random(seed)
    keep: list[int] = []
    for g in sorted(by_group):
        idx = by_group[g]
        cap = caps.get(g)
        if cap is not None and cap < len(idx):
            idx = rng.sample(idx, cap)
        keep += idx
    return [examples[i] for i in sorted(keep)]


def train_combined(model: Decoder, examples: Sequence[TrainingExample],
                   summaries: dict[str, list[SummaryEmbeddings]], cfg: TrainConfig,
                   caps: dict[str, int | None] | None = None, group_id: str = "combined", log_path=None) -> LoraAdaptor:
    chosen = sample_capped(examples, caps or {}, cfg.seed)
    return train_group(model, chosen, summaries, cfg, group_id=group_id, log_path=log_path)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn: Callable[[], float], grads: dict, params: dict, epsilon: float = 1e-6,
               n_samples: int = 50, seed: int = 0, floor: float = 1e-10) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``params`` maps the same keys as ``grads`` to the live arrays ``loss_fn``
    reads; entries are perturbed in place and restored. Entries whose analytic
    and numeric gradients are both below ``floor`` count as agreeing.
    """
    rng = np.random.default_rng(seed)
    keys = sorted(params, key=str)
    sizes = np.array([params[k].size for k in keys], dtype=np.float64)
    worst = 0.0
    for _ in range(n_samples):
        k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        arr = params[k]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        old = arr[idx]
        arr[idx] = old + epsilon
        up = loss_fn()
        arr[idx] = old - epsilon
        down = loss_fn()
        arr[idx] = old
        num = (up - down) / (2 * epsilon)
        ana = float(grads[k][idx]) if k in grads else 0.0
        denom = max(abs(num), abs(ana))
        if denom < floor:
            continue
        worst = max(worst, abs(num - ana) / denom)
    return worst


def adaptor_grad_check(model: Decoder, adaptor: LoraAdaptor, seqs: Sequence[TrainSequence],
                       epsilon: float = 1e-4, n_samples: int = 50, seed: int = 0) -> float:
    """Finite-difference check of the adaptor gradient of the mean sequence loss, in float64.

    The default step of 1e-4 keeps roundoff in the differences well below the
    1e-4 tolerance; truncation error at that step is O(1e-8).
    """
    m64 = model.astype(np.float64)
    ad = adaptor.copy()
    ad.pairs = {k: (a.astype(np.float64), b.astype(np.float64)) for k, (a, b) in ad.pairs.items()}
    s64 = [TrainSequence(s.prefix.astype(np.float64), s.tokens, s.mask) for s in seqs]

    def loss_fn():
        return sum(sequence_loss(m64, s, ad) for s in s64) / len(s64)

    grads: dict = {}
    for s in s64:
        sequence_loss(m64, s, ad, lora_grads=grads)
    for g in grads.values():
        g /= len(s64)
    return grad_check(loss_fn, grads, _lora_param_view(ad), epsilon, n_samples, seed)


# ---------------------------------------------------------------------------
# base pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.04
    batch_size: int = 8
    max_chunks: int = 3
    lm_prob: float = 0.2
    span_prob: float = 0.5  # share of reconstruction samples that target one sentence
    seed: int = 0
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)


def _compress_train(params, mcfg: ModelConfig, comp: CompressionConfig, chunks: list[list[int]]):
    """Differentiable recursive compression; returns all summary rows and per-pass records."""
    k = comp.summary_count
    rows = np.zeros((0, mcfg.d_model), dtype=params["tok_emb"].dtype)
    passes = []
    for chunk in chunks:
        keep = prior_budget(comp, mcfg.window, len(chunk))
        keep = min(keep, len(rows))
        start = len(rows) - keep
        x = np.concatenate([rows[start:], params["tok_emb"][np.asarray(chunk)], params["slot_emb"][:k]])
        _, hf, cache = forward_train(params, mcfg, x)
        rows = np.concatenate([rows, hf[-k:]])
        passes.append((cache, start, keep, chunk))
    return rows, passes


def _compress_backward(params, mcfg, comp, passes, d_rows, grads) -> None:
    k = comp.summary_count
    for i in reversed(range(len(passes))):
        cache, start, keep, chunk = passes[i]
        T = cache["T"]
        dh = np.zeros((T, mcfg.d_model), dtype=d_rows.dtype)
        dh[-k:] = d_rows[i * k : (i + 1) * k]
        dx = backward(params, mcfg, cache, None, dh, None, grads)
        d_rows[start : start + keep] += dx[:keep]
        embed_grad_into(grads, params["tok_emb"].shape, chunk, dx[keep : keep + len(chunk)])
        if "slot_emb" not in grads:
            grads["slot_emb"] = np.zeros_like(params["slot_emb"])
        grads["slot_emb"][:k] += dx[-k:]


def sentence_spans(tokens: Sequence[int], starts_sentence: bool = False) -> list[tuple[int, int]]:
    """Spans of the complete sentences in ``tokens``: each ends with ". " and the
    next starts after the space. Text before the first boundary counts only when
    ``starts_sentence``."""
    out, start = [], 0 if starts_sentence else None
    for i in range(len(tokens) - 1):
        if tokens[i] == 46 and tokens[i + 1] == 32:  # ". "
            if start is not None:
                out.append((start, i + 1))
            start = i + 2
    if start is not None and len(tokens) and tokens[-1] == 46 and start < len(tokens):
        out.append((start, len(tokens)))
    return out


def recon_step(model: Decoder, comp: CompressionConfig, tokens: list[int], target: int, grads: dict | None,
               use_context: bool = True, span: tuple[int, int] | None = None) -> float:
    """Compress the chunks of ``tokens`` and score reconstructing chunk ``target``
    (or only ``span`` of it) from the summaries."""
    params, mcfg = model.params, model.config
    spans = chunk_spans(len(tokens), comp.chunk_length)
    chunks = [tokens[s:e] for s, e in spans]
    piece = chunks[target] if span is None else chunks[target][span[0] : span[1]]
    tgt = [RECALL_TOKEN] + piece
    mask = np.ones(len(tgt), dtype=bool)
    mask[0] = False
    if not use_context:
        return sequence_loss(model, TrainSequence(np.zeros((0, mcfg.d_model), model.dtype), tgt, mask),
                             param_grads=grads)
    rows, passes = _compress_train(params, mcfg, comp, chunks)
    room = mcfg.window - len(tgt)
    if room < len(rows):
        raise LengthOverflowError("summary rows plus target chunk exceed the window")
    tok = params["tok_emb"][np.asarray(tgt)]
    x = np.concatenate([rows, tok])
    logits, _, cache = forward_train(params, mcfg, x)
    seq = TrainSequence(rows, tgt, mask)
    targets, use = _targets(seq)
    loss, dl = masked_xent(logits, targets, use)
    if grads is not None:
        dx = backward(params, mcfg, cache, dl, None, None, grads)
        embed_grad_into(grads, params["tok_emb"].shape, tgt, dx[len(rows) :])
        d_rows = dx[: len(rows)].copy()
        _compress_backward(params, mcfg, comp, passes, d_rows, grads)
    return loss


def pretrain_base(model: Decoder, corpus: Sequence[str], steps: int, cfg: PretrainConfig | None = None,
                  comp: CompressionConfig | None = None, log_path=None) -> Decoder:
    """Train a copy of ``model`` (all weights and summary slots) on a mix of plain
    next-token prediction and compress-then-reconstruct."""
    cfg = cfg or PretrainConfig()
    comp = comp or CompressionConfig.toy()
    out = model.copy()
    if steps <= 0:
        return out
    docs = [tokenize(t) for t in corpus]
    docs = [d for d in docs if d]
    tc = TrainConfig(lr=cfg.lr, warmup_ratio=cfg.warmup_ratio)
    opt = AdamW(out.params, weight_decay=cfg.weight_decay)
    rng = random.Random(cfg.seed)
    logger = CSVLog(log_path)
    L = comp.chunk_length
    for step in range(steps):
        grads: dict = {}
        loss = 0.0
        for _ in range(cfg.batch_size):
            doc = rng.choice(docs)
            if rng.random() < cfg.lm_prob:
                s = rng.randrange(0, max(1, len(doc) - L + 1))
                window = doc[s : s + L]
                mask = np.ones(len(window), dtype=bool)
                mask[0] = False
                loss += sequence_loss(out, TrainSequence(np.zeros((0, out.config.d_model), out.dtype), window, mask),
                                      param_grads=grads)
            else:
                doc = doc[: L * cfg.max_chunks]
                n_chunks = len(chunk_spans(len(doc), L))
                target = rng.randrange(n_chunks)
                span = None
                if rng.random() < cfg.span_prob:
                    sents = sentence_spans(doc[target * L : (target + 1) * L], target == 0)
                    span = rng.choice(sents) if sents else None
                loss += recon_step(out, comp, doc, target, grads, span=span)
        loss /= cfg.batch_size
        for g in grads.values():
            g /= cfg.batch_size
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite pretraining loss at step {step}")
        lr = lr_at(step, tc, steps)
        opt.step(grads, lr)
        logger.add(step, loss, lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("pretrain step %d loss %.4f lr %.2e", step, loss, lr)
    logger.flush()
    return out


def toy_pretrain_recipe(steps: int = 10_000, seed: int = 0) -> dict:
    """Everything that determines the pretrained toy base, as plain data."""
    return {
        "model": ModelConfig(seed=seed).to_dict(),
        "pretrain": PretrainConfig(lr=2e-3, seed=seed, log_every=0).to_dict(),
        "steps": steps,
        "corpus": {"n_docs": 4000, "seed": seed + 1, "version": CORPUS_VERSION},
    }


def recipe_digest(recipe: dict) -> str:
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:12]


def pretrain_toy_base(recipe: dict | None = None, log_path=None) -> Decoder:
    from .synthetic import pretrain_corpus

    recipe = recipe or toy_pretrain_recipe()
    corpus = pretrain_corpus(recipe["corpus"]["n_docs"], recipe["corpus"]["seed"])
    cfg = PretrainConfig(**recipe["pretrain"])
    return pretrain_base(Decoder(ModelConfig.from_dict(recipe["model"])), corpus, recipe["steps"], cfg,
                         log_path=log_path)


def reconstruction_gap(model: Decoder, corpus: Sequence[str], comp: CompressionConfig,
                       max_chunks: int = 3) -> tuple[float, float]:
    """Mean reconstruction loss of the last chunk with and without compressed context."""
    with_ctx, without = [], []
    L = comp.chunk_length
    for text in corpus:
        doc = tokenize(text)[: L * max_chunks]
        if not doc:
            continue
        last = len(chunk_spans(len(doc), L)) - 1
        with_ctx.append(recon_step(model, comp, doc, last, None, use_context=True))
        without.append(recon_step(model, comp, doc, last, None, use_context=False))
    return float(np.mean(with_ctx)), float(np.mean(without))
