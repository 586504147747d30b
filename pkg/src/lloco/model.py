"""Small decoder-only transformer over byte tokens with an embedding-prefix input.

Pre-norm blocks (RMSNorm), rotary positions over every row including prefix
rows, GELU MLP, and an output head tied to the token embedding table. Query
and value projections accept optional low-rank deltas.

Two forward paths exist. ``Decoder.forward``/``generate`` run the inference
path through :mod:`lloco.kernels` with a preallocated KV buffer. ``forward_train``
and ``backward`` run a plain numpy path that keeps the activations needed for
the hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import LengthOverflowError
from .fileformat import read_sidecar, write_sidecar

SUMMARY = 0
TOKEN = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    window: int = 256
    rope_base: float = 10000.0
    seed: int = 0
    n_slots: int = 4
    ff_mult: int = 4
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.window) < 1:
            raise ValueError("sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str | bytes) -> list[int]:
    """Byte-level tokens. ``str`` is UTF-8 encoded with surrogateescape so any
    output of :func:`detokenize` maps back to the original bytes."""
    if isinstance(text, str):
        text = text.encode("utf-8", "surrogateescape")
    return list(text)


def detokenize(tokens: Iterable[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", "surrogateescape")


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingSequence:
    rows: np.ndarray
    origin: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ValueError("rows must be a 2-D array")
        if self.origin is None:
            self.origin = np.full(len(self.rows), SUMMARY, dtype=np.uint8)
        self.origin = np.asarray(self.origin, dtype=np.uint8)
        if self.origin.shape != (len(self.rows),):
            raise ValueError("one origin tag per row")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def empty(cls, d_model: int, dtype=np.float32) -> "EmbeddingSequence":
        return cls(np.zeros((0, d_model), dtype=dtype))

    @classmethod
    def concat(cls, seqs: Sequence["EmbeddingSequence"], d_model: int | None = None) -> "EmbeddingSequence":
        seqs = list(seqs)
        if not seqs:
            if d_model is None:
                raise ValueError("d_model needed to concatenate zero sequences")
            return cls.empty(d_model)
        dims = {s.dim for s in seqs}
        if len(dims) != 1:
            raise ValueError(f"mixed row dimensions {sorted(dims)}")
        return cls(np.concatenate([s.rows for s in seqs]), np.concatenate([s.origin for s in seqs]))


@dataclass
class DecoderOutput:
    logits: np.ndarray
    final_hidden: np.ndarray

    def __len__(self) -> int:
        return len(self.logits)


def hidden_at(positions: Sequence[int], output: DecoderOutput) -> EmbeddingSequence:
    n = len(output.final_hidden)
    idx = np.asarray(list(positions), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"positions out of range for length {n}")
    return EmbeddingSequence(output.final_hidden[idx].copy())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_model * cfg.ff_mult
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab_size, d), "slot_emb": (cfg.n_slots, d)}
    for l in range(cfg.n_layers):
        shapes[f"h{l}.norm1"] = (d,)
        for p in ("wq", "wk", "wv", "wo"):
            shapes[f"h{l}.{p}"] = (d, d)
        shapes[f"h{l}.norm2"] = (d,)
        shapes[f"h{l}.w1"] = (f, d)
        shapes[f"h{l}.w2"] = (d, f)
    shapes["norm_f"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if "norm" in name:
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(("wo", "w2")):
            params[name] = (rng.standard_normal(shape) * resid_std).astype(dtype)
        else:
            params[name] = (rng.standard_normal(shape) * 0.02).astype(dtype)
    return params


_ROPE_CACHE: dict = {}


def rope_tables(cfg: ModelConfig, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (cfg.head_dim, cfg.rope_base, np.dtype(dtype).str)
    cos, sin = _ROPE_CACHE.get(key, (None, None))
    if cos is None or len(cos) < n:
        size = max(n, cfg.window)
        half = cfg.head_dim // 2
        inv = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
        ang = np.arange(size, dtype=np.float64)[:, None] * inv[None, :]
        ang = np.concatenate([ang, ang], axis=1)
        cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
        _ROPE_CACHE[key] = (cos, sin)
    return cos, sin


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y):
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def _rope(x, cos, sin):
    # x: (H, T, hd); cos/sin: (T, hd)
    return x * cos + _rotate_half(x) * sin


def _split_heads(x, H):
    T, d = x.shape
    return x.reshape(T, H, d // H).transpose(1, 0, 2)


def _merge_heads(x):
    H, T, hd = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * hd)


def _lora_pair(lora, layer: int, proj: str):
    if lora is None:
        return None
    return lora.pairs.get((layer, proj))


def _proj(h, w, pair, scale):
    y = h @ w.T
    if pair is not None:
        a, b = pair
        y = y + scale * ((h @ a.T) @ b.T)
    return y


# ---------------------------------------------------------------------------
# inference path
# ---------------------------------------------------------------------------


class KVCache:
    """Per-request key/value buffers, one (H, W, hd) pair per layer."""

    def __init__(self, cfg: ModelConfig, dtype, capacity: int | None = None):
        cap = capacity or cfg.window
        shape = (cfg.n_heads, cap, cfg.head_dim)
        self.k = [np.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)]
        self.length = 0


class Decoder:
    def __init__(self, config: ModelConfig | None = None, params: dict[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config)
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"parameter {name!r} missing or misshapen (want {shape})")

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "Decoder":
        return Decoder(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Decoder":
        return Decoder(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- embedding -------------------------------------------------------
    def embed(self, tokens: Sequence[int]) -> EmbeddingSequence:
        ids = np.asarray(list(tokens), dtype=np.int64)
        rows = self.params["tok_emb"][ids]
        return EmbeddingSequence(rows, np.full(len(ids), TOKEN, dtype=np.uint8))

    def assemble(self, prefix: EmbeddingSequence | None, tokens: Sequence[int]) -> np.ndarray:
        tok = self.embed(tokens).rows
        if prefix is None or len(prefix) == 0:
            return tok
        if prefix.dim != self.config.d_model:
            raise ValueError(f"prefix rows have dim {prefix.dim}, model has {self.config.d_model}")
        return np.concatenate([prefix.rows.astype(self.dtype, copy=False), tok])

    # -- core --------------------------------------------------------------
    def _run(self, x: np.ndarray, cache: KVCache, lora=None) -> np.ndarray:
        """Process rows ``x`` at positions cache.length.., append their keys and
        values to ``cache``, return final (post-norm) hidden states."""
        cfg, p = self.config, self.params
        n = len(x)
        start = cache.length
        end = start + n
        if end > cache.k[0].shape[1]:
            raise LengthOverflowError(f"sequence of {end} rows exceeds window {cache.k[0].shape[1]}")
        cos, sin = rope_tables(cfg, end, x.dtype)
        cos, sin = cos[start:end], sin[start:end]
        scale = lora.scale if lora is not None else 0.0
        H = cfg.n_heads
        for l in range(cfg.n_layers):
            h = kernels.rms_norm(x, p[f"h{l}.norm1"], cfg.norm_eps)
            q = _split_heads(_proj(h, p[f"h{l}.wq"], _lora_pair(lora, l, "query"), scale), H)
            k = _split_heads(h @ p[f"h{l}.wk"].T, H)
            v = _split_heads(_proj(h, p[f"h{l}.wv"], _lora_pair(lora, l, "value"), scale), H)
            cache.k[l][:, start:end] = _rope(k, cos, sin)
            cache.v[l][:, start:end] = v
            o = kernels.attention(_rope(q, cos, sin), cache.k[l][:, :end], cache.v[l][:, :end], start)
            x = x + _merge_heads(o) @ p[f"h{l}.wo"].T
            h2 = kernels.rms_norm(x, p[f"h{l}.norm2"], cfg.norm_eps)
            x = x + kernels.gelu(h2 @ p[f"h{l}.w1"].T) @ p[f"h{l}.w2"].T
        cache.length = end
        return kernels.rms_norm(x, p["norm_f"], cfg.norm_eps)

    def forward_embeddings(self, x: np.ndarray, adaptor=None) -> DecoderOutput:
        if len(x) > self.config.window:
            raise LengthOverflowError(f"input of {len(x)} rows exceeds window {self.config.window}")
        cache = KVCache(self.config, x.dtype, capacity=max(len(x), 1))
        hidden = self._run(x, cache, adaptor)
        return DecoderOutput(hidden @ self.params["tok_emb"].T, hidden)

    def forward(self, prefix: EmbeddingSequence | None, tokens: Sequence[int], adaptor=None) -> DecoderOutput:
        n = (0 if prefix is None else len(prefix)) + len(tokens)
        if n > self.config.window:
            raise LengthOverflowError(f"prefix+tokens = {n} exceeds window {self.config.window}")
        return self.forward_embeddings(self.assemble(prefix, tokens), adaptor)

    def generate(
        self,
        prefix: EmbeddingSequence | None,
        prompt_tokens: Sequence[int],
        max_new: int,
        mode: str = "greedy",
        adaptor=None,
        stop_token: int | None = None,
        return_logits: bool = False,
    ):
        if mode != "greedy":
            raise ValueError(f"unsupported decoding mode {mode!r}")
        if max_new < 0:
            raise ValueError("max_new must be non-negative")
        x = self.assemble(prefix, prompt_tokens)
        if len(x) + max_new > self.config.window:
            raise LengthOverflowError(
                f"prompt of {len(x)} rows + {max_new} new tokens exceeds window {self.config.window}"
            )
        out: list[int] = []
        step_logits = []
        if max_new == 0:
            return (out, step_logits) if return_logits else out
        if len(x) == 0:
            raise ValueError("generation needs at least one prefix row or prompt token")
        emb = self.params["tok_emb"]
        cache = KVCache(self.config, x.dtype, capacity=len(x) + max_new)
        hidden = self._run(x, cache, adaptor)
        logits = hidden[-1] @ emb.T
        for i in range(max_new):
            step_logits.append(logits)
            t = int(np.argmax(logits))  # first maximum, i.e. lowest id on ties
            out.append(t)
            if t == stop_token or i == max_new - 1:
                break
            hidden = self._run(emb[t : t + 1], cache, adaptor)
            logits = hidden[-1] @ emb.T
        return (out, step_logits) if return_logits else out


# ---------------------------------------------------------------------------
# training path
# ---------------------------------------------------------------------------


def _rms_fwd(x, g, eps):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    n = x / r
    return n * g, (n, r)


def _rms_bwd(dy, g, saved):
    n, r = saved
    dg = np.sum(dy * n, axis=0)
    dn = dy * g
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
    return dx, dg


def forward_train(params: dict, cfg: ModelConfig, x: np.ndarray, lora=None):
    """Forward over input rows ``x`` (T, d) keeping activations.

    Returns ``(logits, final_hidden, cache)``.
    """
    T = len(x)
    if T > cfg.window:
        raise LengthOverflowError(f"input of {T} rows exceeds window {cfg.window}")
    H, hd = cfg.n_heads, cfg.head_dim
    cos, sin = rope_tables(cfg, T, x.dtype)
    cos, sin = cos[:T], sin[:T]
    scale = lora.scale if lora is not None else 0.0
    sm_scale = x.dtype.type(1.0 / math.sqrt(hd))
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    layers = []
    for l in range(cfg.n_layers):
        c = {"x": x}
        h, c["rms1"] = _rms_fwd(x, params[f"h{l}.norm1"], cfg.norm_eps)
        c["h"] = h
        for proj, wname in (("query", "wq"), ("value", "wv")):
            pair = _lora_pair(lora, l, proj)
            if pair is not None:
                c["z_" + proj] = h @ pair[0].T
        q = _split_heads(_proj(h, params[f"h{l}.wq"], _lora_pair(lora, l, "query"), scale), H)
        k = _split_heads(h @ params[f"h{l}.wk"].T, H)
        v = _split_heads(_proj(h, params[f"h{l}.wv"], _lora_pair(lora, l, "value"), scale), H)
        qr, kr = _rope(q, cos, sin), _rope(k, cos, sin)
        s = np.matmul(qr, kr.transpose(0, 2, 1)) * sm_scale
        s[:, mask] = -np.inf
        s -= s.max(axis=-1, keepdims=True)
        pr = np.exp(s)
        pr /= pr.sum(axis=-1, keepdims=True)
        o = _merge_heads(np.matmul(pr, v))
        c.update(qr=qr, kr=kr, v=v, p=pr, o=o)
        x = x + o @ params[f"h{l}.wo"].T
        c["x2"] = x
        h2, c["rms2"] = _rms_fwd(x, params[f"h{l}.norm2"], cfg.norm_eps)
        u = h2 @ params[f"h{l}.w1"].T
        a = kernels.gelu(u)
        c.update(h2=h2, u=u, a=a)
        x = x + a @ params[f"h{l}.w2"].T
        layers.append(c)
    hf, rmsf = _rms_fwd(x, params["norm_f"], cfg.norm_eps)
    logits = hf @ params["tok_emb"].T
    cache = {"layers": layers, "hf": hf, "rmsf": rmsf, "cos": cos, "sin": sin, "T": T}
    return logits, hf, cache


def _accum(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def backward(params: dict, cfg: ModelConfig, cache: dict, dlogits=None, dhidden=None, lora=None,
             param_grads: dict | None = None, lora_grads: dict | None = None) -> np.ndarray:
    """Backpropagate through one :func:`forward_train` call.

    ``dlogits`` (T, V) and ``dhidden`` (T, d) are upstream gradients on the
    logits and on the final hidden states. Parameter gradients are added into
    ``param_grads`` (skipped when None); adaptor gradients into ``lora_grads``
    keyed ``(layer, proj, "A"|"B")``. Returns the gradient on the input rows.
    """
    H = cfg.n_heads
    hd = cfg.head_dim
    T = cache["T"]
    cos, sin = cache["cos"], cache["sin"]
    emb = params["tok_emb"]
    want_p = param_grads is not None
    scale = lora.scale if lora is not None else 0.0
    sm_scale = 1.0 / math.sqrt(hd)

    dhf = np.zeros((T, cfg.d_model), dtype=emb.dtype)
    if dlogits is not None:
        dhf += dlogits @ emb
        if want_p:
            _accum(param_grads, "tok_emb", dlogits.T @ cache["hf"])
    if dhidden is not None:
        dhf += dhidden
    dx, dg = _rms_bwd(dhf, params["norm_f"], cache["rmsf"])
    if want_p:
        _accum(param_grads, "norm_f", dg)

    for l in reversed(range(cfg.n_layers)):
        c = cache["layers"][l]
        # MLP
        if want_p:
            _accum(param_grads, f"h{l}.w2", dx.T @ c["a"])
        da = dx @ params[f"h{l}.w2"]
        du = da * kernels.gelu_grad(c["u"])
        if want_p:
            _accum(param_grads, f"h{l}.w1", du.T @ c["h2"])
        dh2 = du @ params[f"h{l}.w1"]
        dxr, dg = _rms_bwd(dh2, params[f"h{l}.norm2"], c["rms2"])
        if want_p:
            _accum(param_grads, f"h{l}.norm2", dg)
        dx = dx + dxr
        # attention
        if want_p:
            _accum(param_grads, f"h{l}.wo", dx.T @ c["o"])
        do = _split_heads(dx @ params[f"h{l}.wo"], H)
        pr = c["p"]
        dp = np.matmul(do, c["v"].transpose(0, 2, 1))
        dv = np.matmul(pr.transpose(0, 2, 1), do)
        ds = pr * (dp - np.sum(dp * pr, axis=-1, keepdims=True)) * sm_scale
        dqr = np.matmul(ds, c["kr"])
        dkr = np.matmul(ds.transpose(0, 2, 1), c["qr"])
        dq = _merge_heads(dqr * cos + _rotate_half_t(dqr * sin))
        dk = _merge_heads(dkr * cos + _rotate_half_t(dkr * sin))
        dv = _merge_heads(dv)
        h = c["h"]
        dh = dq @ params[f"h{l}.wq"] + dk @ params[f"h{l}.wk"] + dv @ params[f"h{l}.wv"]
        if want_p:
            _accum(param_grads, f"h{l}.wq", dq.T @ h)
            _accum(param_grads, f"h{l}.wk", dk.T @ h)
            _accum(param_grads, f"h{l}.wv", dv.T @ h)
        for proj, dy in (("query", dq), ("value", dv)):
            pair = _lora_pair(lora, l, proj)
            if pair is None:
                continue
            a, b = pair
            z = c["z_" + proj]
            dz = scale * (dy @ b)
            if lora_grads is not None:
                _accum(lora_grads, (l, proj, "B"), scale * (dy.T @ z))
                _accum(lora_grads, (l, proj, "A"), dz.T @ h)
            dh = dh + dz @ a
        dxr, dg = _rms_bwd(dh, params[f"h{l}.norm1"], c["rms1"])
        if want_p:
            _accum(param_grads, f"h{l}.norm1", dg)
        dx = dx + dxr
    return dx


def embed_grad_into(param_grads: dict, emb_shape, tokens: Sequence[int], dx_tokens: np.ndarray) -> None:
    """Scatter-add gradient on token input rows into the embedding table."""
    g = param_grads.get("tok_emb")
    if g is None:
        g = np.zeros(emb_shape, dtype=dx_tokens.dtype)
        param_grads["tok_emb"] = g
    np.add.at(g, np.asarray(list(tokens), dtype=np.int64), dx_tokens)


def masked_xent(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over positions where ``mask`` is set, and its gradient.

    ``logits[i]`` is scored against ``targets[i]``.
    """
    n = int(mask.sum())
    dl = np.zeros_like(logits)
    if n == 0:
        return 0.0, dl
    rows = np.nonzero(mask)[0]
    z = logits[rows].astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    tgt = targets[rows]
    loss = float(np.mean(lse - z[np.arange(len(rows)), tgt]))
    pr = np.exp(z - lse[:, None])
    pr[np.arange(len(rows)), tgt] -= 1.0
    dl[rows] = (pr / n).astype(logits.dtype)
    return loss, dl


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def save_checkpoint(model: Decoder, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 payload)."""
    path = Path(path)
    jp, bp = path.with_suffix(".json"), path.with_suffix(".bin")
    names = list(param_shapes(model.config))
    write_sidecar(jp, bp, "checkpoint", {"config": model.config.to_dict()},
                  [(n, model.params[n]) for n in names])
    return jp, bp


def load_checkpoint(path: str | Path) -> Decoder:
    path = Path(path)
    header, arrays = read_sidecar(path.with_suffix(".json"), "checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    return Decoder(cfg, arrays)
