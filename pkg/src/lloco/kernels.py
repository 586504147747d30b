"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``LLOCO_DISABLE_NUMBA``
is unset (or "0"). Both paths compute the same quantities; results agree to
floating-point rounding, not bitwise.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def _env_disabled() -> bool:
    return os.environ.get("LLOCO_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()
DECODE_BLOCK = 8


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference paths
# ---------------------------------------------------------------------------


def attention_numpy(q: np.ndarray, k: np.ndarray, v: np.ndarray, offset: int) -> np.ndarray:
    """Causal attention for queries at absolute positions offset..offset+Tq-1.

    q: (H, Tq, hd); k, v: (H, Tk, hd). Query i sees keys 0..offset+i.
    """
    H, Tq, hd = q.shape
    Tk = k.shape[1]
    scale = 1.0 / math.sqrt(hd)
    s = np.matmul(q, k.transpose(0, 2, 1)) * q.dtype.type(scale)
    qpos = np.arange(Tq)[:, None] + offset
    kpos = np.arange(Tk)[None, :]
    s = np.where(kpos <= qpos, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v)


def rms_norm_numpy(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    return x / r * g


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_numpy(u: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * (u * u * u))))


def gelu_grad_numpy(u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def cosine_scores_numpy(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    # rows of mat and q are unit-norm; accumulate in float64
    return mat.astype(np.float64) @ q.astype(np.float64)


def top_k_numpy(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


# ---------------------------------------------------------------------------
# numba paths
# ---------------------------------------------------------------------------


@njit(cache=True)
def _attention_nb(q, k, v, offset):
    H, Tq, hd = q.shape
    Tk = k.shape[1]
    out = np.zeros((H, Tq, hd), dtype=q.dtype)
    scale = 1.0 / math.sqrt(hd)
    s = np.empty(Tk, dtype=np.float64)
    for h in range(H):
        for i in range(Tq):
            last = min(offset + i, Tk - 1)
            m = -np.inf
            for j in range(last + 1):
                acc = 0.0
                for c in range(hd):
                    acc += q[h, i, c] * k[h, j, c]
                acc *= scale
                s[j] = acc
                if acc > m:
                    m = acc
            tot = 0.0
            for j in range(last + 1):
                e = math.exp(s[j] - m)
                s[j] = e
                tot += e
            for j in range(last + 1):
                w = s[j] / tot
                for c in range(hd):
                    out[h, i, c] += w * v[h, j, c]
    return out


@njit(cache=True)
def _rms_norm_nb(x, g, eps):
    T, d = x.shape
    out = np.empty_like(x)
    for t in range(T):
        acc = 0.0
        for c in range(d):
            acc += x[t, c] * x[t, c]
        r = math.sqrt(acc / d + eps)
        for c in range(d):
            out[t, c] = x[t, c] / r * g[c]
    return out


@njit(cache=True)
def _cosine_scores_nb(mat, q):
    n, d = mat.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for c in range(d):
            acc += np.float64(mat[i, c]) * np.float64(q[c])
        out[i] = acc
    return out


@njit(cache=True)
def _top_k_nb(scores, k):
    n = scores.shape[0]
    k = min(k, n)
    idx = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    for r in range(k):
        best = -1
        for i in range(n):
            if taken[i]:
                continue
            if best < 0 or scores[i] > scores[best]:
                best = i
        idx[r] = best
        taken[best] = True
    return idx


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, offset: int = 0) -> np.ndarray:
    # the loop kernel wins for decode-sized query blocks; batched matmul wins for prefill
    if USE_NUMBA and q.shape[1] <= DECODE_BLOCK:
        return _attention_nb(np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v), offset)
    return attention_numpy(q, k, v, offset)


def rms_norm(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    if USE_NUMBA and x.ndim == 2:
        return _rms_norm_nb(np.ascontiguousarray(x), g.astype(x.dtype), eps)
    return rms_norm_numpy(x, g, eps)


# GELU stays in numpy on both paths: without SVML numba evaluates tanh/exp one
# element at a time, several times slower than numpy's vectorised tanh.
gelu = gelu_numpy
gelu_grad = gelu_grad_numpy


def cosine_scores(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _cosine_scores_nb(np.ascontiguousarray(mat), np.ascontiguousarray(q))
    return cosine_scores_numpy(mat, q)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    if USE_NUMBA and k < 64:
        return _top_k_nb(np.ascontiguousarray(scores, dtype=np.float64), k)
    return top_k_numpy(scores, k)
