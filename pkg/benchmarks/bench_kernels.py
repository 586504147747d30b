"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once first so numba compilation is excluded.
"""

import argparse
import time

import numpy as np

from lloco import kernels


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1000.0


def cases(rng):
    q = rng.standard_normal((4, 1, 16)).astype(np.float32)
    kv = rng.standard_normal((4, 256, 16)).astype(np.float32)
    qp = rng.standard_normal((4, 256, 16)).astype(np.float32)
    x = rng.standard_normal((256, 64)).astype(np.float32)
    g = np.ones(64, dtype=np.float32)
    mat = rng.standard_normal((5000, 64)).astype(np.float32)
    vec = rng.standard_normal(64).astype(np.float32)
    scores = rng.standard_normal(5000)
    return [
        ("attention decode (1 x 256)", lambda: kernels._attention_nb(q, kv, kv, 255),
         lambda: kernels.attention_numpy(q, kv, kv, 255)),
        ("attention prefill (256 x 256)", lambda: kernels._attention_nb(qp, kv, kv, 0),
         lambda: kernels.attention_numpy(qp, kv, kv, 0)),
        ("rms_norm (256 x 64)", lambda: kernels._rms_norm_nb(x, g, 1e-5), lambda: kernels.rms_norm_numpy(x, g, 1e-5)),
        ("cosine scores (5000 x 64)", lambda: kernels._cosine_scores_nb(mat, vec),
         lambda: kernels.cosine_scores_numpy(mat, vec)),
        ("top_k k=5 of 5000", lambda: kernels._top_k_nb(scores, 5), lambda: kernels.top_k_numpy(scores, 5)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'numpy/numba':>12s}")
    for name, nb, ref in cases(rng):
        a, b = timeit(nb, args.repeat), timeit(ref, args.repeat)
        print(f"{name:32s} {a:10.3f} {b:10.3f} {b / a:12.2f}")


if __name__ == "__main__":
    main()
