"""Time each accelerated kernel against its pure-numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nevlab import _accel


def _best(fn, repeat: int) -> float:
    fn()  # warm-up (numba compiles on first call)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((192, 4, 20, 20))
    mask = np.broadcast_to(np.tril(np.ones((20, 20), dtype=bool)), x.shape).copy()
    flat_x, flat_m = x.reshape(-1, 20), mask.reshape(-1, 20)
    p = _accel._masked_softmax_np(x, mask).reshape(-1, 20)
    g = rng.standard_normal(p.shape)
    h = rng.standard_normal(192 * 20 * 64)
    losses = np.concatenate([rng.normal(3, 0.2, 280), rng.normal(4.5, 0.5, 120)])
    s = np.sort(losses)
    start = (np.array([0.5, 0.5]), np.array([s[:200].mean(), s[200:].mean()]), np.array([s[:200].var(), s[200:].var()]))
    scores = rng.random(20000)
    labels = rng.random(20000) < 0.3
    yield "masked_softmax", lambda: _accel._masked_softmax_np(flat_x, flat_m), lambda: _accel._masked_softmax_nb(flat_x, flat_m)
    yield "masked_softmax_grad", lambda: _accel._masked_softmax_grad_np(p, g), lambda: _accel._masked_softmax_grad_nb(p, g)
    yield "gelu", lambda: _accel._gelu_np(h), lambda: _accel._gelu_nb(h)
    yield (
        "gmm2_em",
        lambda: _accel._gmm2_em_np(losses, *start, 1e-10, 500, 1e-8),
        lambda: _accel._gmm2_em_nb(losses, *start, 1e-10, 500, 1e-8),
    )
    yield "auc", lambda: _accel._auc_np(scores, labels), lambda: _accel._auc_nb(scores, labels)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in cases(rng):
        a, b = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        print(f"{name:<22}{a * 1e3:>10.3f}{b * 1e3:>10.3f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()
