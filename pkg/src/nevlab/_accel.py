"""Hot kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``NEVLAB_NUMBA=0`` to force
the numpy path (also used automatically when numba is not importable).
Both paths agree to ~1e-12; bitwise agreement is only promised within one
backend.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("NEVLAB_NUMBA", "1").strip() not in ("0", "false", "no", "")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# masked row softmax
# ---------------------------------------------------------------------------


def _masked_softmax_np(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_softmax_grad_np(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


if _HAVE_NUMBA:

    @njit(cache=True)
    def _masked_softmax_nb(x, mask):
        rows, n = x.shape
        out = np.zeros((rows, n))
        for r in range(rows):
            m = -np.inf
            for c in range(n):
                if mask[r, c] and x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(n):
                if mask[r, c]:
                    e = np.exp(x[r, c] - m)
                    out[r, c] = e
                    s += e
            for c in range(n):
                out[r, c] /= s
        return out

    @njit(cache=True)
    def _masked_softmax_grad_nb(p, g):
        rows, n = p.shape
        out = np.empty((rows, n))
        for r in range(rows):
            dot = 0.0
            for c in range(n):
                dot += g[r, c] * p[r, c]
            for c in range(n):
                out[r, c] = p[r, c] * (g[r, c] - dot)
        return out


def masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries get exactly 0."""
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("empty attention row")
    if not USE_NUMBA:
        return _masked_softmax_np(x, mask)
    n = x.shape[-1]
    out = _masked_softmax_nb(
        np.ascontiguousarray(x).reshape(-1, n), np.ascontiguousarray(mask).reshape(-1, n)
    )
    return out.reshape(x.shape)


def masked_softmax_grad(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    if not USE_NUMBA:
        return _masked_softmax_grad_np(p, g)
    n = p.shape[-1]
    out = _masked_softmax_grad_nb(
        np.ascontiguousarray(p).reshape(-1, n), np.ascontiguousarray(g).reshape(-1, n)
    )
    return out.reshape(p.shape)


# ---------------------------------------------------------------------------
# tanh-approximated GELU, value and derivative in one pass
# ---------------------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu_np(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out = 0.5 * x * (1.0 + t)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return out, deriv


if _HAVE_NUMBA:

    @njit(cache=True)
    def _gelu_nb(x):
        out = np.empty_like(x)
        deriv = np.empty_like(x)
        c = np.sqrt(2.0 / np.pi)
        for i in range(x.size):
            v = x[i]
            t = np.tanh(c * (v + 0.044715 * v * v * v))
            out[i] = 0.5 * v * (1.0 + t)
            deriv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v)
        return out, deriv


def gelu(x: np.ndarray):
    """Return (gelu(x), d gelu / dx)."""
    if not USE_NUMBA:
        return _gelu_np(x)
    out, deriv = _gelu_nb(np.ascontiguousarray(x).reshape(-1))
    return out.reshape(x.shape), deriv.reshape(x.shape)


# ---------------------------------------------------------------------------
# two-component 1-D Gaussian mixture EM
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def _gmm2_loglik_np(x, w, mu, var):
    lp0 = np.log(w[0]) - 0.5 * (_LOG_2PI + np.log(var[0]) + (x - mu[0]) ** 2 / var[0])
    lp1 = np.log(w[1]) - 0.5 * (_LOG_2PI + np.log(var[1]) + (x - mu[1]) ** 2 / var[1])
    m = np.maximum(lp0, lp1)
    lse = m + np.log(np.exp(lp0 - m) + np.exp(lp1 - m))
    return lp0, lp1, lse


def _gmm2_em_np(x, w, mu, var, tol, max_iter, var_floor):
    w, mu, var = w.copy(), mu.copy(), var.copy()
    n = x.shape[0]
    trace = np.empty(max_iter + 1)
    lp0, lp1, lse = _gmm2_loglik_np(x, w, mu, var)
    trace[0] = lse.sum()
    it = 0
    while it < max_iter:
        r1 = np.exp(lp1 - lse)
        r0 = 1.0 - r1
        n0, n1 = r0.sum(), r1.sum()
        # a component with no mass keeps its parameters
        if n0 > 0.0:
            mu[0] = (r0 * x).sum() / n0
            var[0] = max((r0 * (x - mu[0]) ** 2).sum() / n0, var_floor)
        if n1 > 0.0:
            mu[1] = (r1 * x).sum() / n1
            var[1] = max((r1 * (x - mu[1]) ** 2).sum() / n1, var_floor)
        w[0], w[1] = n0 / n, n1 / n
        w[0] = max(w[0], 1e-300)
        w[1] = max(w[1], 1e-300)
        lp0, lp1, lse = _gmm2_loglik_np(x, w, mu, var)
        it += 1
        trace[it] = lse.sum()
        if trace[it] - trace[it - 1] < tol:
            break
    return w, mu, var, trace[: it + 1]


if _HAVE_NUMBA:

    @njit(cache=True)
    def _gmm2_em_nb(x, w, mu, var, tol, max_iter, var_floor):
        w, mu, var = w.copy(), mu.copy(), var.copy()
        n = x.shape[0]
        trace = np.empty(max_iter + 1)
        r1 = np.empty(n)
        log2pi = np.log(2.0 * np.pi)
        it = 0
        while True:
            ll = 0.0
            lw0, lw1 = np.log(w[0]), np.log(w[1])
            lv0, lv1 = np.log(var[0]), np.log(var[1])
            for i in range(n):
                a = lw0 - 0.5 * (log2pi + lv0 + (x[i] - mu[0]) ** 2 / var[0])
                b = lw1 - 0.5 * (log2pi + lv1 + (x[i] - mu[1]) ** 2 / var[1])
                m = max(a, b)
                lse = m + np.log(np.exp(a - m) + np.exp(b - m))
                ll += lse
                r1[i] = np.exp(b - lse)
            trace[it] = ll
            if it > 0 and trace[it] - trace[it - 1] < tol:
                break
            if it == max_iter:
                break
            n0 = 0.0
            n1 = 0.0
            s0 = 0.0
            s1 = 0.0
            for i in range(n):
                n1 += r1[i]
                n0 += 1.0 - r1[i]
                s1 += r1[i] * x[i]
                s0 += (1.0 - r1[i]) * x[i]
            if n0 > 0.0:
                mu[0] = s0 / n0
            if n1 > 0.0:
                mu[1] = s1 / n1
            q0 = 0.0
            q1 = 0.0
            for i in range(n):
                q0 += (1.0 - r1[i]) * (x[i] - mu[0]) ** 2
                q1 += r1[i] * (x[i] - mu[1]) ** 2
            if n0 > 0.0:
                var[0] = max(q0 / n0, var_floor)
            if n1 > 0.0:
                var[1] = max(q1 / n1, var_floor)
            w[0] = max(n0 / n, 1e-300)
            w[1] = max(n1 / n, 1e-300)
            it += 1
        return w, mu, var, trace[: it + 1]


def gmm2_em(x, w, mu, var, tol, max_iter, var_floor=1e-8):
    """Run EM from the given start; returns (weights, means, variances, loglik trace)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    args = (
        x,
        np.asarray(w, dtype=np.float64),
        np.asarray(mu, dtype=np.float64),
        np.asarray(var, dtype=np.float64),
        float(tol),
        int(max_iter),
        float(var_floor),
    )
    if USE_NUMBA:
        return _gmm2_em_nb(*args)
    return _gmm2_em_np(*args)


# ---------------------------------------------------------------------------
# Mann-Whitney AUC with tie handling
# ---------------------------------------------------------------------------


def _auc_np(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # average ranks over tie groups
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    pos = labels.astype(bool)
    n_pos = pos.sum()
    n_neg = len(s) - n_pos
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _auc_nb(scores, labels):
        n = scores.shape[0]
        order = np.argsort(scores, kind="mergesort")
        rank_sum = 0.0
        n_pos = 0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            avg = (i + j + 2) / 2.0
            for k in range(i, j + 1):
                if labels[order[k]]:
                    rank_sum += avg
                    n_pos += 1
            i = j + 1
        n_neg = n - n_pos
        return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.bool_)
    if USE_NUMBA:
        return float(_auc_nb(scores, labels))
    return float(_auc_np(scores, labels))
