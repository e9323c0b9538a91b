"""Naive loop implementations used as independent references."""
import numpy as np


def conv1d(x, w, b, stride=1, padding=0):
    B, C, L = x.shape
    O, _, K = w.shape
    xp = np.zeros((B, C, L + 2 * padding))
    xp[:, :, padding:padding + L] = x
    T = (L + 2 * padding - K) // stride + 1
    out = np.zeros((B, O, T))
    for n in range(B):
        for o in range(O):
            for t in range(T):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C):
                    for k in range(K):
                        acc += float(xp[n, c, t * stride + k]) * float(w[o, c, k])
                out[n, o, t] = acc
    return out


def conv_transpose1d(x, w, b, stride=1, padding=0):
    """Scatter form: every input position adds a weighted kernel copy to the output."""
    B, C, L = x.shape
    _, O, K = w.shape
    full = np.zeros((B, O, (L - 1) * stride + K))
    for n in range(B):
        for c in range(C):
            for i in range(L):
                for o in range(O):
                    for k in range(K):
                        full[n, o, i * stride + k] += float(x[n, c, i]) * float(w[c, o, k])
    out = full[:, :, padding:full.shape[2] - padding]
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)[None, :, None]
    return out


def maxpool1d(x, window):
    B, C, L = x.shape
    n = -(-L // window)
    vals = np.zeros((B, C, n), dtype=x.dtype)
    idx = np.zeros((B, C, n), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for j in range(n):
                best, arg = -np.inf, -1
                for i in range(j * window, min((j + 1) * window, L)):
                    if x[b, c, i] > best:  # strict: the first maximum wins
                        best, arg = x[b, c, i], i
                vals[b, c, j], idx[b, c, j] = best, arg
    return vals, idx


def maxunpool1d(x, idx, out_len):
    B, C, n = x.shape
    out = np.zeros((B, C, out_len), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for j in range(n):
                out[b, c, idx[b, c, j]] = x[b, c, j]
    return out


def adaptive_avg_pool1d(x, n):
    B, C, L = x.shape
    out = np.zeros((B, C, n))
    for j in range(n):
        lo = (j * L) // n
        hi = -(-((j + 1) * L) // n)
        for b in range(B):
            for c in range(C):
                out[b, c, j] = sum(float(v) for v in x[b, c, lo:hi]) / (hi - lo)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(initial=0.0), 1e-30)
    return float(np.abs(a - b).max(initial=0.0) / scale)
